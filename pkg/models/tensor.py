"""
Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
the parents' gradients. ``Tensor.backward`` walks the recorded graph in
reverse topological order. A graph lives for one forward pass; nothing is
reused across steps.

Precision is chosen when tensors are constructed (``default_dtype``): float32
for training, float64 for gradient checks. Ops never change precision.
"""
import contextlib
import logging
import struct
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import DatasetFormatError, ShapeError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

TENSOR_MAGIC = b'DTNT'


@contextlib.contextmanager
def default_dtype(dtype):
    """Construct new tensors (and models) with the given float precision"""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (decoding, evaluation)"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """n-dimensional array with optional gradient tracking"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple['Tensor', ...] = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence['Tensor'], backward) -> 'Tensor':
        out = cls.__new__(Tensor)
        out.data = data
        out.grad = None
        tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    def __repr__(self):
        return f'<Tensor shape={self.shape} dtype={self.dtype.name} requires_grad={self.requires_grad}>'

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, power(_as_tensor(other, self), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def relu(self):
        return unary(self, 'relu')

    def sigmoid(self):
        return unary(self, 'sigmoid')

    def exp(self):
        return unary(self, 'exp')

    def log(self):
        return unary(self, 'log')

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor; ``name`` is its dotted path inside the model"""

    def __init__(self, data, name: str = '', dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f'<Parameter {self.name} shape={self.shape}>'


class RngState:
    """
    Seeded random stream.

    Backed by numpy's Philox4x64 counter-based generator, whose output depends
    only on (key, counter), so identical seeds give identical streams on every
    platform. ``counter`` reports how far the stream has advanced.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = (self.seed & 0xFFFFFFFFFFFFFFFF) | ((self.stream & 0xFFFFFFFFFFFFFFFF) << 64)
        self._bit_generator = np.random.Philox(key=key)
        self.generator = np.random.Generator(self._bit_generator)

    @property
    def counter(self) -> int:
        return int(self._bit_generator.state['state']['counter'][0])

    def fork(self, stream: int) -> 'RngState':
        """Independent stream derived from the same seed"""
        return RngState(self.seed, stream)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def gumbel(self, shape) -> np.ndarray:
        u = self.generator.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
        return -np.log(-np.log(u))


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f'shapes {a.shape} and {b.shape} are not broadcastable')


# elementwise binary ops
#
# Broadcasting follows the trailing-dimension rule: shapes are aligned on their
# last axis, and each pair of sizes must be equal or one of them 1. The
# gradient of a broadcast operand is summed over every broadcast axis.

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), _backward)


def ewise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Elementwise ``add`` or ``mul`` with trailing-dimension broadcasting"""
    if kind == 'add':
        return add(a, b)
    if kind == 'mul':
        return mul(a, b)
    raise ValueError(f'unknown elementwise op: {kind}')


def power(x: Tensor, exponent: float) -> Tensor:
    out = np.power(x.data, exponent)

    def _backward(g):
        return (g * exponent * np.power(x.data, exponent - 1),)

    return Tensor._from_op(out, (x,), _backward)


def unary(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu, sigmoid, exp or log"""
    if kind == 'relu':
        out = np.maximum(x.data, 0)

        def _backward(g):
            # subgradient 0 at exactly 0
            return (g * (x.data > 0),)
    elif kind == 'sigmoid':
        out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

        def _backward(g):
            return (g * out * (1.0 - out),)
    elif kind == 'exp':
        out = np.exp(x.data)

        def _backward(g):
            return (g * out,)
    elif kind == 'log':
        out = np.log(x.data)

        def _backward(g):
            return (g / x.data,)
    else:
        raise ValueError(f'unknown unary op: {kind}')
    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), _backward)


def relu(x: Tensor) -> Tensor:
    return unary(x, 'relu')


def sigmoid(x: Tensor) -> Tensor:
    return unary(x, 'sigmoid')


# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dimensions broadcast"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'cannot multiply shapes {a.shape} and {b.shape}')
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f'batch dimensions of {a.shape} and {b.shape} do not broadcast')

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), _backward)


# reductions

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), _backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tensor_sum(x, axes, keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilised softmax along ``axis``"""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f'softmax axis {axis} out of range for shape {x.shape}')
    if x.shape[axis] == 0:
        raise ShapeError(f'softmax over empty axis {axis} of shape {x.shape}')
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), _backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f'log_softmax over empty axis {axis} of shape {x.shape}')
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), _backward)


# shape ops

def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f'cannot reshape {x.shape} to {tuple(shape)}')

    def _backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), _backward)


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = np.argsort(axes)

    def _backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(x.data, axes), (x,), _backward)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def _backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=x.dtype), (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Order-preserving concatenation along ``axis``"""
    if not tensors:
        raise ShapeError('concat of an empty list')
    ndim = tensors[0].ndim
    axis = axis % ndim
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, reference)) if i != axis):
            raise ShapeError(f'cannot concatenate {reference} with {t.shape} along axis {axis}')
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _backward)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passed to ``soft`` unchanged"""

    def _backward(g):
        return (g,)

    return Tensor._from_op(np.asarray(hard, dtype=soft.dtype), (soft,), _backward)


# convolution and normalisation

def conv2d(x: Tensor, w: Tensor, padding: str = 'same') -> Tensor:
    """
    2-D cross-correlation (no kernel flip) over NHWC input.

    Args:
        x: [B, H, W, Cin]
        w: [kh, kw, Cin, Cout] with kh, kw in {1, 3}
        padding: only 'same' (zero padding) is supported

    Returns:
        [B, H, W, Cout]
    """
    kh, kw, cin, cout = w.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f'unsupported kernel size {kh}x{kw}')
    if padding != 'same':
        raise ShapeError(f'unsupported padding {padding!r}')
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ShapeError(f'conv input {x.shape} does not match kernel {w.shape}')
    batch, height, width, _ = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((batch, height, width, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.matmul(padded[:, i:i + height, j:j + width, :], w.data[i, j])

    def _backward(g):
        grad_padded = np.zeros_like(padded)
        grad_w = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, i:i + height, j:j + width, :] += np.matmul(g, w.data[i, j].T)
                window = padded[:, i:i + height, j:j + width, :]
                grad_w[i, j] = np.tensordot(window, g, axes=([0, 1, 2], [0, 1, 2]))
        return grad_padded[:, ph:ph + height, pw:pw + width, :], grad_w

    return Tensor._from_op(out, (x, w), _backward)


class BNState:
    """Learnable scale/shift plus running statistics of one batch-norm site"""

    def __init__(self, gamma: Parameter, beta: Parameter, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.momentum = momentum
        self.eps = eps
        width = gamma.shape[0]
        self.running_mean = np.zeros(width, dtype=gamma.dtype)
        self.running_var = np.ones(width, dtype=gamma.dtype)

    @property
    def width(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BNState, mode: str = 'train') -> Tensor:
    """
    Batch normalisation over (B, H, W) per channel.

    Train mode normalises with the biased batch variance and updates the
    running statistics (unbiased variance) with ``state.momentum``; eval mode
    uses the running statistics.
    """
    if x.ndim != 4 or x.shape[-1] != state.width:
        raise ShapeError(f'batch_norm input {x.shape} does not match width {state.width}')
    if mode == 'train':
        count = x.shape[0] * x.shape[1] * x.shape[2]
        if count == 1:
            raise ShapeError('batch_norm in train mode needs more than one value per channel')
        mu = mean(x, axis=(0, 1, 2), keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axis=(0, 1, 2), keepdims=True)
        normalized = centered * power(var + state.eps, -0.5)
        m = state.momentum
        batch_var = var.data.reshape(-1) * count / (count - 1)
        state.running_mean = ((1 - m) * state.running_mean + m * mu.data.reshape(-1)).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * batch_var).astype(state.running_var.dtype)
    elif mode == 'eval':
        scale = 1.0 / np.sqrt(state.running_var + state.eps)
        normalized = (x - state.running_mean.astype(x.dtype)) * scale.astype(x.dtype)
    else:
        raise ValueError(f'unknown batch_norm mode {mode!r}')
    return normalized * state.gamma + state.beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    return centered * power(var + eps, -0.5) * gamma + beta


def global_pool(x: Tensor, domain: str) -> Tensor:
    """Spatial pooling -> [B, C]; channel pooling -> [B, H, W]"""
    if x.ndim != 4:
        raise ShapeError(f'global_pool expects rank-4 input, got {x.shape}')
    if domain == 'spatial':
        return mean(x, axis=(1, 2))
    if domain == 'channel':
        return mean(x, axis=3)
    raise ValueError(f'unknown pooling domain {domain!r}')


def one_hot(indices: np.ndarray, depth: int, dtype=None) -> np.ndarray:
    out = np.zeros(indices.shape + (depth,), dtype=dtype or _DEFAULT_DTYPE)
    np.put_along_axis(out, indices[..., None], 1, axis=-1)
    return out


# backward pass

def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """
    Accumulate d(loss)/d(leaf) into ``grad`` of every tracked leaf.

    Gradients accumulate across calls until zeroed.
    """
    if loss.size != 1:
        raise ShapeError(f'backward needs a scalar loss, got shape {loss.shape}')
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad


# DTNT serialization: magic, u32 rank, u32 dims[rank], float32 little-endian data

def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    header = TENSOR_MAGIC + struct.pack('<I', array.ndim) + struct.pack(f'<{array.ndim}I', *array.shape)
    return header + np.ascontiguousarray(array, dtype='<f4').tobytes()


def tensor_from_bytes(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one DTNT record; returns the array and the offset after it"""
    if buffer[offset:offset + 4] != TENSOR_MAGIC:
        raise DatasetFormatError('bad tensor magic', offset=offset)
    if len(buffer) < offset + 8:
        raise DatasetFormatError('truncated tensor header', offset=offset + 4)
    (rank,) = struct.unpack_from('<I', buffer, offset + 4)
    cursor = offset + 8
    if len(buffer) < cursor + 4 * rank:
        raise DatasetFormatError('truncated tensor dims', offset=cursor)
    dims = struct.unpack_from(f'<{rank}I', buffer, cursor)
    cursor += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = cursor + 4 * count
    if len(buffer) < end:
        raise DatasetFormatError(f'truncated tensor data, expected {count} floats', offset=cursor)
    array = np.frombuffer(buffer, dtype='<f4', count=count, offset=cursor).reshape(dims).astype(np.float32)
    return array, end
