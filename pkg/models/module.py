"""
Parameter containers for the network modules
"""
import logging
from typing import Dict, Iterator, Tuple

import numpy as np

from models.tensor import BNState, Parameter, RngState, Tensor, batch_norm, get_default_dtype, layer_norm

logger = logging.getLogger(__name__)


def init_uniform(rng: RngState, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))"""
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(shape, -bound, bound)


class Module:
    """
    Base class for everything that owns parameters.

    Parameters and child modules are enumerated in registration order, so
    ``named_parameters`` is deterministic and names are dotted paths such as
    ``enc.0.gmc.Wq``.
    """

    def __init__(self):
        self._parameters: Dict[str, Parameter] = {}
        self._modules: Dict[str, 'Module'] = {}
        self.training = True

    def add_parameter(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._parameters:
            raise KeyError(f'duplicate parameter {name}')
        param = Parameter(value, name=name, dtype=get_default_dtype())
        self._parameters[name] = param
        return param

    def add_weight(self, name: str, shape: Tuple[int, ...], rng: RngState, fan_in: int = None) -> Parameter:
        return self.add_parameter(name, init_uniform(rng, shape, fan_in or shape[0]))

    def add_zeros(self, name: str, shape: Tuple[int, ...]) -> Parameter:
        return self.add_parameter(name, np.zeros(shape))

    def add_module(self, name: str, module: 'Module') -> 'Module':
        if name in self._modules:
            raise KeyError(f'duplicate module {name}')
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(f'{prefix}{name}.')

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name, module in self._modules.items():
            yield from module.named_buffers(f'{prefix}{name}.')

    def set_buffer(self, name: str, value: np.ndarray):
        head, _, rest = name.partition('.')
        self._modules[head].set_buffer(rest, value)

    def assign_names(self, prefix: str = ''):
        """Stamp every parameter with its full dotted path"""
        for name, param in self.named_parameters(prefix):
            param.name = name

    def train(self, mode: bool = True) -> 'Module':
        self.training = mode
        for module in self._modules.values():
            module.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: param.data for name, param in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [name for name in list(params) + list(buffers) if name not in state]
        if missing:
            raise KeyError(f'missing entries in state: {", ".join(missing[:5])}')
        for name, param in params.items():
            if state[name].shape != param.shape:
                raise ValueError(f'shape mismatch for {name}: {state[name].shape} vs {param.shape}')
            param.data = np.asarray(state[name], dtype=param.dtype).copy()
        for name in buffers:
            self.set_buffer(name, state[name])

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class BatchNorm(Module):
    """Per-channel batch normalisation site (gamma=1, beta=0 at init)"""

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        gamma = self.add_parameter('gamma', np.ones(width))
        beta = self.add_parameter('beta', np.zeros(width))
        self.state = BNState(gamma, beta, momentum=momentum, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.state, 'train' if self.training else 'eval')

    def named_buffers(self, prefix: str = ''):
        yield prefix + 'running_mean', self.state.running_mean
        yield prefix + 'running_var', self.state.running_var

    def set_buffer(self, name: str, value: np.ndarray):
        value = np.asarray(value, dtype=self.state.gamma.dtype).copy()
        if name == 'running_mean':
            self.state.running_mean = value
        elif name == 'running_var':
            self.state.running_var = value
        else:
            raise KeyError(f'unknown batch-norm buffer {name}')


class LayerNorm(Module):

    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_parameter('gamma', np.ones(width))
        self.beta = self.add_parameter('beta', np.zeros(width))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
