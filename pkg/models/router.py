"""
Path-weight routers and the dynamic combination of cell outputs.

A router looks at the input of its routing space and produces one convex
weight vector per sample over the cells of that space. The spatial-channel
joint router fuses a spatially pooled channel descriptor with a channel
pooled spatial descriptor before the final softmax.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, ShapeError
from models.cells import CellKind
from models.module import Module
from models.tensor import (RngState, Tensor, concat, global_pool, one_hot, relu, softmax,
                           straight_through)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.3


class RouterVariant(str, Enum):
    SCJR = 'SCJR'
    SPATIAL_ONLY = 'SPATIAL_ONLY'
    CHANNEL_ONLY = 'CHANNEL_ONLY'
    STATIC_SUM = 'STATIC_SUM'

    @property
    def uses_channel_branch(self) -> bool:
        return self in (RouterVariant.SCJR, RouterVariant.CHANNEL_ONLY)

    @property
    def uses_spatial_branch(self) -> bool:
        return self in (RouterVariant.SCJR, RouterVariant.SPATIAL_ONLY)


@dataclass(frozen=True)
class RoutingType:
    """Soft convex mixing, or hard one-hot selection through Gumbel noise"""

    kind: str = 'soft'
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in ('soft', 'hard'):
            raise ConfigError(f'routing type must be soft or hard, got {self.kind!r}')
        if not self.temperature > 0:
            raise ConfigError(f'routing temperature must be positive, got {self.temperature}')

    @property
    def hard(self) -> bool:
        return self.kind == 'hard'


@dataclass
class PathWeights:
    """Per-sample weights [B, p] over the cells of one routing space"""

    weights: Tensor
    space: str
    cells: Tuple[CellKind, ...]
    logits: Optional[Tensor] = None

    @property
    def values(self) -> np.ndarray:
        return self.weights.numpy()

    @property
    def arity(self) -> int:
        return self.weights.shape[-1]

    def active_cells(self, threshold: float = DEFAULT_THRESHOLD) -> List[Tuple[CellKind, ...]]:
        return [tuple(self.cells[k] for k in active)
                for active in discretize_paths(self.values, threshold)]


class SpatialChannelJointRouter(Module):
    """
    Router for one routing space of one encoder layer.

    Only the branches the variant needs are built, so a STATIC_SUM router
    owns no parameters at all.
    """

    def __init__(self, channels: int, n_positions: int, paths: int, rng: RngState,
                 variant: RouterVariant = RouterVariant.SCJR, channel_reduction: int = 16,
                 spatial_reduction: int = 7):
        super().__init__()
        if paths < 1:
            raise ConfigError('a routing space needs at least one cell')
        self.channels = channels
        self.n_positions = n_positions
        self.paths = paths
        self.variant = RouterVariant(variant)
        if self.variant.uses_channel_branch:
            hidden = max(channels // channel_reduction, 1)
            self.W_cha1 = self.add_weight('W_cha1', (channels, hidden), rng)
            self.W_cha2 = self.add_weight('W_cha2', (hidden, paths), rng)
        if self.variant.uses_spatial_branch:
            hidden = max(n_positions // spatial_reduction, 1)
            self.W_spa1 = self.add_weight('W_spa1', (n_positions, hidden), rng)
            self.W_spa2 = self.add_weight('W_spa2', (hidden, paths), rng)
        if self.variant == RouterVariant.SCJR:
            self.W_joint1 = self.add_weight('W_joint1', (2 * paths, paths), rng)
            self.W_joint2 = self.add_weight('W_joint2', (paths, paths), rng)

    def _check_input(self, x: Tensor):
        if x.ndim != 4:
            raise ShapeError(f'router expects [B, H, W, C], got {x.shape}')
        batch, height, width, channels = x.shape
        if height * width != self.n_positions or channels != self.channels:
            raise ShapeError(f'router built for N={self.n_positions}, C={self.channels}; got input {x.shape}')

    def channel_logits(self, x: Tensor) -> Tensor:
        """relu(GSP(X) W_cha1) W_cha2 -> [B, p]"""
        if not self.variant.uses_channel_branch:
            raise ConfigError(f'{self.variant.value} router has no channel branch')
        return relu(global_pool(x, 'spatial') @ self.W_cha1) @ self.W_cha2

    def spatial_logits(self, x: Tensor) -> Tensor:
        """relu(GCP(X) W_spa1) W_spa2 -> [B, p]"""
        if not self.variant.uses_spatial_branch:
            raise ConfigError(f'{self.variant.value} router has no spatial branch')
        pooled = global_pool(x, 'channel').reshape(x.shape[0], self.n_positions)
        return relu(pooled @ self.W_spa1) @ self.W_spa2

    def logits(self, x: Tensor) -> Tensor:
        self._check_input(x)
        if self.variant == RouterVariant.SCJR:
            fused = concat([self.channel_logits(x), self.spatial_logits(x)], axis=-1)
            return relu(fused @ self.W_joint1) @ self.W_joint2
        if self.variant == RouterVariant.SPATIAL_ONLY:
            return self.spatial_logits(x)
        if self.variant == RouterVariant.CHANNEL_ONLY:
            return self.channel_logits(x)
        return Tensor(np.zeros((x.shape[0], self.paths)), dtype=x.dtype)


def static_weights(batch: int, paths: int, dtype) -> Tensor:
    return Tensor(np.full((batch, paths), 1.0 / paths), dtype=dtype)


def scjr_forward(x: Tensor, router: SpatialChannelJointRouter, space: str = 'spatial',
                 cells: Sequence[CellKind] = ()) -> PathWeights:
    """Soft spatial-channel joint routing: softmax over the fused logits"""
    if router.variant != RouterVariant.SCJR:
        raise ConfigError(f'scjr_forward needs an SCJR router, got {router.variant.value}')
    logits = router.logits(x)
    return PathWeights(softmax(logits, axis=-1), space, tuple(cells), logits)


def router_variant_forward(x: Tensor, variant: RouterVariant,
                           router: Optional[SpatialChannelJointRouter], paths: int = None,
                           space: str = 'spatial', cells: Sequence[CellKind] = ()) -> PathWeights:
    """
    Soft path weights for any router variant.

    STATIC_SUM needs no router; every other variant needs one built for the
    same variant.
    """
    variant = RouterVariant(variant)
    if variant == RouterVariant.STATIC_SUM:
        paths = paths or (router.paths if router is not None else len(cells))
        if not paths:
            raise ConfigError('STATIC_SUM needs the number of paths')
        return PathWeights(static_weights(x.shape[0], paths, x.dtype), space, tuple(cells))
    if router is None or router.variant != variant:
        found = 'none' if router is None else router.variant.value
        raise ConfigError(f'{variant.value} routing needs {variant.value} router parameters, found {found}')
    logits = router.logits(x)
    return PathWeights(softmax(logits, axis=-1), space, tuple(cells), logits)


def gumbel_softmax(logits: Tensor, temperature: float, rng: Optional[RngState] = None) -> Tensor:
    """softmax((logits + g) / temperature), g Gumbel(0, 1) noise; no noise without an rng"""
    if not temperature > 0:
        raise ConfigError(f'gumbel temperature must be positive, got {temperature}')
    if rng is not None:
        logits = logits + rng.gumbel(logits.shape).astype(logits.dtype)
    return softmax(logits * (1.0 / temperature), axis=-1)


def gumbel_hard_route(logits: Tensor, temperature: float, rng: Optional[RngState],
                      mode: str = 'train') -> Tensor:
    """
    Hard one-hot path selection.

    train: argmax of softmax((logits + Gumbel noise) / temperature), one-hot in
    the forward pass, the soft distribution's gradient in the backward pass.
    eval: argmax of the logits, no noise.
    """
    if mode == 'train':
        if rng is None:
            raise ConfigError('train-mode hard routing needs an RngState')
        soft = gumbel_softmax(logits, temperature, rng)
    elif mode == 'eval':
        soft = gumbel_softmax(logits, temperature)
    else:
        raise ValueError(f'unknown routing mode {mode!r}')
    # np.argmax keeps the lower index on ties
    hard = one_hot(np.argmax(soft.data, axis=-1), logits.shape[-1], dtype=logits.dtype)
    return straight_through(hard, soft)


def route_combine(weights: PathWeights, outputs: Sequence[Tensor]) -> Tensor:
    """Y[b] = sum_k w[b, k] * Y_k[b]"""
    if len(outputs) != weights.arity:
        raise ShapeError(f'{weights.arity} path weights for {len(outputs)} cell outputs')
    reference = outputs[0].shape
    for out in outputs[1:]:
        if out.shape != reference:
            raise ShapeError(f'cell outputs disagree: {reference} vs {out.shape}')
    if weights.weights.shape[0] != reference[0]:
        raise ShapeError(f'weights {weights.weights.shape} do not match batch of {reference}')
    broadcast = (reference[0],) + (1,) * (len(reference) - 1)
    combined = None
    for k, out in enumerate(outputs):
        term = weights.weights[:, k].reshape(broadcast) * out
        combined = term if combined is None else combined + term
    return combined


def discretize_paths(weights, threshold: float = DEFAULT_THRESHOLD) -> List[Tuple[int, ...]]:
    """
    Active cell indices per sample: cell k is active iff w[b, k] >= threshold.

    Args:
        weights: [B, p] array, Tensor or PathWeights

    Returns:
        one sorted tuple of 0-based cell indices per sample
    """
    if not 0 < threshold < 1:
        raise ConfigError(f'threshold must lie in (0, 1), got {threshold}')
    if isinstance(weights, PathWeights):
        weights = weights.values
    elif isinstance(weights, Tensor):
        weights = weights.numpy()
    weights = np.asarray(weights)
    if weights.ndim == 1:
        weights = weights[None, :]
    return [tuple(int(k) for k in np.flatnonzero(row >= threshold)) for row in weights]


def count_active_cells(layer_weights: Sequence, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Total active cells per sample summed over every (layer, space) weight block"""
    totals = None
    for weights in layer_weights:
        counts = np.array([len(active) for active in discretize_paths(weights, threshold)])
        totals = counts if totals is None else totals + counts
    if totals is None:
        return np.zeros(0, dtype=int)
    return totals


def count_submodels(layers: Sequence[Sequence], threshold: float = DEFAULT_THRESHOLD) -> Dict[str, object]:
    """
    Distinct discretised path combinations seen across the batch.

    Args:
        layers: per layer, the weight blocks of its routing spaces

    Returns:
        dict with 'total' (combinations over the whole encoder) and
        'per_layer' (combinations seen in each layer)
    """
    per_layer, samples = [], None
    for spaces in layers:
        blocks = [discretize_paths(weights, threshold) for weights in spaces]
        layer_combos = list(zip(*blocks))
        per_layer.append(len(set(layer_combos)))
        samples = [(combo,) for combo in layer_combos] if samples is None else \
            [prev + (combo,) for prev, combo in zip(samples, layer_combos)]
    return {'total': len(set(samples or ())), 'per_layer': per_layer}
