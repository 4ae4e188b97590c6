"""
Dynamically routed encoder.

Each layer holds one or two routing spaces. A space owns a set of cells and a
router; its output is the path-weighted sum of the cell outputs, added back
onto the space's input. Spaces run sequentially (S_THEN_C, C_THEN_S) or side
by side (PARALLEL).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, ShapeError
from models.cells import CHANNEL_CELLS, SPATIAL_CELLS, CellKind, build_cell
from models.module import Module
from models.router import (PathWeights, RouterVariant, RoutingType, SpatialChannelJointRouter,
                           gumbel_hard_route, route_combine, router_variant_forward)
from models.tensor import RngState, Tensor

logger = logging.getLogger(__name__)


class Arrangement(str, Enum):
    S_THEN_C = 'S_THEN_C'
    C_THEN_S = 'C_THEN_S'
    PARALLEL = 'PARALLEL'


class Grouping(str, Enum):
    GROUPED = 'GROUPED'
    UNGROUPED = 'UNGROUPED'


@dataclass
class EncoderConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    grid: Tuple[int, int] = (7, 7)
    spatial_cells: Tuple[CellKind, ...] = SPATIAL_CELLS
    channel_cells: Tuple[CellKind, ...] = CHANNEL_CELLS
    arrangement: Arrangement = Arrangement.S_THEN_C
    grouping: Grouping = Grouping.GROUPED
    router_variant: RouterVariant = RouterVariant.SCJR
    routing: RoutingType = field(default_factory=RoutingType)
    custom_groups: Optional[Tuple[Tuple[CellKind, ...], Tuple[CellKind, ...]]] = None
    ffn_ratio: int = 4
    cac_reduction: int = 16
    router_channel_reduction: int = 16
    router_spatial_reduction: int = 7
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    gmc_residual: bool = True

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.spatial_cells = tuple(CellKind(k) for k in self.spatial_cells)
        self.channel_cells = tuple(CellKind(k) for k in self.channel_cells)
        self.arrangement = Arrangement(self.arrangement)
        self.grouping = Grouping(self.grouping)
        self.router_variant = RouterVariant(self.router_variant)
        if self.custom_groups is not None:
            self.custom_groups = tuple(tuple(CellKind(k) for k in group) for group in self.custom_groups)

    @property
    def n_positions(self) -> int:
        return self.grid[0] * self.grid[1]

    def validate(self) -> 'EncoderConfig':
        """Collect every problem before raising"""
        problems = []
        if self.layers < 0:
            problems.append(f'layers must be >= 0, got {self.layers}')
        if self.d_model < 1:
            problems.append(f'd_model must be positive, got {self.d_model}')
        if self.heads < 1 or (self.d_model >= 1 and self.d_model % self.heads):
            problems.append(f'd_model {self.d_model} is not divisible by {self.heads} heads')
        if len(self.grid) != 2 or min(self.grid) < 1:
            problems.append(f'grid must be two positive sizes, got {self.grid}')
        for kind in self.spatial_cells:
            if kind not in SPATIAL_CELLS:
                problems.append(f'{kind.value} is not a spatial cell')
        for kind in self.channel_cells:
            if kind not in CHANNEL_CELLS:
                problems.append(f'{kind.value} is not a channel cell')
        if self.custom_groups is not None:
            if len(self.custom_groups) != 2 or not all(self.custom_groups):
                problems.append('custom_groups must be two non-empty cell sets')
            else:
                flat = [k for group in self.custom_groups for k in group]
                if len(set(flat)) != len(flat):
                    problems.append('custom_groups must be disjoint')
        elif not self.spatial_cells and not self.channel_cells:
            problems.append('at least one cell must be selected')
        for cells in (self.spatial_cells, self.channel_cells):
            if len(set(cells)) != len(cells):
                problems.append(f'duplicate cells in {",".join(k.value for k in cells)}')
        if problems:
            raise ConfigError(problems)
        return self

    def spaces(self) -> List[Tuple[str, Tuple[CellKind, ...]]]:
        """Routing spaces in execution order for S_THEN_C"""
        if self.custom_groups is not None:
            return [('group1', self.custom_groups[0]), ('group2', self.custom_groups[1])]
        if self.grouping == Grouping.UNGROUPED:
            return [('joint', self.spatial_cells + self.channel_cells)]
        spaces = [('spatial', self.spatial_cells), ('channel', self.channel_cells)]
        return [(name, cells) for name, cells in spaces if cells]


@dataclass
class LayerTrace:
    """Path weights of every routing space of one layer, in execution order"""

    layer: int
    weights: Dict[str, PathWeights] = field(default_factory=dict)

    def rows(self) -> Dict[str, np.ndarray]:
        return {space: w.values.copy() for space, w in self.weights.items()}


class DynamicEncoderLayer(Module):

    def __init__(self, config: EncoderConfig, rng: RngState, index: int = 0):
        super().__init__()
        self.config = config
        self.index = index
        self.spaces: List[Tuple[str, Tuple[CellKind, ...]]] = config.spaces()
        self.cells: Dict[CellKind, Module] = {}
        self.routers: Dict[str, SpatialChannelJointRouter] = {}
        for space, kinds in self.spaces:
            for kind in kinds:
                cell = build_cell(kind, config.d_model, config.heads, config.grid, rng,
                                  ffn_ratio=config.ffn_ratio, cac_reduction=config.cac_reduction,
                                  bn_momentum=config.bn_momentum, bn_eps=config.bn_eps,
                                  gmc_residual=config.gmc_residual)
                self.cells[kind] = self.add_module(kind.value.lower(), cell)
        for space, kinds in self.spaces:
            router = SpatialChannelJointRouter(config.d_model, config.n_positions, len(kinds), rng,
                                               variant=config.router_variant,
                                               channel_reduction=config.router_channel_reduction,
                                               spatial_reduction=config.router_spatial_reduction)
            self.routers[space] = self.add_module(f'router_{space}', router)

    def route(self, x: Tensor, space: str, cells: Sequence[CellKind], rng: Optional[RngState] = None,
              path_sampler: Optional[RngState] = None, forced: Optional[np.ndarray] = None) -> PathWeights:
        router = self.routers[space]
        variant = self.config.router_variant
        routing = self.config.routing
        if forced is not None:
            forced = np.asarray(forced, dtype=x.dtype)
            if forced.shape != (x.shape[0], len(cells)):
                raise ShapeError(f'forced weights {forced.shape} for batch {x.shape[0]} and {len(cells)} cells')
            return PathWeights(Tensor(forced, dtype=x.dtype), space, tuple(cells))
        if path_sampler is not None:
            logits = router.logits(x)
            return PathWeights(gumbel_hard_route(logits, routing.temperature, path_sampler, 'train'),
                               space, tuple(cells), logits)
        if routing.hard and variant != RouterVariant.STATIC_SUM:
            logits = router.logits(x)
            mode = 'train' if self.training else 'eval'
            return PathWeights(gumbel_hard_route(logits, routing.temperature, rng, mode),
                               space, tuple(cells), logits)
        return router_variant_forward(x, variant, router, paths=len(cells), space=space, cells=cells)

    def block(self, x: Tensor, space: str, cells: Sequence[CellKind], **routing_kwargs) -> Tuple[Tensor, PathWeights]:
        weights = self.route(x, space, cells, **routing_kwargs)
        outputs = [self.cells[kind].forward(x) for kind in cells]
        return route_combine(weights, outputs), weights

    def forward(self, x: Tensor, rng: Optional[RngState] = None, path_sampler: Optional[RngState] = None,
                forced: Optional[Dict[str, np.ndarray]] = None) -> Tuple[Tensor, LayerTrace]:
        expected = (self.config.grid[0], self.config.grid[1], self.config.d_model)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f'encoder layer expects [B, {expected[0]}, {expected[1]}, {expected[2]}], got {x.shape}')
        forced = forced or {}
        trace = LayerTrace(self.index)
        arrangement = self.config.arrangement
        order = self.spaces[::-1] if arrangement == Arrangement.C_THEN_S else self.spaces
        if arrangement == Arrangement.PARALLEL:
            out = x
            for space, cells in order:
                routed, weights = self.block(x, space, cells, rng=rng, path_sampler=path_sampler,
                                             forced=forced.get(space))
                trace.weights[space] = weights
                out = out + routed
            return out, trace
        for space, cells in order:
            routed, weights = self.block(x, space, cells, rng=rng, path_sampler=path_sampler,
                                         forced=forced.get(space))
            trace.weights[space] = weights
            x = x + routed
        return x, trace


class DynamicEncoder(Module):
    """Stack of ``config.layers`` dynamic layers; zero layers is the identity"""

    def __init__(self, config: EncoderConfig, rng: RngState):
        super().__init__()
        self.config = config.validate()
        self.layers: List[DynamicEncoderLayer] = [
            self.add_module(str(i), DynamicEncoderLayer(config, rng, index=i)) for i in range(config.layers)
        ]

    def forward(self, v: Tensor, rng: Optional[RngState] = None, path_sampler: Optional[RngState] = None,
                forced: Optional[Sequence[Dict[str, np.ndarray]]] = None) -> Tuple[Tensor, List[LayerTrace]]:
        traces = []
        for i, layer in enumerate(self.layers):
            v, trace = layer.forward(v, rng=rng, path_sampler=path_sampler,
                                     forced=forced[i] if forced is not None else None)
            traces.append(trace)
        return v, traces


def encoder_layer_forward(x: Tensor, layer: DynamicEncoderLayer, trace: bool = False,
                          **routing_kwargs) -> Tuple[Tensor, Optional[LayerTrace]]:
    out, layer_trace = layer.forward(x, **routing_kwargs)
    return out, layer_trace if trace else None


def encoder_forward(v: Tensor, encoder: DynamicEncoder, trace: bool = False,
                    **routing_kwargs) -> Tuple[Tensor, Optional[List[LayerTrace]]]:
    """V_hat = eta(V); traces are returned only when asked for"""
    out, traces = encoder.forward(v, **routing_kwargs)
    return out, traces if trace else None


def trace_blocks(traces: Sequence[LayerTrace]) -> List[List[np.ndarray]]:
    """Per layer, the weight rows of its routing spaces (input of count_submodels)"""
    return [[w.values for w in t.weights.values()] for t in traces]
