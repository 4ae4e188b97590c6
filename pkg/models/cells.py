"""
Spatial and channel modeling cells.

Every cell maps a feature grid [B, H, W, C] to a grid of the same shape.
GMC and LMC/AMC live in the spatial routing space, CPC and CAC in the
channel routing space.
"""
import logging
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from errors import ConfigError, ShapeError
from models.module import BatchNorm, Module
from models.tensor import RngState, Tensor, concat, conv2d, global_pool, relu, sigmoid, softmax

logger = logging.getLogger(__name__)


class CellKind(str, Enum):
    GMC = 'GMC'
    LMC = 'LMC'
    AMC = 'AMC'
    CPC = 'CPC'
    CAC = 'CAC'

    @property
    def space(self) -> str:
        return 'spatial' if self in SPATIAL_CELLS else 'channel'

    @classmethod
    def parse(cls, text: str) -> 'CellKind':
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ConfigError(f'unknown cell kind {text!r}; expected one of {", ".join(k.value for k in cls)}')


SPATIAL_CELLS = (CellKind.GMC, CellKind.LMC, CellKind.AMC)
CHANNEL_CELLS = (CellKind.CPC, CellKind.CAC)
ALL_CELLS = SPATIAL_CELLS + CHANNEL_CELLS


def multi_head_attention(query: Tensor, memory: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor,
                         heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Scaled dot-product attention with ``heads`` heads, concatenated and
    projected by ``Wo``. Head i uses the column block i of Wq/Wk/Wv.

    Args:
        query: [B, Nq, C]
        memory: [B, Nk, C]
        mask: optional additive mask broadcastable to [B, heads, Nq, Nk]

    Returns:
        [B, Nq, C] (no residual)
    """
    batch, n_query, channels = query.shape
    n_key = memory.shape[1]
    d_head = channels // heads
    q = (query @ Wq).reshape(batch, n_query, heads, d_head).transpose(0, 2, 1, 3)
    k = (memory @ Wk).reshape(batch, n_key, heads, d_head).transpose(0, 2, 3, 1)
    v = (memory @ Wv).reshape(batch, n_key, heads, d_head).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / np.sqrt(d_head))
    if mask is not None:
        scores = scores + mask.astype(scores.dtype)
    weights = softmax(scores, axis=-1)
    heads_out = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, n_query, channels)
    return heads_out @ Wo


class GlobalModelingCell(Module):
    """Multi-head self-attention over the flattened grid, with its own +X residual unless residual=False"""

    kind = CellKind.GMC

    def __init__(self, channels: int, heads: int, rng: RngState, residual: bool = True):
        super().__init__()
        if heads < 1 or channels % heads:
            raise ConfigError(f'd_model {channels} is not divisible by {heads} heads')
        self.heads = heads
        self.residual = residual
        self.Wq = self.add_weight('Wq', (channels, channels), rng)
        self.Wk = self.add_weight('Wk', (channels, channels), rng)
        self.Wv = self.add_weight('Wv', (channels, channels), rng)
        self.Wo = self.add_weight('Wo', (channels, channels), rng)

    def forward_tokens(self, x: Tensor) -> Tensor:
        """[B, N, C] -> [B, N, C]"""
        attended = multi_head_attention(x, x, self.Wq, self.Wk, self.Wv, self.Wo, self.heads)
        return attended + x if self.residual else attended

    def forward(self, x: Tensor) -> Tensor:
        batch, height, width, channels = x.shape
        tokens = x.reshape(batch, height * width, channels)
        return self.forward_tokens(tokens).reshape(batch, height, width, channels)


class MultiBranchConv(Module):
    """BN(X) + BN(conv1x1(X)) + BN(conv3x3(conv1x1(X))), three separate BNs"""

    def __init__(self, channels: int, rng: RngState, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.F1 = self.add_weight('F1', (1, 1, channels, channels), rng, fan_in=channels)
        self.F3_reduce = self.add_weight('F3_reduce', (1, 1, channels, channels), rng, fan_in=channels)
        self.F3 = self.add_weight('F3', (3, 3, channels, channels), rng, fan_in=9 * channels)
        self.bn_identity = self.add_module('bn_identity', BatchNorm(channels, momentum, eps))
        self.bn_1x1 = self.add_module('bn_1x1', BatchNorm(channels, momentum, eps))
        self.bn_3x3 = self.add_module('bn_3x3', BatchNorm(channels, momentum, eps))

    def forward(self, x: Tensor) -> Tensor:
        branch_3x3 = conv2d(conv2d(x, self.F3_reduce), self.F3)
        return (self.bn_identity.forward(x)
                + self.bn_1x1.forward(conv2d(x, self.F1))
                + self.bn_3x3.forward(branch_3x3))


class LocalModelingCell(Module):
    """Two multi-branch convolutions joined by ReLU; the sigmoid of the result gates the input"""

    kind = CellKind.LMC

    def __init__(self, channels: int, rng: RngState, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.stage0 = self.add_module('stage0', MultiBranchConv(channels, rng, momentum, eps))
        self.stage1 = self.add_module('stage1', MultiBranchConv(channels, rng, momentum, eps))

    def gate(self, x: Tensor) -> Tensor:
        hidden = relu(self.stage0.forward(x))
        return sigmoid(self.stage1.forward(hidden))

    def forward(self, x: Tensor) -> Tensor:
        return self.gate(x) * x


class AxialModelingCell(Module):
    """
    Axial gate: FC_H mixes height positions, FC_W mixes width positions,
    [X; X_H; X_W] is reduced by W_rec and squashed into a sigmoid gate.
    """

    kind = CellKind.AMC

    def __init__(self, channels: int, grid: Tuple[int, int], rng: RngState):
        super().__init__()
        self.grid = tuple(grid)
        height, width = self.grid
        self.FC_H = self.add_weight('FC_H', (height, height), rng)
        self.FC_W = self.add_weight('FC_W', (width, width), rng)
        self.W_rec = self.add_weight('W_rec', (3 * channels, channels), rng)

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:3]) != self.grid:
            raise ShapeError(f'AMC built for grid {self.grid}, got input {x.shape}')
        # [B, W, C, H] @ FC_H mixes rows; [B, H, C, W] @ FC_W mixes columns
        x_h = (x.transpose(0, 2, 3, 1) @ self.FC_H).transpose(0, 3, 1, 2)
        x_w = (x.transpose(0, 1, 3, 2) @ self.FC_W).transpose(0, 1, 3, 2)
        x_con = concat([x, x_h, x_w], axis=-1)
        return sigmoid(x_con @ self.W_rec) * x


class ChannelProjectionCell(Module):
    """Position-wise FFN with expansion ratio ``ratio``"""

    kind = CellKind.CPC

    def __init__(self, channels: int, rng: RngState, ratio: int = 4):
        super().__init__()
        hidden = ratio * channels
        self.W1 = self.add_weight('W1', (channels, hidden), rng)
        self.b1 = self.add_zeros('b1', (hidden,))
        self.W2 = self.add_weight('W2', (hidden, channels), rng)
        self.b2 = self.add_zeros('b2', (channels,))

    def forward(self, x: Tensor) -> Tensor:
        return relu(x @ self.W1 + self.b1) @ self.W2 + self.b2


class ChannelAttentionCell(Module):
    """Squeeze-and-excitation gate, spatially constant per (batch, channel)"""

    kind = CellKind.CAC

    def __init__(self, channels: int, rng: RngState, reduction: int = 16):
        super().__init__()
        # C // reduction, clamped to at least one unit
        hidden = max(channels // reduction, 1)
        self.W1 = self.add_weight('W1', (channels, hidden), rng)
        self.W2 = self.add_weight('W2', (hidden, channels), rng)

    def gate(self, x: Tensor) -> Tensor:
        squeezed = global_pool(x, 'spatial')
        return sigmoid(relu(squeezed @ self.W1) @ self.W2)

    def forward(self, x: Tensor) -> Tensor:
        batch, _, _, channels = x.shape
        return self.gate(x).reshape(batch, 1, 1, channels) * x


def gmc_forward(x: Tensor, cell: GlobalModelingCell) -> Tensor:
    return cell.forward_tokens(x)


def lmc_forward(x: Tensor, cell: LocalModelingCell) -> Tensor:
    return cell.forward(x)


def amc_forward(x: Tensor, cell: AxialModelingCell) -> Tensor:
    return cell.forward(x)


def cpc_forward(x: Tensor, cell: ChannelProjectionCell) -> Tensor:
    return cell.forward(x)


def cac_forward(x: Tensor, cell: ChannelAttentionCell) -> Tensor:
    return cell.forward(x)


def build_cell(kind: CellKind, channels: int, heads: int, grid: Tuple[int, int], rng: RngState,
               ffn_ratio: int = 4, cac_reduction: int = 16,
               bn_momentum: float = 0.1, bn_eps: float = 1e-5, gmc_residual: bool = True) -> Module:
    if kind == CellKind.GMC:
        return GlobalModelingCell(channels, heads, rng, gmc_residual)
    if kind == CellKind.LMC:
        return LocalModelingCell(channels, rng, bn_momentum, bn_eps)
    if kind == CellKind.AMC:
        return AxialModelingCell(channels, grid, rng)
    if kind == CellKind.CPC:
        return ChannelProjectionCell(channels, rng, ffn_ratio)
    if kind == CellKind.CAC:
        return ChannelAttentionCell(channels, rng, cac_reduction)
    raise ConfigError(f'unknown cell kind {kind}')
