"""
Autoregressive caption decoder (post-norm transformer decoder)
"""
import logging

import numpy as np

from errors import ConfigError, ShapeError
from models.cells import multi_head_attention
from models.module import LayerNorm, Module
from models.tensor import RngState, Tensor, relu

logger = logging.getLogger(__name__)

MASKED = -1e9


def causal_mask(length: int) -> np.ndarray:
    """Additive [T, T] mask: position t may attend to positions <= t"""
    return np.triu(np.full((length, length), MASKED), k=1)


class AttentionBlock(Module):
    """Projections for one multi-head attention sublayer"""

    def __init__(self, d_model: int, heads: int, rng: RngState):
        super().__init__()
        self.heads = heads
        self.Wq = self.add_weight('Wq', (d_model, d_model), rng)
        self.Wk = self.add_weight('Wk', (d_model, d_model), rng)
        self.Wv = self.add_weight('Wv', (d_model, d_model), rng)
        self.Wo = self.add_weight('Wo', (d_model, d_model), rng)

    def forward(self, query: Tensor, memory: Tensor, mask: np.ndarray = None) -> Tensor:
        return multi_head_attention(query, memory, self.Wq, self.Wk, self.Wv, self.Wo, self.heads, mask)


class DecoderLayer(Module):
    """masked self-attention -> cross-attention -> FFN, each followed by Add & LayerNorm"""

    def __init__(self, d_model: int, heads: int, rng: RngState, ffn_ratio: int = 4):
        super().__init__()
        hidden = ffn_ratio * d_model
        self.self_attn = self.add_module('self_attn', AttentionBlock(d_model, heads, rng))
        self.cross_attn = self.add_module('cross_attn', AttentionBlock(d_model, heads, rng))
        self.W1 = self.add_weight('W1', (d_model, hidden), rng)
        self.b1 = self.add_zeros('b1', (hidden,))
        self.W2 = self.add_weight('W2', (hidden, d_model), rng)
        self.b2 = self.add_zeros('b2', (d_model,))
        self.norm1 = self.add_module('norm1', LayerNorm(d_model))
        self.norm2 = self.add_module('norm2', LayerNorm(d_model))
        self.norm3 = self.add_module('norm3', LayerNorm(d_model))

    def forward(self, h: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        h = self.norm1.forward(h + self.self_attn.forward(h, h, mask))
        h = self.norm2.forward(h + self.cross_attn.forward(h, memory))
        ffn = relu(h @ self.W1 + self.b1) @ self.W2 + self.b2
        return self.norm3.forward(h + ffn)


class CaptionDecoder(Module):
    """
    Token embedding plus learned positions, ``layers`` decoder layers and a
    final projection to vocabulary logits. The encoder memory gets its own
    learned positional embedding over the flattened grid.
    """

    def __init__(self, vocab_size: int, d_model: int, heads: int, layers: int, max_len: int,
                 n_memory: int, rng: RngState, ffn_ratio: int = 4):
        super().__init__()
        if heads < 1 or d_model % heads:
            raise ConfigError(f'd_model {d_model} is not divisible by {heads} heads')
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_len = max_len
        self.n_memory = n_memory
        self.embedding = self.add_parameter('embedding', rng.normal((vocab_size, d_model), 1.0 / np.sqrt(d_model)))
        self.token_pos = self.add_parameter('token_pos', rng.normal((max_len + 1, d_model), 0.02))
        self.memory_pos = self.add_parameter('memory_pos', rng.normal((n_memory, d_model), 0.02))
        self.layers = [self.add_module(str(i), DecoderLayer(d_model, heads, rng, ffn_ratio)) for i in range(layers)]
        self.W_out = self.add_weight('W_out', (d_model, vocab_size), rng)
        self.b_out = self.add_zeros('b_out', (vocab_size,))

    def embed(self, tokens: np.ndarray) -> Tensor:
        length = tokens.shape[1]
        return self.embedding[tokens] + self.token_pos[:length]

    def forward(self, memory: Tensor, tokens: np.ndarray) -> Tensor:
        """
        Args:
            memory: encoder output [B, N, d_model]
            tokens: decoder input ids [B, T], starting with BOS

        Returns:
            logits [B, T, vocab_size]
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ShapeError(f'decoder input must be [B, T] with T >= 1, got {tokens.shape}')
        if tokens.shape[1] > self.max_len + 1:
            raise ShapeError(f'decoder input length {tokens.shape[1]} exceeds {self.max_len + 1} positions')
        if memory.ndim != 3 or memory.shape[1:] != (self.n_memory, self.d_model):
            raise ShapeError(f'decoder memory must be [B, {self.n_memory}, {self.d_model}], got {memory.shape}')
        if memory.shape[0] != tokens.shape[0]:
            raise ShapeError(f'memory batch {memory.shape} does not match tokens {tokens.shape}')
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ShapeError(f'token ids outside vocabulary of {self.vocab_size}')
        memory = memory + self.memory_pos
        mask = causal_mask(tokens.shape[1])
        h = self.embed(tokens)
        for layer in self.layers:
            h = layer.forward(h, memory, mask)
        return h @ self.W_out + self.b_out


def decoder_forward(v_hat: Tensor, y_in: np.ndarray, decoder: CaptionDecoder) -> Tensor:
    """v_hat may be the encoder grid [B, H, W, d] or its flattened form [B, N, d]"""
    if v_hat.ndim == 4:
        batch, height, width, channels = v_hat.shape
        v_hat = v_hat.reshape(batch, height * width, channels)
    return decoder.forward(v_hat, y_in)
