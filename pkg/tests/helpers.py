"""
Shared test utilities: finite-difference gradient checks and straight-line
reference implementations used as oracles.
"""
import math
from collections import Counter
from typing import Callable, List, Optional, Sequence

import numpy as np

from models.tensor import Tensor
from services.dataset_service import COLORS, HORIZONTAL, MARKER_CHANNEL, VERTICAL, position_word

GRAD_EPS = 1e-5
GRAD_TOL = 1e-4
# every gradient check runs once per seed
GRADIENT_SEEDS = range(5)


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = GRAD_EPS,
              max_checks: Optional[int] = 24, seed: int = 0) -> float:
    """
    Largest relative error |a - n| / max(|a|, |n|, 1e-3) between the backward
    gradient and the central difference of ``loss_fn`` over ``params``.

    ``loss_fn`` must be deterministic and rebuild the graph on each call. At
    most ``max_checks`` coordinates per parameter are checked.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    picker = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        coords = list(np.ndindex(*p.shape))
        if max_checks is not None and len(coords) > max_checks:
            coords = [coords[i] for i in picker.choice(len(coords), max_checks, replace=False)]
        for idx in coords:
            original = p.data[idx]
            p.data[idx] = original + eps
            plus = loss_fn().item()
            p.data[idx] = original - eps
            minus = loss_fn().item()
            p.data[idx] = original
            numeric = (plus - minus) / (2 * eps)
            a = float(grad[idx])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-3))
    return worst


def projection_loss(shape, seed: int = 99):
    """Fixed random weights R so that sum(out * R) is a generic scalar"""
    weights = np.random.default_rng(seed).normal(size=shape)
    return lambda out: (out * Tensor(weights, dtype=out.dtype)).sum()


# reference implementations

def naive_attention(x: np.ndarray, memory: np.ndarray, Wq, Wk, Wv, Wo, heads: int,
                    mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-sample, per-head loops of scaled dot-product attention"""
    batch, n_query, channels = x.shape
    d_head = channels // heads
    out = np.zeros((batch, n_query, channels))
    for b in range(batch):
        concat = []
        for h in range(heads):
            cols = slice(h * d_head, (h + 1) * d_head)
            q = x[b] @ Wq[:, cols]
            k = memory[b] @ Wk[:, cols]
            v = memory[b] @ Wv[:, cols]
            scores = q @ k.T / math.sqrt(d_head)
            if mask is not None:
                scores = scores + mask
            scores = np.exp(scores - scores.max(axis=1, keepdims=True))
            scores /= scores.sum(axis=1, keepdims=True)
            concat.append(scores @ v)
        out[b] = np.concatenate(concat, axis=1) @ Wo
    return out


def naive_conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    batch, height, width, _ = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((batch, height, width, cout))
    for b in range(batch):
        for i in range(height):
            for j in range(width):
                for di in range(kh):
                    for dj in range(kw):
                        r, c = i + di - ph, j + dj - pw
                        if 0 <= r < height and 0 <= c < width:
                            out[b, i, j] += x[b, r, c] @ w[di, dj]
    return out


def naive_batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def naive_ffn(x: np.ndarray, W1, b1, W2, b2) -> np.ndarray:
    return np.maximum(x @ W1 + b1, 0.0) @ W2 + b2


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def vanilla_encoder_layer(x: np.ndarray, attn: Sequence[np.ndarray], ffn: Sequence[np.ndarray],
                          heads: int) -> np.ndarray:
    """MHSA + FFN, each wrapped in a residual, no normalisation; x is [B, N, C]"""
    h = x + naive_attention(x, x, *attn, heads=heads)
    return h + naive_ffn(h, *ffn)


# captions

def rule_decode(grid: np.ndarray) -> str:
    """Recover the caption of a noiseless synthetic grid from its planted structure"""
    height, width, _ = grid.shape
    motif = grid[:, :, :len(COLORS)]
    if motif.max() > 0.5:
        color = int(np.argmax(motif.sum(axis=(0, 1))))
        rows, cols = np.nonzero(motif[:, :, color] > 0.5)
        row, col = int(rows.min()), int(cols.min())
        return (f'a {COLORS[color]} block at the {position_word(row, height, VERTICAL)} '
                f'{position_word(col, width, HORIZONTAL)}')
    color = int(np.argmax(grid[:, :, 4:8].mean(axis=(0, 1))))
    spots = int((grid[:, :, MARKER_CHANNEL] > 0.5).sum())
    parity = 'even' if spots % 2 == 0 else 'odd'
    return f'mostly {COLORS[color]} scene with {parity} spots'


def _grams(tokens: List[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def reference_bleu(candidate: List[str], refs: List[List[str]], n: int) -> float:
    """Sentence BLEU transcribed directly from the published definition"""
    if not candidate:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        cand = _grams(candidate, order)
        clipped = sum(min(count, max(_grams(ref, order)[gram] for ref in refs)) for gram, count in cand.items())
        total = sum(cand.values())
        if clipped == 0 or total == 0:
            return 0.0
        log_sum += math.log(clipped / total) / n
    c = len(candidate)
    r = sorted((abs(len(ref) - c), len(ref)) for ref in refs)[0][1]
    penalty = 1.0 if c >= r else math.exp(1 - r / c)
    return penalty * math.exp(log_sum)


def reference_cider_d(candidate: List[str], refs: List[List[str]], corpus: List[List[List[str]]],
                      sigma: float = 6.0) -> float:
    """CIDEr-D transcribed from the published formula with an explicit document-frequency loop"""
    n_docs = len(corpus)
    total = 0.0
    for order in range(1, 5):
        def df(gram):
            return sum(1 for doc in corpus if any(gram in _grams(ref, order) for ref in doc))

        def vector(tokens):
            return {gram: tf * (math.log(n_docs) - math.log(max(1.0, df(gram))))
                    for gram, tf in _grams(tokens, order).items()}

        g_cand = vector(candidate)
        norm_cand = math.sqrt(sum(v * v for v in g_cand.values()))
        per_ref = 0.0
        for ref in refs:
            g_ref = vector(ref)
            norm_ref = math.sqrt(sum(v * v for v in g_ref.values()))
            dot = sum(min(v, g_ref.get(gram, 0.0)) * g_ref.get(gram, 0.0) for gram, v in g_cand.items())
            cosine = dot / (norm_cand * norm_ref) if norm_cand and norm_ref else dot
            per_ref += math.exp(-((len(candidate) - len(ref)) ** 2) / (2 * sigma ** 2)) * cosine
        total += per_ref / len(refs)
    return 10.0 * total / 4
