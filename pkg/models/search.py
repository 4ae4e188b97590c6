"""
Greedy, sampling and beam-search decoding.

The searches only see a step function ``step_fn(rows, prefixes)`` that
returns next-token log-probabilities [M, V] for M prefixes; ``rows`` tells it
which batch sample each prefix belongs to. Scores are sums of log-softmax
values, without length normalisation.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError
from models.tensor import RngState

logger = logging.getLogger(__name__)

StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

DECODE_MODES = ('greedy', 'sample', 'beam')


@dataclass(frozen=True)
class Hypothesis:
    """Generated ids after BOS; ends with EOS when ``finished``"""

    tokens: Tuple[int, ...]
    log_prob: float
    finished: bool

    def caption_ids(self, eos: Optional[int]) -> Tuple[int, ...]:
        if self.finished and eos is not None and self.tokens and self.tokens[-1] == eos:
            return self.tokens[:-1]
        return self.tokens


@dataclass
class DecodeResult:
    """Hypotheses per batch sample, best first for greedy and beam"""

    hypotheses: List[List[Hypothesis]] = field(default_factory=list)

    def best(self) -> List[Hypothesis]:
        return [hyps[0] for hyps in self.hypotheses]

    def flat(self) -> Tuple[np.ndarray, List[Hypothesis]]:
        """Sample index per hypothesis and the hypotheses, sample-major"""
        rows, hyps = [], []
        for row, sample_hyps in enumerate(self.hypotheses):
            rows.extend([row] * len(sample_hyps))
            hyps.extend(sample_hyps)
        return np.array(rows, dtype=np.int64), hyps


def _ban(log_probs: np.ndarray, banned: Sequence[int]) -> np.ndarray:
    if not banned:
        return log_probs
    masked = log_probs.copy()
    masked[:, list(banned)] = -np.inf
    return masked


def _rollout(step_fn: StepFn, rows: np.ndarray, max_len: int, bos: int, eos: Optional[int],
             banned: Sequence[int], choose) -> List[Hypothesis]:
    count = len(rows)
    prefixes = np.full((count, 1), bos, dtype=np.int64)
    scores = np.zeros(count)
    done = np.zeros(count, dtype=bool)
    filler = eos if eos is not None else bos
    for _ in range(max_len):
        step = np.asarray(step_fn(rows, prefixes), dtype=np.float64)
        ids = choose(_ban(step, banned))
        ids = np.where(done, filler, ids)
        scores += np.where(done, 0.0, step[np.arange(count), ids])
        prefixes = np.concatenate([prefixes, ids[:, None]], axis=1)
        if eos is not None:
            done |= ids == eos
        if done.all():
            break
    hypotheses = []
    for prefix, score in zip(prefixes[:, 1:], scores):
        tokens = [int(t) for t in prefix]
        finished = False
        if eos is not None and eos in tokens:
            tokens = tokens[:tokens.index(eos) + 1]
            finished = True
        hypotheses.append(Hypothesis(tuple(tokens), float(score), finished))
    return hypotheses


def greedy_decode(step_fn: StepFn, batch: int, max_len: int, bos: int, eos: Optional[int] = None,
                  banned: Sequence[int] = ()) -> DecodeResult:
    """argmax at every step; ties go to the lower token id"""
    hyps = _rollout(step_fn, np.arange(batch), max_len, bos, eos, banned,
                    lambda lp: np.argmax(lp, axis=-1))
    return DecodeResult([[h] for h in hyps])


def sample_decode(step_fn: StepFn, batch: int, max_len: int, bos: int, rng: RngState,
                  eos: Optional[int] = None, banned: Sequence[int] = (), k: int = 1) -> DecodeResult:
    """k independent categorical rollouts per sample, in draw order"""
    if k < 1:
        raise ConfigError(f'number of samples must be >= 1, got {k}')

    def choose(log_probs):
        probs = np.exp(log_probs - log_probs.max(axis=-1, keepdims=True))
        cdf = np.cumsum(probs, axis=-1)
        u = rng.uniform((len(log_probs), 1)) * cdf[:, -1:]
        ids = (cdf <= u).sum(axis=-1)
        return np.minimum(ids, log_probs.shape[-1] - 1)

    rows = np.repeat(np.arange(batch), k)
    hyps = _rollout(step_fn, rows, max_len, bos, eos, banned, choose)
    return DecodeResult([hyps[i * k:(i + 1) * k] for i in range(batch)])


def _sort_key(hyp: Hypothesis):
    return -hyp.log_prob, hyp.tokens


def _beam_one(step_fn: StepFn, row: int, max_len: int, k: int, bos: int, eos: Optional[int],
              banned: Sequence[int]) -> List[Hypothesis]:
    alive: List[Hypothesis] = [Hypothesis((), 0.0, False)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        width = k - len(finished)
        if width <= 0 or not alive:
            break
        prefixes = np.array([(bos,) + h.tokens for h in alive], dtype=np.int64)
        step = _ban(np.asarray(step_fn(np.full(len(alive), row), prefixes), dtype=np.float64), banned)
        candidates = []
        for hyp, log_probs in zip(alive, step):
            for token in np.flatnonzero(np.isfinite(log_probs)):
                candidates.append(Hypothesis(hyp.tokens + (int(token),), hyp.log_prob + float(log_probs[token]), False))
        candidates.sort(key=_sort_key)
        alive = []
        for cand in candidates[:width]:
            if eos is not None and cand.tokens[-1] == eos:
                finished.append(Hypothesis(cand.tokens, cand.log_prob, True))
            else:
                alive.append(cand)
    pool = sorted(finished + alive, key=_sort_key)
    return pool[:k]


def beam_search(step_fn: StepFn, batch: int, max_len: int, k: int, bos: int, eos: Optional[int] = None,
                banned: Sequence[int] = ()) -> DecodeResult:
    """
    Beam search per sample.

    Each step expands every alive hypothesis by every allowed token, sorts the
    candidates by (score desc, token ids asc) and keeps the top ones; a
    hypothesis ending in EOS retires and the beam shrinks by one.
    """
    if k < 1:
        raise ConfigError(f'beam size must be >= 1, got {k}')
    return DecodeResult([_beam_one(step_fn, row, max_len, k, bos, eos, banned) for row in range(batch)])


def decode(step_fn: StepFn, batch: int, mode: str, max_len: int, bos: int, eos: Optional[int] = None,
           banned: Sequence[int] = (), k: int = 1, rng: Optional[RngState] = None) -> DecodeResult:
    if max_len < 1:
        raise ConfigError(f'max_len must be >= 1, got {max_len}')
    if k < 1:
        raise ConfigError(f'k must be >= 1, got {k}')
    if mode == 'greedy':
        return greedy_decode(step_fn, batch, max_len, bos, eos, banned)
    if mode == 'sample':
        if rng is None:
            raise ConfigError('sample decoding needs an RngState')
        return sample_decode(step_fn, batch, max_len, bos, rng, eos, banned, k)
    if mode == 'beam':
        return beam_search(step_fn, batch, max_len, k, bos, eos, banned)
    raise ConfigError(f'unknown decode mode {mode!r}; expected one of {", ".join(DECODE_MODES)}')
