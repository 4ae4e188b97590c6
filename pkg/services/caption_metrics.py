"""
BLEU and CIDEr-D caption metrics.

Captions are scored as lower-cased whitespace tokens. Both metrics are used
for the evaluation report; their per-sentence sum is the self-critical
training reward.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass
from types import MappingProxyType
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from models.captioner import tokenize

logger = logging.getLogger(__name__)

Caption = Union[str, Sequence[str]]
NGram = Tuple[str, ...]

CIDER_SIGMA = 6.0


def _tokens(caption: Caption) -> List[str]:
    return tokenize(caption) if isinstance(caption, str) else [str(t) for t in caption]


def count_ngrams(tokens: Sequence[str], n: int = 4) -> Counter:
    """Counts of every k-gram, k = 1..n"""
    counts = Counter()
    for k in range(1, n + 1):
        for i in range(len(tokens) - k + 1):
            counts[tuple(tokens[i:i + k])] += 1
    return counts


@dataclass(frozen=True)
class NGramStats:
    """Document frequency of every reference n-gram; one document per sample"""

    document_frequency: Mapping[NGram, int]
    corpus_size: int
    n: int = 4

    @classmethod
    def from_references(cls, refs_per_sample: Sequence[Sequence[Caption]], n: int = 4) -> 'NGramStats':
        df = Counter()
        for refs in refs_per_sample:
            seen = set()
            for ref in refs:
                seen.update(count_ngrams(_tokens(ref), n))
            df.update(seen)
        return cls(MappingProxyType(dict(df)), len(refs_per_sample), n)

    @property
    def log_corpus_size(self) -> float:
        return math.log(float(self.corpus_size))


# BLEU

def _bleu_counts(candidate: List[str], refs: List[List[str]], n: int):
    """Clipped matches and totals per order, candidate length, closest reference length"""
    cand_counts = count_ngrams(candidate, n)
    max_ref = Counter()
    for ref in refs:
        for gram, count in count_ngrams(ref, n).items():
            max_ref[gram] = max(max_ref[gram], count)
    matches = np.zeros(n)
    totals = np.zeros(n)
    for gram, count in cand_counts.items():
        order = len(gram) - 1
        matches[order] += min(count, max_ref[gram])
        totals[order] += count
    c = len(candidate)
    r = min((len(ref) for ref in refs), key=lambda length: (abs(length - c), length))
    return matches, totals, c, r


def _combine(matches: np.ndarray, totals: np.ndarray, c: int, r: int) -> float:
    if c == 0 or np.any(totals == 0) or np.any(matches == 0):
        return 0.0
    log_precision = float(np.mean(np.log(matches / totals)))
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_precision)


def bleu(candidate: Caption, refs: Sequence[Caption], n: int = 4) -> float:
    """
    Sentence BLEU-n.

    Geometric mean of clipped n-gram precisions of orders 1..n times the
    brevity penalty exp(1 - r/c) when c < r, r the closest reference length.
    An empty candidate, or one with no match at some order, scores 0.
    """
    if not 1 <= n <= 4:
        raise ValueError(f'BLEU order must be in 1..4, got {n}')
    if not refs:
        raise ValueError('BLEU needs at least one reference')
    candidate = _tokens(candidate)
    if not candidate:
        return 0.0
    matches, totals, c, r = _bleu_counts(candidate, [_tokens(ref) for ref in refs], n)
    return _combine(matches, totals, c, r)


def corpus_bleu(candidates: Sequence[Caption], refs_per_sample: Sequence[Sequence[Caption]], n: int = 4) -> float:
    """Corpus BLEU-n: clipped counts and lengths pooled before combining"""
    if len(candidates) != len(refs_per_sample):
        raise ValueError(f'{len(candidates)} candidates for {len(refs_per_sample)} reference sets')
    matches, totals = np.zeros(n), np.zeros(n)
    cand_len = ref_len = 0
    for candidate, refs in zip(candidates, refs_per_sample):
        tokens = _tokens(candidate)
        m, t, c, r = _bleu_counts(tokens, [_tokens(ref) for ref in refs], n)
        matches += m
        totals += t
        cand_len += c
        ref_len += r
    return _combine(matches, totals, cand_len, ref_len)


# CIDEr-D

def _tfidf(counts: Counter, stats: NGramStats):
    vec = [dict() for _ in range(stats.n)]
    norm = np.zeros(stats.n)
    for gram, tf in counts.items():
        order = len(gram) - 1
        weight = float(tf) * (stats.log_corpus_size - math.log(max(1.0, stats.document_frequency.get(gram, 0))))
        vec[order][gram] = weight
        norm[order] += weight * weight
    return vec, np.sqrt(norm)


def _cider_d_sentence(candidate: List[str], refs: List[List[str]], stats: NGramStats, sigma: float) -> float:
    vec_hyp, norm_hyp = _tfidf(count_ngrams(candidate, stats.n), stats)
    score = np.zeros(stats.n)
    for ref in refs:
        vec_ref, norm_ref = _tfidf(count_ngrams(ref, stats.n), stats)
        delta = float(len(candidate) - len(ref))
        val = np.zeros(stats.n)
        for order in range(stats.n):
            for gram, weight in vec_hyp[order].items():
                ref_weight = vec_ref[order].get(gram, 0.0)
                val[order] += min(weight, ref_weight) * ref_weight
            if norm_hyp[order] != 0 and norm_ref[order] != 0:
                val[order] /= norm_hyp[order] * norm_ref[order]
            val[order] *= math.exp(-(delta ** 2) / (2 * sigma ** 2))
        score += val
    return 10.0 * float(np.mean(score)) / len(refs)


def cider_d(candidates: Sequence[Caption], refs_per_sample: Sequence[Sequence[Caption]], stats: NGramStats,
            sigma: float = CIDER_SIGMA) -> Tuple[float, np.ndarray]:
    """
    CIDEr-D of each candidate against its references.

    TF-IDF n-gram vectors (idf from ``stats``), clipped cosine similarity per
    order, Gaussian length penalty, mean over orders, mean over references,
    times 10. A single-document corpus gives every n-gram idf 0 and therefore
    a score of 0.

    Returns:
        (mean score, per-sample scores)
    """
    if stats.corpus_size == 0 or not stats.document_frequency:
        raise ValueError('CIDEr-D needs n-gram statistics from a non-empty reference corpus')
    if len(candidates) != len(refs_per_sample):
        raise ValueError(f'{len(candidates)} candidates for {len(refs_per_sample)} reference sets')
    scores = np.zeros(len(candidates))
    for i, (candidate, refs) in enumerate(zip(candidates, refs_per_sample)):
        if not refs:
            raise ValueError(f'sample {i} has no references')
        scores[i] = _cider_d_sentence(_tokens(candidate), [_tokens(ref) for ref in refs], stats, sigma)
    mean = float(scores.mean()) if len(scores) else 0.0
    return mean, scores


def exact_match_accuracy(candidates: Sequence[Caption], refs_per_sample: Sequence[Sequence[Caption]]) -> float:
    if not candidates:
        return 0.0
    hits = sum(any(_tokens(c) == _tokens(r) for r in refs) for c, refs in zip(candidates, refs_per_sample))
    return hits / len(candidates)


class CaptionScorer:
    """Scores generated captions against a fixed reference corpus"""

    def __init__(self, refs_per_sample: Sequence[Sequence[Caption]], n: int = 4, sigma: float = CIDER_SIGMA):
        self.refs = [[_tokens(ref) for ref in refs] for refs in refs_per_sample]
        self.stats = NGramStats.from_references(self.refs, n)
        self.sigma = sigma

    def reward(self, candidates: Sequence[Caption], rows: Sequence[int]) -> np.ndarray:
        """CIDEr-D + sentence BLEU-4 for each candidate against the references of its row"""
        refs = [self.refs[row] for row in rows]
        _, cider = cider_d(candidates, refs, self.stats, self.sigma)
        bleu4 = np.array([bleu(c, r, 4) for c, r in zip(candidates, refs)])
        return cider + bleu4

    def report(self, candidates: Sequence[Caption]) -> Dict[str, float]:
        """Corpus BLEU-1/BLEU-4, mean CIDEr-D and exact-match accuracy"""
        cider_mean, _ = cider_d(candidates, self.refs, self.stats, self.sigma)
        return {
            'BLEU-1': corpus_bleu(candidates, self.refs, 1),
            'BLEU-4': corpus_bleu(candidates, self.refs, 4),
            'CIDEr-D': cider_mean,
            'exact_match': exact_match_accuracy(candidates, self.refs),
        }
