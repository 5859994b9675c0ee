"""Quality and diversity metrics on token-id sequences.

BLEU works on content tokens (EOS, BOS and PAD are stripped).  Precision of
order n is ``matches / total`` over the corpus; an order with zero matches
gets ``EPS / total`` instead, and an order for which no hypothesis has any
n-gram is left out of the geometric mean.  The brevity penalty uses, per
hypothesis, the closest reference length (shorter wins ties).
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .seqmodel import EOS, Policy

EPS = 1e-9


def _content(seq, vocab_size: int | None = None) -> tuple:
    out = []
    for t in seq:
        t = int(t)
        if t == EOS:
            break
        if vocab_size is not None and t >= vocab_size:
            continue
        out.append(t)
    return tuple(out)


def _ngrams(seq: tuple, n: int) -> Counter:
    return Counter(seq[i : i + n] for i in range(len(seq) - n + 1))


def _closest(lengths: Sequence[int], c: int) -> int:
    return min(lengths, key=lambda r: (abs(r - c), r))


def _combine(matches, totals, hyp_len, ref_len, max_n) -> float:
    logs = []
    for n in range(max_n):
        if totals[n] == 0:
            continue
        p = matches[n] / totals[n] if matches[n] > 0 else EPS / totals[n]
        logs.append(math.log(p))
    if not logs or hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(sum(logs) / len(logs))


class _RefPool:
    """Max n-gram counts and lengths of one reference set."""

    def __init__(self, refs, max_n):
        refs = [_content(r) for r in refs]
        if not refs:
            raise ValueError("reference set is empty")
        self.lengths = sorted({len(r) for r in refs})
        self.max_counts = [Counter() for _ in range(max_n)]
        for r in refs:
            for n in range(max_n):
                for g, k in _ngrams(r, n + 1).items():
                    if k > self.max_counts[n][g]:
                        self.max_counts[n][g] = k


def _check_max_n(max_n):
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must lie in [1, 4]")


def bleu(hypotheses: Sequence, references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU; ``references[i]`` is the reference set of ``hypotheses[i]``."""
    _check_max_n(max_n)
    if not hypotheses:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(references):
        raise ValueError("need one reference set per hypothesis")
    pools: dict[int, _RefPool] = {}
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        pool = pools.get(id(refs))
        if pool is None:
            pool = pools[id(refs)] = _RefPool(refs, max_n)
        h = _content(hyp)
        for n in range(max_n):
            counts = _ngrams(h, n + 1)
            totals[n] += sum(counts.values())
            matches[n] += sum(min(k, pool.max_counts[n][g]) for g, k in counts.items())
        hyp_len += len(h)
        ref_len += _closest(pool.lengths, len(h))
    return _combine(matches, totals, hyp_len, ref_len, max_n)


def pool_bleu(hypotheses: Sequence, pool: Sequence, max_n: int = 4) -> float:
    """Corpus BLEU where every hypothesis is scored against the same pool."""
    pool = list(pool)
    return bleu(hypotheses, [pool] * len(hypotheses), max_n)


def self_bleu(samples: Sequence, max_n: int = 4) -> float:
    """Mean sentence BLEU of each sample against all the others.

    Clipping counts against "all others" use the top-two count per n-gram,
    which makes this linear in the number of samples.
    """
    _check_max_n(max_n)
    if len(samples) < 2:
        raise ValueError("self-BLEU needs at least two samples")
    seqs = [_content(s) for s in samples]
    grams = [[_ngrams(s, n + 1) for n in range(max_n)] for s in seqs]
    top = [dict() for _ in range(max_n)]  # gram -> (best, owner, second)
    for i, per_n in enumerate(grams):
        for n, counts in enumerate(per_n):
            for g, k in counts.items():
                best, owner, second = top[n].get(g, (0, -1, 0))
                if k > best:
                    top[n][g] = (k, i, best)
                elif k > second:
                    top[n][g] = (best, owner, k)
    length_counts = Counter(len(s) for s in seqs)
    scores = []
    for i, s in enumerate(seqs):
        matches, totals = [0] * max_n, [0] * max_n
        for n, counts in enumerate(grams[i]):
            for g, k in counts.items():
                best, owner, second = top[n][g]
                other = second if owner == i else best
                totals[n] += k
                matches[n] += min(k, other)
        length_counts[len(s)] -= 1
        lens = [L for L, k in length_counts.items() if k > 0]
        length_counts[len(s)] += 1
        scores.append(_combine(matches, totals, len(s), _closest(lens, len(s)), max_n))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# quality-diversity sweep


@dataclass
class QualityDiversityPoint:
    temperature: float
    neg_bleu: float
    self_bleu: float
    n_samples: int


def quality_diversity_curve(policy: Policy, references: Sequence, temps: Sequence[float], n_samples: int,
                            rng: np.random.Generator, max_n: int = 4, X=()) -> list[QualityDiversityPoint]:
    """Negative BLEU (vs a fixed reference pool) and self-BLEU per temperature."""
    from .sampling import Temperature, sample_batch

    if not temps:
        raise ValueError("need at least one temperature")
    refs = list(references)
    points = []
    for T in temps:
        if not T > 0:
            raise ValueError(f"temperatures must be positive, got {T}")
        samples = sample_batch(policy, [tuple(X)] * n_samples, Temperature(T), rng).sequences
        points.append(QualityDiversityPoint(float(T), -pool_bleu(samples, refs, max_n), self_bleu(samples, max_n),
                                            n_samples))
    return points


def curve_csv(points: Sequence[QualityDiversityPoint], series: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "temperature", "neg_bleu", "self_bleu", "n_samples"])
    for p in points:
        w.writerow([series, repr(p.temperature), repr(p.neg_bleu), repr(p.self_bleu), p.n_samples])
    return buf.getvalue()


def plot_data(series: dict[str, Sequence[QualityDiversityPoint]]) -> list[tuple[float, float, str]]:
    """``(x, y, series)`` triples: x = negative BLEU, y = self-BLEU."""
    return [(p.neg_bleu, p.self_bleu, name) for name, pts in series.items() for p in pts]


# ---------------------------------------------------------------------------
# oracle NLL and length bins


def oracle_nll(policy: Policy, data, n: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Cross-entropy ``E_data[-log pi(Y | X)]``; exact unless ``n`` is given."""
    from .oracle import enumerate_sequences
    from .seqmodel import batch_log_prob

    if n is None:
        index = enumerate_sequences(policy.vocab, policy.max_len)
        total = 0.0
        for X in data.inputs:
            Xs = [X] * len(index)
            p = data.batch_prob(Xs, index.sequences)
            nz = p > 0
            lp = batch_log_prob(policy, [X] * int(nz.sum()), [Y for Y, k in zip(index.sequences, nz) if k])
            total -= float(p[nz] @ lp)
        return total / len(data.inputs)
    rng = rng if rng is not None else np.random.default_rng(0)
    pairs = data.sample(n, rng)
    return float(-np.mean(batch_log_prob(policy, [X for X, _ in pairs], [Y for _, Y in pairs])))


@dataclass
class BinRow:
    lo: float
    hi: float
    count: int
    mean: float | None


def length_binned_report(lengths: Sequence[int], values: Sequence[float], bin_edges: Sequence[float],
                         baseline: Sequence[float] | None = None) -> list[BinRow]:
    """Mean value (or mean ``values - baseline``) per ``[lo, hi)`` length bin.

    The last bin is closed on the right.  Empty bins have ``mean=None``.
    """
    if len(lengths) != len(values) or (baseline is not None and len(baseline) != len(values)):
        raise ValueError("lengths and values must align")
    vals = np.asarray(values, dtype=np.float64)
    if baseline is not None:
        vals = vals - np.asarray(baseline, dtype=np.float64)
    L = np.asarray(lengths)
    edges = list(bin_edges)
    rows = []
    for j, (lo, hi) in enumerate(zip(edges, edges[1:])):
        last = j == len(edges) - 2
        m = (L >= lo) & ((L <= hi) if last else (L < hi))
        rows.append(BinRow(lo, hi, int(m.sum()), float(vals[m].mean()) if m.any() else None))
    return rows


def binned_csv(rows: Sequence[BinRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count", "mean"])
    for r in rows:
        w.writerow([r.lo, r.hi, r.count, "" if r.mean is None else repr(r.mean)])
    return buf.getvalue()
