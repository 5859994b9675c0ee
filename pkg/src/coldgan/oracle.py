"""Exact ground truth on enumerable instances.

Synthetic "human" data distributions with closed-form sequence
probabilities, exhaustive sequence enumeration, exact expected reward and
exact policy gradient, and Monte Carlo estimator reports checked against
them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .seqmodel import (
    EOS,
    Policy,
    Vocab,
    check_input,
    check_sequence,
    free_step_mask,
    pad_batch,
    step_log_probs,
    unpad,
    weighted_grad,
)

DEFAULT_BUDGET = 10**6


class BudgetExceededError(RuntimeError):
    def __init__(self, required: int, budget: int):
        super().__init__(f"enumeration needs {required} sequences, budget is {budget}")
        self.required = required
        self.budget = budget


def count_sequences(vocab: Vocab, max_len: int) -> int:
    return sum(vocab.n_content**k for k in range(max_len))


@dataclass
class EnumerationIndex:
    """Every EOS-terminated sequence up to ``max_len``, shortest first."""

    vocab: Vocab
    max_len: int
    sequences: list[tuple]
    tokens: np.ndarray = field(repr=False)
    lengths: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)


def enumerate_sequences(vocab: Vocab, max_len: int, budget: int = DEFAULT_BUDGET) -> EnumerationIndex:
    required = count_sequences(vocab, max_len)
    if required > budget:
        raise BudgetExceededError(required, budget)
    seqs: list[tuple] = []
    layer: list[tuple] = [()]
    for _ in range(max_len):
        seqs.extend(p + (EOS,) for p in layer)
        layer = [p + (c,) for p in layer for c in vocab.content]
    tokens, lengths = pad_batch(seqs, vocab, max_len)
    return EnumerationIndex(vocab, max_len, seqs, tokens, lengths)


# ---------------------------------------------------------------------------
# data distributions


class DataDistribution:
    """Synthetic "human" text source with exact sequence probabilities.

    ``inputs`` are the conditioning inputs, drawn uniformly; ``((),)`` means
    unconditional generation.
    """

    kind: str
    vocab: Vocab
    max_len: int
    inputs: tuple

    def exact_prob(self, X, Y) -> float:
        return float(self.batch_prob([tuple(X)], [Y])[0])

    def batch_prob(self, Xs, Ys) -> np.ndarray:
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> list[tuple[tuple, tuple]]:
        """``n`` i.i.d. ``(X, Y)`` pairs."""
        raise NotImplementedError

    def sample_given(self, Xs, rng) -> list[tuple]:
        raise NotImplementedError

    def entropy(self, budget: int = DEFAULT_BUDGET) -> float:
        """Conditional entropy ``H(Y | X)`` in nats, by enumeration."""
        index = enumerate_sequences(self.vocab, self.max_len, budget)
        total = 0.0
        for X in self.inputs:
            p = self.batch_prob([X] * len(index), index.sequences)
            nz = p > 0
            total -= float(np.sum(p[nz] * np.log(p[nz])))
        return total / len(self.inputs)

    def _draw_inputs(self, n, rng):
        idx = rng.integers(len(self.inputs), size=n)
        return [self.inputs[i] for i in idx]


class MarkovData(DataDistribution):
    """Order-``k`` Markov chain over ``Vocab.size`` next-token outcomes.

    The context of step ``t`` is the last ``order`` tokens of
    ``BOS^order + Y[:t]``; every conditioning input owns its own table.
    EOS is forced once ``max_len - 1`` content tokens have been emitted.
    """

    kind = "markov-chain"

    def __init__(self, vocab: Vocab, max_len: int, tables, order: int = 2, inputs=((),)):
        self.vocab = vocab
        self.max_len = max_len
        self.order = order
        self.inputs = tuple(check_input(X, vocab) for X in inputs)
        self._input_index = {X: i for i, X in enumerate(self.inputs)}
        tables = np.asarray(tables, dtype=np.float64)
        expect = (len(self.inputs), vocab.input_size**order, vocab.size)
        if tables.shape != expect:
            raise ValueError(f"transition tables must have shape {expect}, got {tables.shape}")
        if np.any(tables < 0) or np.max(np.abs(tables.sum(axis=-1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be probability vectors")
        self.tables = tables

    @classmethod
    def random(cls, vocab: Vocab, max_len: int, order: int = 2, inputs=((),), concentration: float = 0.3,
               eos_weight: float = 0.5, seed: int = 0) -> "MarkovData":
        """Peaked random chain: Dirichlet rows, EOS mass scaled by ``eos_weight``."""
        rng = np.random.default_rng(seed)
        shape = (len(inputs), vocab.input_size**order, vocab.size)
        tables = rng.dirichlet(np.full(vocab.size, concentration), size=shape[:2])
        tables[..., EOS] *= eos_weight
        tables /= tables.sum(axis=-1, keepdims=True)
        return cls(vocab, max_len, tables, order, inputs)

    def _ctx(self, hist: np.ndarray) -> np.ndarray:
        base = self.vocab.input_size
        idx = np.zeros(hist.shape[0], dtype=np.int64)
        for j in range(self.order):
            idx = idx * base + hist[:, j]
        return idx

    def step_table(self, Xs, tokens, lengths) -> np.ndarray:
        """Next-token distributions along each sequence, ``(n, max_len, V)``."""
        n = tokens.shape[0]
        inp = np.array([self._input_index[tuple(X)] for X in Xs], dtype=np.int64)
        hist = np.full((n, self.order), self.vocab.bos, dtype=np.int64)
        out = np.zeros((n, self.max_len, self.vocab.size))
        for t in range(self.max_len):
            out[:, t] = self.tables[inp, self._ctx(hist)]
            if self.order:
                tok = np.where(t < lengths, tokens[:, t], self.vocab.pad)
                tok = np.where(tok == self.vocab.pad, 1, tok)
                hist = np.concatenate([hist[:, 1:], tok[:, None]], axis=1)
        return out

    def batch_prob(self, Xs, Ys):
        Ys = [check_sequence(Y, self.vocab, self.max_len) for Y in Ys]
        tokens, lengths = pad_batch(Ys, self.vocab, self.max_len)
        return np.exp(self._log_prob(list(Xs), tokens, lengths))

    def _log_prob(self, Xs, tokens, lengths):
        probs = self.step_table(Xs, tokens, lengths)
        mask = free_step_mask(lengths, self.max_len)
        safe = np.where(mask, tokens, 0)
        picked = np.take_along_axis(probs, safe[..., None], axis=-1)[..., 0]
        with np.errstate(divide="ignore"):
            return np.where(mask, np.log(picked), 0.0).sum(axis=1)

    def sample_given(self, Xs, rng):
        Xs = [tuple(X) for X in Xs]
        n = len(Xs)
        inp = np.array([self._input_index[X] for X in Xs], dtype=np.int64)
        tokens = np.full((n, self.max_len), self.vocab.pad, dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int64)
        hist = np.full((n, self.order), self.vocab.bos, dtype=np.int64)
        alive = np.ones(n, dtype=bool)
        for t in range(self.max_len):
            if t == self.max_len - 1:
                tokens[alive, t] = EOS
                lengths[alive] = self.max_len
                break
            probs = self.tables[inp, self._ctx(hist)]
            cdf = np.cumsum(probs, axis=1)
            tok = np.minimum((cdf < rng.random(n)[:, None] * cdf[:, -1:]).sum(axis=1), self.vocab.size - 1)
            tok = np.where(alive, tok, self.vocab.pad)
            tokens[:, t] = tok
            ended = alive & (tok == EOS)
            lengths[ended] = t + 1
            alive &= ~ended
            if self.order:
                hist = np.concatenate([hist[:, 1:], np.where(alive, tok, 1)[:, None]], axis=1)
        return unpad(tokens, lengths)

    def sample(self, n, rng):
        Xs = self._draw_inputs(n, rng)
        return list(zip(Xs, self.sample_given(Xs, rng)))


class ExplicitData(DataDistribution):
    """Finite weighted list of sequences per input (a tiny stochastic grammar)."""

    kind = "explicit"

    def __init__(self, vocab: Vocab, max_len: int, table: dict):
        self.vocab = vocab
        self.max_len = max_len
        self.inputs = tuple(sorted(check_input(X, vocab) for X in table))
        self._table = {}
        for X in self.inputs:
            seqs = {check_sequence(Y, vocab, max_len): float(w) for Y, w in table[X].items()}
            total = sum(seqs.values())
            if total <= 0 or any(w < 0 for w in seqs.values()):
                raise ValueError("weights must be non-negative with positive sum")
            self._table[X] = {Y: w / total for Y, w in seqs.items()}

    def batch_prob(self, Xs, Ys):
        return np.array([self._table[tuple(X)].get(tuple(Y), 0.0) for X, Y in zip(Xs, Ys)])

    def sample_given(self, Xs, rng):
        out = []
        for X in Xs:
            seqs = list(self._table[tuple(X)].items())
            k = rng.choice(len(seqs), p=[w for _, w in seqs])
            out.append(seqs[k][0])
        return out

    def sample(self, n, rng):
        Xs = self._draw_inputs(n, rng)
        return list(zip(Xs, self.sample_given(Xs, rng)))


def default_instance(seed: int = 0) -> MarkovData:
    """Verification instance: 4 content tokens + EOS, max_len 4, order-2 chain."""
    return MarkovData.random(Vocab(4), 4, order=2, seed=seed)


def likely_reward(data: DataDistribution, X=()) -> Callable:
    """Deterministic 0/1 reward: 1 iff the sequence is more likely than uniform."""
    index = enumerate_sequences(data.vocab, data.max_len)
    threshold = 1.0 / len(index)
    cache: dict = {}

    def reward(X, Y):
        key = (tuple(X), tuple(Y))
        if key not in cache:
            cache[key] = 1.0 if data.exact_prob(X, Y) > threshold else 0.0
        return cache[key]

    reward.threshold = threshold
    return reward


# ---------------------------------------------------------------------------
# exact expectations


def _rewards_on(index: EnumerationIndex, X, rewardfn) -> np.ndarray:
    return np.array([float(rewardfn(X, Y)) for Y in index.sequences])


def _inputs_of(policy: Policy, inputs):
    if inputs is None:
        inputs = getattr(policy, "inputs", ((),))
    return [tuple(X) for X in inputs]


def sequence_probs(policy: Policy, index: EnumerationIndex, X=()) -> np.ndarray:
    Xs = [tuple(X)] * len(index)
    return np.exp(step_log_probs(policy, Xs, index.tokens, index.lengths).sum(axis=1))


def exact_expected_reward(policy: Policy, rewardfn, inputs=None, budget: int = DEFAULT_BUDGET) -> float:
    """``sum_tau pi(tau) r(tau)``, averaged uniformly over ``inputs``."""
    index = enumerate_sequences(policy.vocab, policy.max_len, budget)
    inputs = _inputs_of(policy, inputs)
    total = 0.0
    for X in inputs:
        total += float(sequence_probs(policy, index, X) @ _rewards_on(index, X, rewardfn))
    return total / len(inputs)


def exact_policy_gradient(policy: Policy, rewardfn, inputs=None, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """``sum_tau pi(tau) r(tau) grad log pi(tau)`` in one weighted backward pass."""
    index = enumerate_sequences(policy.vocab, policy.max_len, budget)
    inputs = _inputs_of(policy, inputs)
    grad = np.zeros(policy.n_params)
    for X in inputs:
        coefs = sequence_probs(policy, index, X) * _rewards_on(index, X, rewardfn)
        grad += weighted_grad(policy, [X] * len(index), index.tokens, index.lengths, coefs)
    return grad / len(inputs)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# estimator reports

ESTIMATORS = ("reinforce", "is", "clipped-is", "clipped-is-no-correction")


@dataclass
class EstimatorRun:
    seed: int
    n: int
    cosine: float
    rel_norm_error: float
    variance: float
    clip_rate: float
    mean_reward: float
    mean_gradient: np.ndarray = field(repr=False)


@dataclass
class EstimatorReport:
    estimator: str
    spec: str
    exact_gradient: np.ndarray = field(repr=False)
    runs: list[EstimatorRun] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [
            {
                "estimator": self.estimator,
                "spec": self.spec,
                "seed": r.seed,
                "n": r.n,
                "cosine": r.cosine,
                "rel_norm_error": r.rel_norm_error,
                "variance": r.variance,
                "clip_rate": r.clip_rate,
                "mean_reward": r.mean_reward,
            }
            for r in self.runs
        ]


def estimator_report(estimator: str, policy: Policy, rewardfn, spec, N: int, seeds: Sequence[int],
                     c: float = 5.0, X=()) -> EstimatorReport:
    """Monte Carlo runs of one gradient estimator against the exact gradient.

    ``variance`` is the trace of the per-sample gradient covariance.  For the
    two-batch clipped estimator a "sample" is one draw from each batch.
    """
    from .sampling import Temperature
    from .trainer import estimate

    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    if estimator == "reinforce":
        spec = Temperature(1.0)
    exact = exact_policy_gradient(policy, rewardfn, inputs=[X])
    report = EstimatorReport(estimator, str(spec), exact)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        est = estimate(estimator, policy, [tuple(X)] * N, spec, rewardfn, rng, c=c, per_sample_variance=True)
        g = est.gradient
        report.runs.append(
            EstimatorRun(
                seed=seed,
                n=N,
                cosine=cosine(g, exact),
                rel_norm_error=float(np.linalg.norm(g - exact) / np.linalg.norm(exact)),
                variance=est.variance,
                clip_rate=est.clip_events / N,
                mean_reward=est.mean_reward,
                mean_gradient=g,
            )
        )
    return report


def exact_estimator_variance(estimator: str, policy: Policy, rewardfn, spec, c: float = 5.0, X=(),
                             budget: int = DEFAULT_BUDGET) -> float:
    """Trace of the per-sample gradient covariance, computed by enumeration.

    Matches the Monte Carlo ``variance`` of :func:`estimator_report`; the two
    batches of the clipped estimator are independent, so their variances add.
    """
    from .sampling import Temperature, spec_densities
    from .seqmodel import per_sample_grads

    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    if estimator == "reinforce":
        spec = Temperature(1.0)
    index = enumerate_sequences(policy.vocab, policy.max_len, budget)
    Xs = [tuple(X)] * len(index)
    logits, _ = policy.forward(Xs, index.tokens, index.lengths)
    log_pi, log_hat = spec_densities(spec, logits, index.tokens, index.lengths, policy.max_len)
    pi, pi_hat = np.exp(log_pi), np.exp(log_hat)
    r = _rewards_on(index, X, rewardfn)
    S = per_sample_grads(policy, Xs, index.tokens, index.lengths, np.ones(len(index)))
    sq = np.sum(S * S, axis=1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        w = np.where(pi_hat > 0, pi / pi_hat, np.inf)

    def var(prob, coef):
        coef = np.where(prob > 0, coef, 0.0)
        mean = (prob * coef) @ S
        return float(np.sum(prob * coef**2 * sq) - mean @ mean)

    if estimator in ("reinforce", "is"):
        if np.any((pi > 0) & (pi_hat == 0)):
            return math.inf
        return var(pi_hat, w * r)
    first = var(pi_hat, np.minimum(c, w) * r)
    if estimator == "clipped-is-no-correction":
        return first
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(np.isinf(w), 1.0, np.maximum(0.0, (w - c) / w))
    return first + var(pi, corr * r)
