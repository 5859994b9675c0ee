"""Behaviour distributions used for exploration and their exact densities.

Three samplers are supported: plain temperature sampling, nucleus (top-p)
sampling and the sequence-level mixture ``eps * nucleus + (1 - eps) * cold``.
The mixture picks its branch once per sequence; its density is always the
mixture density, whichever branch produced the sample.

Config-string grammar (whitespace ignored, keywords optional in order)::

    temperature(<gamma>)            temperature(gamma=0.3)
    nucleus(<p>)                    nucleus(p=0.95)
    mixture(<eps>,<p>,<gamma>)      mixture(eps=0.9,p=0.95,gamma=0.2)

``gamma`` may be ``inf`` (uniform sampling).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .seqmodel import (
    EOS,
    Policy,
    check_input,
    check_sequence,
    free_step_mask,
    log_softmax,
    pad_batch,
    unpad,
)


class UnsupportedSampleError(ValueError):
    """A trajectory has zero probability under the behaviour distribution."""


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not gamma > 0:
        raise ValueError(f"temperature must be > 0, got {gamma}")
    return gamma


def _check_p(p: float) -> float:
    p = float(p)
    if not 0 < p <= 1:
        raise ValueError(f"nucleus mass must lie in (0, 1], got {p}")
    return p


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


@dataclass(frozen=True)
class Temperature:
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", _check_gamma(self.gamma))

    def __str__(self):
        return f"temperature({_fmt(self.gamma)})"


@dataclass(frozen=True)
class Nucleus:
    p: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "p", _check_p(self.p))

    def __str__(self):
        return f"nucleus(p={_fmt(self.p)})"


@dataclass(frozen=True)
class Mixture:
    eps: float = 0.9
    p: float = 0.95
    gamma: float = 0.2

    def __post_init__(self):
        if not 0 <= float(self.eps) <= 1:
            raise ValueError(f"mixture weight must lie in [0, 1], got {self.eps}")
        object.__setattr__(self, "eps", float(self.eps))
        object.__setattr__(self, "p", _check_p(self.p))
        object.__setattr__(self, "gamma", _check_gamma(self.gamma))

    def __str__(self):
        return f"mixture(eps={_fmt(self.eps)},p={_fmt(self.p)},gamma={_fmt(self.gamma)})"


SamplerSpec = Union[Temperature, Nucleus, Mixture]

_SPEC_ARGS = {"temperature": ("gamma",), "nucleus": ("p",), "mixture": ("eps", "p", "gamma")}
_SPEC_CLS = {"temperature": Temperature, "nucleus": Nucleus, "mixture": Mixture}


def parse_spec(text: str) -> SamplerSpec:
    """Parse a sampler config string such as ``mixture(eps=0.9,p=0.95,gamma=0.2)``."""
    m = re.fullmatch(r"\s*([a-z]+)\s*\((.*)\)\s*", text)
    if not m or m.group(1) not in _SPEC_ARGS:
        raise ValueError(f"cannot parse sampler spec {text!r}")
    name, body = m.groups()
    names = _SPEC_ARGS[name]
    kwargs = {}
    parts = [s.strip() for s in body.split(",") if s.strip()]
    for i, part in enumerate(parts):
        if "=" in part:
            key, val = (s.strip() for s in part.split("=", 1))
        elif i < len(names):
            key, val = names[i], part
        else:
            raise ValueError(f"too many arguments in {text!r}")
        if key not in names or key in kwargs:
            raise ValueError(f"bad argument {key!r} in {text!r}")
        try:
            kwargs[key] = float(val)
        except ValueError:
            raise ValueError(f"non-numeric value {val!r} in {text!r}") from None
    try:
        return _SPEC_CLS[name](**kwargs)
    except TypeError:
        raise ValueError(f"missing arguments in {text!r}") from None


# ---------------------------------------------------------------------------
# nucleus truncation


def nucleus_mask(probs: np.ndarray, p: float) -> np.ndarray:
    """Row-wise nucleus membership for a ``(..., V)`` array of distributions.

    Tokens are taken in descending probability, ties by ascending id, until
    the cumulative mass reaches ``p``.  ``p == 1`` keeps every token with
    non-zero probability regardless of rounding.
    """
    p = _check_p(p)
    probs = np.asarray(probs, dtype=np.float64)
    if p >= 1.0:
        return probs > 0
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(sorted_p, axis=-1) - sorted_p
    keep_sorted = (before < p) & (sorted_p > 0)
    mask = np.zeros_like(keep_sorted)
    np.put_along_axis(mask, order, keep_sorted, axis=-1)
    return mask


def nucleus_set(probs, p: float) -> set[int]:
    probs = np.asarray(probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    return {int(i) for i in np.flatnonzero(nucleus_mask(probs, p))}


# ---------------------------------------------------------------------------
# densities


def _tempered_logq(logits: np.ndarray, gamma: float) -> np.ndarray:
    if math.isinf(gamma):
        return np.full_like(logits, -math.log(logits.shape[-1]))
    return log_softmax(logits / gamma)


def _nucleus_logq(logits: np.ndarray, p: float) -> np.ndarray:
    logq = log_softmax(logits)
    mask = nucleus_mask(np.exp(logq), p)
    kept = np.where(mask, np.exp(logq), 0.0).sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return np.where(mask, logq - np.log(kept), -np.inf)


def _picked(logq: np.ndarray, tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    safe = np.where(mask, tokens, 0)
    vals = np.take_along_axis(logq, safe[..., None], axis=-1)[..., 0]
    return np.where(mask, vals, 0.0).sum(axis=1)


def spec_densities(spec: SamplerSpec, logits: np.ndarray, tokens: np.ndarray, lengths: np.ndarray, max_len: int):
    """``(log pi, log pi_hat)`` per sequence from teacher-forced logits."""
    mask = free_step_mask(lengths, max_len)
    log_pi = _picked(log_softmax(logits), tokens, mask)
    if isinstance(spec, Temperature):
        return log_pi, _picked(_tempered_logq(logits, spec.gamma), tokens, mask)
    if isinstance(spec, Nucleus):
        return log_pi, _picked(_nucleus_logq(logits, spec.p), tokens, mask)
    log_nuc = _picked(_nucleus_logq(logits, spec.p), tokens, mask) if spec.eps > 0 else None
    log_tmp = _picked(_tempered_logq(logits, spec.gamma), tokens, mask) if spec.eps < 1 else None
    if log_tmp is None:
        return log_pi, log_nuc
    if log_nuc is None:
        return log_pi, log_tmp
    return log_pi, np.logaddexp(math.log(spec.eps) + log_nuc, math.log1p(-spec.eps) + log_tmp)


def batch_sampler_log_prob(policy: Policy, Xs, Ys, spec: SamplerSpec) -> np.ndarray:
    Ys = [check_sequence(Y, policy.vocab, policy.max_len) for Y in Ys]
    tokens, lengths = pad_batch(Ys, policy.vocab, policy.max_len)
    logits, _ = policy.forward(list(Xs), tokens, lengths)
    return spec_densities(spec, logits, tokens, lengths, policy.max_len)[1]


def sampler_log_prob(policy: Policy, X, Y, spec: SamplerSpec) -> float:
    """log of the behaviour-distribution probability of ``Y`` (may be ``-inf``)."""
    return float(batch_sampler_log_prob(policy, [tuple(X)], [Y], spec)[0])


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    X: tuple
    Y: tuple
    log_pi: float
    log_pi_hat: float
    reward: int | None = None

    @property
    def weight(self) -> float:
        return importance_weight(self)


def importance_weight(traj: Trajectory) -> float:
    if traj.log_pi_hat == -math.inf:
        raise UnsupportedSampleError(f"sequence {traj.Y} has zero behaviour probability")
    return math.exp(traj.log_pi - traj.log_pi_hat)


@dataclass
class TrajectoryBatch:
    """Array-backed batch of trajectories sharing one sampler spec."""

    Xs: list
    tokens: np.ndarray
    lengths: np.ndarray
    log_pi: np.ndarray
    log_pi_hat: np.ndarray
    rewards: np.ndarray | None = None

    def __len__(self):
        return len(self.Xs)

    def __getitem__(self, i) -> Trajectory:
        r = None if self.rewards is None else int(self.rewards[i])
        Y = tuple(int(t) for t in self.tokens[i, : self.lengths[i]])
        return Trajectory(self.Xs[i], Y, float(self.log_pi[i]), float(self.log_pi_hat[i]), r)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def sequences(self) -> list[tuple]:
        return unpad(self.tokens, self.lengths)

    @property
    def weights(self) -> np.ndarray:
        if np.any(np.isneginf(self.log_pi_hat)):
            raise UnsupportedSampleError("batch holds a sample with zero behaviour probability")
        return np.exp(self.log_pi - self.log_pi_hat)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], vocab, max_len) -> "TrajectoryBatch":
        tokens, lengths = pad_batch([t.Y for t in trajs], vocab, max_len)
        rewards = None
        if trajs and all(t.reward is not None for t in trajs):
            rewards = np.array([t.reward for t in trajs], dtype=np.float64)
        return cls(
            [t.X for t in trajs],
            tokens,
            lengths,
            np.array([t.log_pi for t in trajs], dtype=np.float64),
            np.array([t.log_pi_hat for t in trajs], dtype=np.float64),
            rewards,
        )

    @classmethod
    def concat(cls, batches: Sequence["TrajectoryBatch"]) -> "TrajectoryBatch":
        Xs = [X for b in batches for X in b.Xs]
        rewards = None
        if all(b.rewards is not None for b in batches):
            rewards = np.concatenate([b.rewards for b in batches])
        return cls(
            Xs,
            np.concatenate([b.tokens for b in batches]),
            np.concatenate([b.lengths for b in batches]),
            np.concatenate([b.log_pi for b in batches]),
            np.concatenate([b.log_pi_hat for b in batches]),
            rewards,
        )


def _draw(logq: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(np.exp(logq), axis=-1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, logq.shape[-1] - 1)


def _rollout(policy: Policy, Xs, use_nucleus: np.ndarray, spec: SamplerSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    n, L = len(Xs), policy.max_len
    tokens = np.full((n, L), policy.vocab.pad, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    if n == 0:
        return tokens, lengths
    gamma = getattr(spec, "gamma", None)
    p = getattr(spec, "p", None)
    state = policy.start(Xs)
    alive = np.ones(n, dtype=bool)
    for t in range(L):
        if t == L - 1:
            tokens[alive, t] = EOS
            lengths[alive] = L
            break
        logits = policy.step_logits(state)
        logq = np.empty_like(logits)
        if use_nucleus.any():
            logq[use_nucleus] = _nucleus_logq(logits[use_nucleus], p)
        if (~use_nucleus).any():
            logq[~use_nucleus] = _tempered_logq(logits[~use_nucleus], gamma)
        u = rng.random(n)
        tok = _draw(logq, u)
        tok = np.where(alive, tok, policy.vocab.pad)
        tokens[:, t] = tok
        ended = alive & (tok == EOS)
        lengths[ended] = t + 1
        alive &= ~ended
        if not alive.any():
            break
        state = policy.advance(state, np.where(alive, tok, 1))
    return tokens, lengths


def sample_batch(policy: Policy, Xs, spec: SamplerSpec, rng: np.random.Generator) -> TrajectoryBatch:
    """Draw one trajectory per entry of ``Xs`` from the behaviour distribution."""
    Xs = [check_input(X, policy.vocab) for X in Xs]
    n = len(Xs)
    if isinstance(spec, Temperature):
        use_nucleus = np.zeros(n, dtype=bool)
    elif isinstance(spec, Nucleus):
        use_nucleus = np.ones(n, dtype=bool)
    elif spec.eps in (0.0, 1.0):
        use_nucleus = np.full(n, spec.eps == 1.0)
    else:
        use_nucleus = rng.random(n) < spec.eps
    tokens, lengths = _rollout(policy, Xs, use_nucleus, spec, rng)
    logits, _ = policy.forward(Xs, tokens, lengths)
    log_pi, log_pi_hat = spec_densities(spec, logits, tokens, lengths, policy.max_len)
    return TrajectoryBatch(Xs, tokens, lengths, log_pi, log_pi_hat)


def sample(policy: Policy, X, spec: SamplerSpec, rng: np.random.Generator) -> Trajectory:
    return sample_batch(policy, [tuple(X)], spec, rng)[0]


# ---------------------------------------------------------------------------
# decoding


def greedy_decode(policy: Policy, X, beam: int = 1) -> tuple[int, ...]:
    """Beam search on ``log pi``; ``beam=1`` is the per-step argmax chain.

    Ties are broken towards the lexicographically smaller token sequence, so
    ``beam=1`` picks the lowest id among equally likely tokens.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    X = check_input(X, policy.vocab)
    L = policy.max_len
    active: list[tuple[float, tuple]] = [(0.0, ())]
    finished: list[tuple[float, tuple]] = []
    while active:
        cand = []
        for score, prefix in active:
            if len(prefix) == L - 1:
                cand.append((score, prefix + (EOS,)))
                continue
            lq = log_softmax(policy.logits(X, prefix))
            for tok in range(policy.vocab.size):
                cand.append((score + float(lq[tok]), prefix + (tok,)))
        cand.sort(key=lambda c: (-c[0], c[1]))
        cand = cand[:beam]
        active = []
        for score, seq in cand:
            (finished if seq[-1] == EOS else active).append((score, seq))
        if finished:
            best = max(s for s, _ in finished)
            if not active or best >= max(s for s, _ in active):
                break
    finished.sort(key=lambda c: (-c[0], c[1]))
    return finished[0][1]
