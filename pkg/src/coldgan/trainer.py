"""Adversarial training with importance-sampled policy gradients.

Trajectories are drawn from a behaviour distribution (``config.sampler``),
rewarded 1/0 by the discriminator and re-weighted by
``w = pi(tau) / pi_hat(tau)``.  Weights above ``c`` are truncated and the
lost mass is restored by a correction term over an on-policy batch, which
keeps the estimator unbiased.
"""
from __future__ import annotations

import csv
import logging
import os
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .discriminator import (
    GENERATED,
    DiscConfig,
    Discriminator,
    LabeledPair,
    disc_train,
    generated_pairs,
    human_pairs,
)
from .sampling import (
    SamplerSpec,
    Temperature,
    TrajectoryBatch,
    UnsupportedSampleError,
    parse_spec,
    sample_batch,
    spec_densities,
)
from .seqmodel import Policy, pad_batch, per_sample_grads, save_policy, weighted_grad

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """Generated pairs from the last ``window`` training steps, evicted FIFO."""

    def __init__(self, window: int):
        if window < 1:
            raise ValueError("replay window must be positive")
        self.window = window
        self._items: deque[LabeledPair] = deque()

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, pairs: Sequence[LabeledPair], step: int) -> None:
        for p in pairs:
            if p.label != GENERATED:
                raise ValueError("only generated pairs go into the replay buffer")
            self._items.append(LabeledPair(p.X, p.Y, GENERATED, step))
        while self._items and self._items[0].origin_step <= step - self.window:
            self._items.popleft()

    def sample(self, k: int, rng: np.random.Generator) -> list[LabeledPair]:
        if k > len(self._items):
            log.info("replay sample of %d requested from %d items; returning all", k, len(self._items))
            k = len(self._items)
        if k <= 0:
            return []
        idx = rng.choice(len(self._items), size=k, replace=False)
        return [self._items[i] for i in sorted(idx)]


def replay_push(buffer: ReplayBuffer, pairs, step: int) -> None:
    buffer.push(pairs, step)


def replay_sample(buffer: ReplayBuffer, k: int, rng) -> list[LabeledPair]:
    return buffer.sample(k, rng)


# ---------------------------------------------------------------------------
# estimators


@dataclass
class EstimateReport:
    gradient: np.ndarray = field(repr=False)
    mean_reward: float
    mean_w: float
    max_w: float
    clip_events: int
    n: int
    variance: float | None = None


def fill_rewards(batch: TrajectoryBatch, rewardfn) -> TrajectoryBatch:
    """Attach rewards from a discriminator or any ``(X, Y) -> r`` callable."""
    Ys = batch.sequences
    if hasattr(rewardfn, "batch_rewards"):
        batch.rewards = np.asarray(rewardfn.batch_rewards(batch.Xs, Ys), dtype=np.float64)
    else:
        batch.rewards = np.array([float(rewardfn(X, Y)) for X, Y in zip(batch.Xs, Ys)])
    return batch


def sample_on_policy(policy: Policy, Xs, spec: SamplerSpec, rng) -> TrajectoryBatch:
    """T=1 samples whose ``log_pi_hat`` is re-scored under ``spec``."""
    batch = sample_batch(policy, Xs, Temperature(1.0), rng)
    logits, _ = policy.forward(batch.Xs, batch.tokens, batch.lengths)
    _, batch.log_pi_hat = spec_densities(spec, logits, batch.tokens, batch.lengths, policy.max_len)
    return batch


def _require_rewards(batch):
    if batch.rewards is None:
        raise ValueError("batch has no rewards; call fill_rewards first")


# test hook: ``coldgan verify --corrupt-is-weight`` scales every importance weight
_weight_corruption = 1.0


@contextmanager
def corrupted_weights(factor: float):
    """Multiply every importance weight by ``factor`` (negative-control hook)."""
    global _weight_corruption
    old, _weight_corruption = _weight_corruption, factor
    try:
        yield
    finally:
        _weight_corruption = old


def _is_coefs(batch, c):
    if np.any(np.isneginf(batch.log_pi_hat)):
        raise UnsupportedSampleError("trajectory with zero behaviour probability")
    w = np.exp(batch.log_pi - batch.log_pi_hat) * _weight_corruption
    coef = (w if c is None else np.minimum(c, w)) * batch.rewards
    return w, coef


def _correction_coefs(batch, c):
    # pi_hat == 0 gives w = inf and coefficient 1
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        w = np.exp(batch.log_pi - batch.log_pi_hat)
        coef = np.where(np.isinf(w), 1.0, np.maximum(0.0, (w - c) / w))
    return coef * batch.rewards


def policy_gradient_is(policy: Policy, batch: TrajectoryBatch, c: float | None = None) -> EstimateReport:
    """Mean of ``w * r * grad log pi`` over the batch (no baseline).

    ``c`` is used only to count how many weights exceed it.
    """
    _require_rewards(batch)
    w, coef = _is_coefs(batch, None)
    n = len(batch)
    g = weighted_grad(policy, batch.Xs, batch.tokens, batch.lengths, coef / n)
    clips = int(np.sum(w > c)) if c is not None else 0
    return EstimateReport(g, float(batch.rewards.mean()), float(w.mean()), float(w.max()), clips, n)


def clipped_policy_gradient(policy: Policy, batch: TrajectoryBatch, on_policy: TrajectoryBatch | None,
                            c: float) -> EstimateReport:
    """Truncated-weight term over ``batch`` plus correction over ``on_policy``.

    ``on_policy=None`` drops the correction term, which biases the estimate.
    """
    if not c > 0:
        raise ValueError("clip constant must be positive")
    _require_rewards(batch)
    w, coef = _is_coefs(batch, c)
    n = len(batch)
    g = weighted_grad(policy, batch.Xs, batch.tokens, batch.lengths, coef / n)
    if on_policy is not None:
        _require_rewards(on_policy)
        corr = _correction_coefs(on_policy, c)
        g = g + weighted_grad(policy, on_policy.Xs, on_policy.tokens, on_policy.lengths, corr / len(on_policy))
    return EstimateReport(g, float(batch.rewards.mean()), float(w.mean()), float(w.max()), int(np.sum(w > c)), n)


def _variance(policy, parts, n, chunk=4096) -> float:
    """Trace of the covariance of per-sample gradients ``sum_k coef_k * score_k``."""
    total_sq = 0.0
    total = np.zeros(policy.n_params)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        G = np.zeros((hi - lo, policy.n_params))
        for batch, coef in parts:
            G += per_sample_grads(policy, batch.Xs[lo:hi], batch.tokens[lo:hi], batch.lengths[lo:hi], coef[lo:hi])
        total_sq += float(np.sum(G * G))
        total += G.sum(axis=0)
    mean = total / n
    return total_sq / n - float(mean @ mean)


def estimate(name: str, policy: Policy, Xs, spec: SamplerSpec, rewardfn, rng, c: float = 5.0,
             per_sample_variance: bool = False) -> EstimateReport:
    """Draw batches for the named estimator and evaluate it.

    Names: ``reinforce`` (T=1 samples, w=1), ``is``, ``clipped-is`` and the
    biased negative control ``clipped-is-no-correction``.
    """
    if name == "reinforce":
        spec = Temperature(1.0)
    batch = fill_rewards(sample_batch(policy, Xs, spec, rng), rewardfn)
    n = len(batch)
    if name in ("reinforce", "is"):
        rep = policy_gradient_is(policy, batch, c)
        parts = [(batch, _is_coefs(batch, None)[1])]
    elif name in ("clipped-is", "clipped-is-no-correction"):
        on = None
        if name == "clipped-is":
            on = fill_rewards(sample_on_policy(policy, Xs, spec, rng), rewardfn)
        rep = clipped_policy_gradient(policy, batch, on, c)
        parts = [(batch, _is_coefs(batch, c)[1])]
        if on is not None:
            parts.append((on, _correction_coefs(on, c)))
    else:
        raise ValueError(f"unknown estimator {name!r}")
    if per_sample_variance:
        rep.variance = _variance(policy, parts, n)
    return rep


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    sampler: str = "mixture(eps=0.9,p=0.95,gamma=0.2)"
    clip: float = 5.0
    lr: float = 2e-5
    epochs: int = 10
    batch_size: int = 64
    steps_per_epoch: int = 50
    replay_window: int | None = None  # None: three epochs' worth of steps
    replay_fraction: float = 0.01
    disc_steps: int = 200
    disc_lr: float = 2.0
    disc_samples: int = 1000
    mle_mix: float = 0.0
    eval_every: int = 1
    seed: int = 0

    def validate(self) -> None:
        parse_spec(self.sampler)
        if not self.clip > 0:
            raise ValueError("clip constant c must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0, batch_size and steps_per_epoch >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.replay_window is not None and self.replay_window < 1:
            raise ValueError("replay window must be positive")
        if not 0 <= self.replay_fraction <= 1:
            raise ValueError("replay fraction must lie in [0, 1]")
        if self.replay_fraction != 0.01:
            log.warning("replay fraction overridden to %g (default 0.01)", self.replay_fraction)
        if self.disc_samples < 1 or self.disc_steps < 0:
            raise ValueError("disc_samples must be >= 1 and disc_steps >= 0")
        if self.mle_mix < 0:
            raise ValueError("mle_mix must be non-negative")

    @property
    def window(self) -> int:
        return self.replay_window or 3 * self.steps_per_epoch


LOG_FIELDS = ["epoch", "mean_disc_score", "mean_reward", "mean_w", "max_w", "clip_rate", "disc_objective",
              "replayed", "oracle_nll"]


@dataclass
class TrainResult:
    generator: Policy
    discriminator: Discriminator
    log: list[dict]
    checkpoints: list[Policy] = field(default_factory=list)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_log_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in LOG_FIELDS})


def train(generator: Policy, discriminator: Discriminator, data, config: TrainConfig,
          evaluate: Callable[[Policy], float] | None = None, checkpoint_dir=None,
          log_path=None) -> TrainResult:
    """Run ``config.epochs`` adversarial epochs.

    ``data`` is a :class:`DataDistribution` (fresh human samples each epoch)
    or a list of ``(X, Y)`` pairs (resampled with replacement).  ``evaluate``
    maps a policy to a scalar logged as ``oracle_nll``.  Epoch 0 of the log
    describes the starting point.
    """
    config.validate()
    spec = parse_spec(config.sampler)
    root = np.random.SeedSequence(config.seed)
    gen_rng, disc_rng, data_rng = (np.random.default_rng(s) for s in root.spawn(3))

    def human(n):
        if hasattr(data, "sample"):
            return data.sample(n, data_rng)
        idx = data_rng.integers(len(data), size=n)
        return [data[i] for i in idx]

    def input_pool(n):
        return [X for X, _ in human(n)]

    policy = generator.copy()
    D = discriminator.copy()
    buffer = ReplayBuffer(config.window)
    dcfg = DiscConfig(steps=config.disc_steps, lr=config.disc_lr, replay_fraction=config.replay_fraction)
    rows: list[dict] = []
    checkpoints = [policy.copy()]

    if config.epochs == 0:
        return TrainResult(generator.copy(), discriminator.copy(), rows, checkpoints)

    # the discriminator starts from a fit on the pretrained generator's samples
    H0 = human_pairs(human(config.disc_samples))
    G0 = generated_pairs(*_gen_pairs(policy, input_pool(config.disc_samples), spec, gen_rng))
    D = disc_train(D, H0, G0, None, dcfg, disc_rng)
    rows.append(_epoch_row(0, D, policy, spec, input_pool, gen_rng, [], evaluate, D.last_train, 0))

    step = 0
    for epoch in range(1, config.epochs + 1):
        reports = []
        for _ in range(config.steps_per_epoch):
            step += 1
            Xs = input_pool(config.batch_size)
            batch = fill_rewards(sample_batch(policy, Xs, spec, gen_rng), D)
            on = fill_rewards(sample_on_policy(policy, Xs, spec, gen_rng), D)
            rep = clipped_policy_gradient(policy, batch, on, config.clip)
            grad = rep.gradient
            if config.mle_mix > 0:
                pairs = human(config.batch_size)
                tok, ln = pad_batch([Y for _, Y in pairs], policy.vocab, policy.max_len)
                grad = grad + config.mle_mix * weighted_grad(policy, [X for X, _ in pairs], tok, ln,
                                                             np.full(len(pairs), 1.0 / len(pairs)))
            policy.params = policy.params + config.lr * grad
            reports.append(rep)
            buffer.push(generated_pairs(batch.Xs, batch.sequences, step), step)
        H = human_pairs(human(config.disc_samples))
        G = generated_pairs(*_gen_pairs(policy, input_pool(config.disc_samples), spec, gen_rng), step=step)
        D = disc_train(D, H, G, buffer, dcfg, disc_rng)
        rows.append(_epoch_row(epoch, D, policy, spec, input_pool, gen_rng, reports, evaluate, D.last_train,
                               config.clip))
        checkpoints.append(policy.copy())
        if checkpoint_dir is not None:
            save_policy(policy, os.path.join(checkpoint_dir, f"generator_epoch{epoch:03d}.json"))
        if log_path is not None:
            write_log_csv(rows, log_path)
        log.info("epoch %d: %s", epoch, rows[-1])
    return TrainResult(policy, D, rows, checkpoints)


def _gen_pairs(policy, Xs, spec, rng):
    b = sample_batch(policy, Xs, spec, rng)
    return b.Xs, b.sequences


def _epoch_row(epoch, D, policy, spec, input_pool, rng, reports, evaluate, dinfo, c):
    Xs = input_pool(256)
    b = sample_batch(policy, Xs, spec, rng)
    score = float(np.mean(D.score_batch(b.Xs, b.sequences)))
    n = sum(r.n for r in reports)
    row = {
        "epoch": epoch,
        "mean_disc_score": score,
        "mean_reward": float(sum(r.mean_reward * r.n for r in reports) / n) if n else float("nan"),
        "mean_w": float(sum(r.mean_w * r.n for r in reports) / n) if n else float("nan"),
        "max_w": float(max(r.max_w for r in reports)) if reports else float("nan"),
        "clip_rate": float(sum(r.clip_events for r in reports) / n) if n else 0.0,
        "disc_objective": float(dinfo.get("objective", float("nan"))),
        "replayed": int(dinfo.get("n_replaced", 0)),
        "oracle_nll": float(evaluate(policy)) if evaluate is not None else float("nan"),
    }
    return row
