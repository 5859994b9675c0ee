"""Estimator, gradient and support checks against the enumeration oracle.

Each check returns a :class:`CheckResult` with one human-readable line per
measured quantity.  ``coldgan verify`` runs them all; the acceptance tests
call the same functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .oracle import (
    MarkovData,
    default_instance,
    enumerate_sequences,
    estimator_report,
    exact_estimator_variance,
    likely_reward,
)
from .sampling import Mixture, Nucleus, Temperature, batch_sampler_log_prob, sample_batch
from .seqmodel import (
    MLEConfig,
    NeuralPolicy,
    TabularPolicy,
    Vocab,
    batch_log_prob,
    grad_log_prob,
    mle_train,
    per_sample_grads,
    sequence_log_prob,
)
from .trainer import _is_coefs, fill_rewards

IS_SPECS = (Temperature(0.3), Temperature(1.0), Mixture(0.9, 0.95, 0.2))
CLIP_SPECS = (Temperature(0.3), Mixture(0.9, 0.95, 0.2))


@dataclass
class CheckResult:
    name: str
    passed: bool
    lines: list[str] = field(default_factory=list)

    def __str__(self):
        head = f"[{'PASS' if self.passed else 'FAIL'}] {self.name}"
        return "\n".join([head] + ["    " + s for s in self.lines])


# ---------------------------------------------------------------------------
# fixture policies


def random_policy(data: MarkovData, scale: float = 0.25, seed: int = 0) -> TabularPolicy:
    """Tabular policy with i.i.d. normal logits; small ``scale`` keeps IS weights tame."""
    pol = TabularPolicy(data.vocab, data.max_len, data.inputs)
    return pol.with_params(np.random.default_rng(seed).normal(0.0, scale, size=pol.n_params))


def pretrained_policy(data: MarkovData, n: int = 5000, sample_seed: int = 1) -> TabularPolicy:
    """Tabular MLE fit on ``n`` samples from ``data``."""
    pol = TabularPolicy(data.vocab, data.max_len, data.inputs)
    pairs = data.sample(n, np.random.default_rng(sample_seed))
    return mle_train(pol, pairs, MLEConfig(lr=4.0, max_steps=3000, patience=20))


# ---------------------------------------------------------------------------
# checks


def check_is_unbiased(data=None, N: int = 100_000, seed: int = 0, specs=IS_SPECS) -> CheckResult:
    """Monte Carlo mean of the IS estimator vs the exact gradient."""
    data = data if data is not None else default_instance()
    policy = random_policy(data, seed=seed)
    reward = likely_reward(data)
    res = CheckResult("is-unbiased", True)
    for spec in specs:
        run = estimator_report("is", policy, reward, spec, N, [seed]).runs[0]
        ok = run.cosine > 0.999 and run.rel_norm_error < 0.05
        res.passed &= ok
        res.lines.append(f"{spec}: cosine={run.cosine:.6f} rel_norm_error={run.rel_norm_error:.4f} N={N}"
                         f" {'ok' if ok else 'FAILED'}")
    return res


def check_clipped_unbiased(data=None, N: int = 200_000, seed: int = 0, c: float = 0.5, specs=CLIP_SPECS,
                           policy=None) -> CheckResult:
    """Two-term clipped estimator is unbiased; dropping the correction is not."""
    data = data if data is not None else default_instance()
    policy = policy if policy is not None else pretrained_policy(data)
    reward = likely_reward(data)
    res = CheckResult("clipped-unbiased", True)
    for spec in specs:
        full = estimator_report("clipped-is", policy, reward, spec, N, [seed], c=c).runs[0]
        ctrl = estimator_report("clipped-is-no-correction", policy, reward, spec, N, [seed], c=c).runs[0]
        ok = full.clip_rate > 0.10 and full.cosine > 0.99 and not ctrl.cosine > 0.99
        res.passed &= ok
        res.lines.append(f"{spec} c={c}: clip_rate={full.clip_rate:.3f} cosine={full.cosine:.5f}"
                         f" | no-correction cosine={ctrl.cosine:.5f} {'ok' if ok else 'FAILED'}")
    return res


def _fd_error(policy, X, Y, rng, h=1e-5, n_coords=12, n_dirs=3, floor=1e-5) -> float:
    """Worst relative error of analytic vs central-difference derivatives.

    Probes a few random coordinates (half of them where the analytic
    gradient is non-zero) and a few random directions.  Derivatives below
    ``floor`` in magnitude are compared on an absolute scale, since central
    differences cannot resolve them relatively in float64.
    """
    g = grad_log_prob(policy, X, Y)
    theta = policy.params

    def f(params):
        return sequence_log_prob(policy.with_params(params), X, Y)

    nz = np.flatnonzero(g)
    coords = list(rng.choice(policy.n_params, size=n_coords // 2, replace=False))
    if nz.size:
        coords += list(rng.choice(nz, size=min(n_coords // 2, nz.size), replace=False))
    dirs = [np.eye(1, policy.n_params, k)[0] for k in coords]
    dirs += [d / np.linalg.norm(d) for d in rng.normal(size=(n_dirs, policy.n_params))]
    worst = 0.0
    for d in dirs:
        fd = (f(theta + h * d) - f(theta - h * d)) / (2 * h)
        an = float(g @ d)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    return worst


def check_gradients(n_probes: int = 100, seed: int = 0) -> CheckResult:
    """``grad_log_prob`` vs central finite differences on both policy kinds."""
    rng = np.random.default_rng(seed)
    vocab, L = Vocab(4), 4
    index = enumerate_sequences(vocab, L)
    res = CheckResult("grad-fd", True)
    base = {"tabular": TabularPolicy(vocab, L), "neural": NeuralPolicy(vocab, L, 8, 12)}
    for kind, pol in base.items():
        worst = 0.0
        for _ in range(n_probes):
            p = pol.with_params(rng.normal(0.0, 1.0, size=pol.n_params))
            Y = index.sequences[rng.integers(len(index))]
            X = () if kind == "tabular" else tuple(int(t) for t in rng.integers(1, vocab.size, size=rng.integers(3)))
            worst = max(worst, _fd_error(p, X, Y, rng))
        ok = worst < 1e-4
        res.passed &= ok
        res.lines.append(f"{kind}: max relative error {worst:.2e} over {n_probes} probes {'ok' if ok else 'FAILED'}")
    return res


def random_mixture(rng) -> Mixture:
    return Mixture(eps=float(rng.uniform(0.0, 1.0)), p=float(rng.uniform(0.05, 1.0)),
                   gamma=float(rng.uniform(0.05, 2.0)))


def check_support(n_sequences: int = 10_000, n_specs: int = 100, seed: int = 0) -> CheckResult:
    """Mixtures with eps < 1 cover the policy's support; pure nucleus does not."""
    rng = np.random.default_rng(seed)
    vocab, L = Vocab(6), 6
    policy = TabularPolicy(vocab, L)
    policy = policy.with_params(rng.normal(0.0, 3.0, size=policy.n_params))
    Ys = [random_sequence(vocab, L, rng) for _ in range(n_sequences)]
    Xs = [()] * n_sequences
    log_pi = batch_log_prob(policy, Xs, Ys)
    res = CheckResult("support", True)
    bad = 0
    for _ in range(n_specs):
        log_hat = batch_sampler_log_prob(policy, Xs, Ys, random_mixture(rng))
        bad += int(np.sum(np.isfinite(log_pi) & ~np.isfinite(log_hat)))
    res.passed = bad == 0
    res.lines.append(f"{n_specs} mixture specs x {n_sequences} sequences: {bad} pi-positive sequences"
                     f" with pi_hat = 0 {'ok' if bad == 0 else 'FAILED'}")
    w = nucleus_witness(policy, Ys)
    res.passed &= w is not None
    res.lines.append(f"nucleus(p=0.5) witness: {w}" if w is not None else "no nucleus witness found FAILED")
    return res


def random_sequence(vocab: Vocab, max_len: int, rng) -> tuple:
    """Uniform length in ``1..max_len``, uniform content tokens, then EOS."""
    k = int(rng.integers(max_len))
    return tuple(int(t) for t in rng.integers(1, vocab.size, size=k)) + (0,)


def nucleus_witness(policy, sequences, p: float = 0.5):
    """First sequence with finite log pi but zero nucleus probability, or None."""
    Xs = [()] * len(sequences)
    log_pi = batch_log_prob(policy, Xs, sequences)
    log_hat = batch_sampler_log_prob(policy, Xs, sequences, Nucleus(p))
    for Y, a, b in zip(sequences, log_pi, log_hat):
        if np.isfinite(a) and np.isneginf(b):
            return Y
    return None


def check_sampler_normalized(data=None, seed: int = 0) -> CheckResult:
    """Sampler densities sum to one over the enumeration, per spec."""
    data = data if data is not None else default_instance()
    policy = random_policy(data, scale=2.0, seed=seed)
    index = enumerate_sequences(data.vocab, data.max_len)
    res = CheckResult("sampler-normalized", True)
    for spec in IS_SPECS + (Nucleus(0.95), Temperature(math.inf)):
        total = float(np.exp(batch_sampler_log_prob(policy, [()] * len(index), index.sequences, spec)).sum())
        ok = abs(total - 1.0) < 1e-9
        res.passed &= ok
        res.lines.append(f"{spec}: total mass {total:.12f} {'ok' if ok else 'FAILED'}")
    return res


CHECKS = {
    "is-unbiased": check_is_unbiased,
    "clipped-unbiased": check_clipped_unbiased,
    "grad-fd": check_gradients,
    "support": check_support,
    "sampler-normalized": check_sampler_normalized,
}


# ---------------------------------------------------------------------------
# variance diagnostics


def gradient_norm_variance(policy, rewardfn, spec, N: int, rng, c: float | None = None) -> float:
    """Variance across samples of ``|| min(c, w) * r * grad log pi ||``.

    ``c=None`` leaves the weights untruncated.
    """
    batch = fill_rewards(sample_batch(policy, [()] * N, spec, rng), rewardfn)
    w, coef = _is_coefs(batch, c)
    G = per_sample_grads(policy, batch.Xs, batch.tokens, batch.lengths, coef)
    return float(np.var(np.linalg.norm(G, axis=1)))


def exploration_norm_variance(policy, rewardfn, spec, N: int, rng) -> float:
    """Same as :func:`gradient_norm_variance` without the importance weight."""
    batch = fill_rewards(sample_batch(policy, [()] * N, spec, rng), rewardfn)
    G = per_sample_grads(policy, batch.Xs, batch.tokens, batch.lengths, batch.rewards)
    return float(np.var(np.linalg.norm(G, axis=1)))


def exact_variances(policy, rewardfn, specs, c: float = 5.0) -> dict:
    """Exact covariance traces of the IS and clipped estimators per spec."""
    return {str(s): {"is": exact_estimator_variance("is", policy, rewardfn, s),
                     "clipped-is": exact_estimator_variance("clipped-is", policy, rewardfn, s, c)} for s in specs}

