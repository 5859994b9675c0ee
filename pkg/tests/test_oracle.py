import math
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from coldgan.oracle import (
    BudgetExceededError,
    ExplicitData,
    MarkovData,
    count_sequences,
    cosine,
    default_instance,
    enumerate_sequences,
    estimator_report,
    exact_estimator_variance,
    exact_expected_reward,
    exact_policy_gradient,
    likely_reward,
)
from coldgan.sampling import Mixture, Temperature
from coldgan.seqmodel import EOS, TabularPolicy, Vocab
from coldgan.verification import random_policy


@pytest.mark.parametrize("size,max_len,count", [(2, 3, 3), (3, 2, 3), (3, 3, 7), (5, 4, 85)])
def test_sequence_counts(size, max_len, count):
    vocab = Vocab(size - 1)
    index = enumerate_sequences(vocab, max_len)
    assert count_sequences(vocab, max_len) == len(index) == count
    assert len(set(index.sequences)) == count
    assert all(Y[-1] == EOS and EOS not in Y[:-1] for Y in index)


def test_enumeration_lists_short_sequences_first():
    index = enumerate_sequences(Vocab(2), 3)
    assert index.sequences == [(0,), (1, 0), (2, 0), (1, 1, 0), (1, 2, 0), (2, 1, 0), (2, 2, 0)]


def test_enumeration_budget():
    with pytest.raises(BudgetExceededError) as err:
        enumerate_sequences(Vocab(10), 8, budget=1000)
    assert err.value.required == count_sequences(Vocab(10), 8) > 1000


@pytest.fixture
def small_policy():
    pol = TabularPolicy(Vocab(2), 3)
    return pol.with_params(np.random.default_rng(0).normal(0, 1, pol.n_params))


def test_expected_reward_of_constants_and_indicator(small_policy):
    assert exact_expected_reward(small_policy, lambda X, Y: 1.0) == pytest.approx(1.0, abs=1e-12)
    assert exact_expected_reward(small_policy, lambda X, Y: 0.0) == 0.0
    target = (1, 2, EOS)
    p = math.exp(sum(np.log(np.exp(small_policy.logits((), target[:t]))
                            / np.exp(small_policy.logits((), target[:t])).sum())[target[t]] for t in range(2)))
    got = exact_expected_reward(small_policy, lambda X, Y: float(Y == target))
    assert got == pytest.approx(p, rel=1e-12)


def test_exact_gradient_of_constant_reward_is_zero(small_policy):
    g = exact_policy_gradient(small_policy, lambda X, Y: 1.0)
    assert np.abs(g).max() < 1e-12


def test_exact_gradient_matches_finite_differences(small_policy):
    reward = lambda X, Y: float(len(Y) == 2) + 0.3 * float(1 in Y)  # noqa: E731
    g = exact_policy_gradient(small_policy, reward)
    theta, h = small_policy.params, 1e-6
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (exact_expected_reward(small_policy.with_params(theta + e), reward)
                 - exact_expected_reward(small_policy.with_params(theta - e), reward)) / (2 * h)
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_exact_gradient_ignores_reward_shift(small_policy):
    reward = lambda X, Y: float(2 in Y)  # noqa: E731
    a = exact_policy_gradient(small_policy, reward)
    b = exact_policy_gradient(small_policy, lambda X, Y: reward(X, Y) + 3.0)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_markov_probabilities_sum_to_one():
    data = MarkovData.random(Vocab(3), 4, order=2, inputs=[(1,), (2,)], seed=3)
    index = enumerate_sequences(data.vocab, data.max_len)
    for X in data.inputs:
        assert data.batch_prob([X] * len(index), index.sequences).sum() == pytest.approx(1.0, abs=1e-12)


def test_markov_samples_follow_exact_probabilities():
    data = MarkovData.random(Vocab(2), 3, order=2, seed=4)
    index = enumerate_sequences(data.vocab, data.max_len)
    counts = Counter(Y for _, Y in data.sample(100_000, np.random.default_rng(0)))
    expected = data.batch_prob([()] * len(index), index.sequences) * 100_000
    assert chisquare([counts[Y] for Y in index], expected).pvalue > 0.01


def test_markov_rejects_bad_tables():
    with pytest.raises(ValueError):
        MarkovData(Vocab(2), 3, np.ones((1, 16, 3)), order=2)


def test_explicit_data():
    data = ExplicitData(Vocab(3), 4, {(): {(1, 0): 3, (2, 3, 0): 1}})
    assert data.exact_prob((), (1, 0)) == 0.75
    assert data.exact_prob((), (3, 0)) == 0.0
    assert data.entropy() == pytest.approx(-(0.75 * math.log(0.75) + 0.25 * math.log(0.25)))
    ys = {Y for _, Y in data.sample(200, np.random.default_rng(0))}
    assert ys == {(1, 0), (2, 3, 0)}


def test_likely_reward_is_binary():
    data = default_instance()
    reward = likely_reward(data)
    index = enumerate_sequences(data.vocab, data.max_len)
    r = np.array([reward((), Y) for Y in index])
    assert set(r) == {0.0, 1.0}
    p = data.batch_prob([()] * len(index), index.sequences)
    assert np.array_equal(r == 1.0, p > 1 / 85)


def test_cosine():
    assert cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == 1.0
    assert math.isnan(cosine(np.zeros(2), np.ones(2)))


def test_reinforce_and_unit_temperature_is_agree():
    data = default_instance()
    pol = random_policy(data)
    reward = likely_reward(data)
    a = estimator_report("reinforce", pol, reward, Temperature(1.0), 20_000, [5]).runs[0]
    b = estimator_report("is", pol, reward, Temperature(1.0), 20_000, [5]).runs[0]
    np.testing.assert_allclose(a.mean_gradient, b.mean_gradient, atol=1e-12)
    assert a.cosine > 0.99


def test_estimator_variance_matches_exact_value():
    data = default_instance()
    pol = random_policy(data)
    reward = likely_reward(data)
    spec = Mixture(0.5, 0.9, 0.5)
    exact = exact_estimator_variance("is", pol, reward, spec)
    mc = estimator_report("is", pol, reward, spec, 50_000, [1]).runs[0].variance
    assert mc == pytest.approx(exact, rel=0.05)


def test_unknown_estimator():
    data = default_instance()
    with pytest.raises(ValueError):
        estimator_report("ppo", random_policy(data), likely_reward(data), Temperature(1.0), 10, [0])
