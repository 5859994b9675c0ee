import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldgan.oracle import MarkovData, enumerate_sequences
from coldgan.seqmodel import (
    EOS,
    MLEConfig,
    MLEHistory,
    NeuralPolicy,
    TabularPolicy,
    Vocab,
    batch_log_prob,
    check_sequence,
    dumps_policy,
    grad_log_prob,
    load_policy,
    loads_policy,
    mle_train,
    pad_batch,
    save_policy,
    sequence_log_prob,
    step_log_probs,
    tempered_distribution,
)
from oracles import all_sequences, seq_prob, softmax

# sigmoid(1) and 1 - sigmoid(1), evaluated with mpmath at 50 digits
TEMPERED_2_0_T2 = (0.7310585786300049, 0.2689414213699951)

finite = st.floats(-30, 30, allow_nan=False)


def random_tabular(n_content=3, max_len=3, scale=1.0, seed=0, inputs=((),)):
    pol = TabularPolicy(Vocab(n_content), max_len, inputs)
    return pol.with_params(np.random.default_rng(seed).normal(0, scale, pol.n_params))


def small_neural(n_content=3, max_len=4, seed=0):
    return NeuralPolicy(Vocab(n_content), max_len, embed_dim=3, hidden_dim=4, seed=seed)


# ---------------------------------------------------------------------------
# vocabulary and sequences


def test_vocab_layout():
    v = Vocab(4)
    assert v.size == 5 and v.eos == EOS == 0
    assert len({v.eos, v.bos, v.pad}) == 3
    assert v.bos >= v.size and v.pad >= v.size
    assert list(v.content) == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        Vocab(0)


@pytest.mark.parametrize("Y", [(1, 2), (), (1, 0, 2, 0), (1, 9, 0), (1, 2, 3, 1, 0)])
def test_invalid_sequences_rejected(Y):
    with pytest.raises(ValueError):
        check_sequence(Y, Vocab(4), 4)


def test_sequence_log_prob_rejects_invalid_sequence():
    pol = random_tabular()
    with pytest.raises(ValueError):
        sequence_log_prob(pol, (), (1, 2))


# ---------------------------------------------------------------------------
# tempered softmax


def test_tempered_uniform_logits():
    np.testing.assert_allclose(tempered_distribution([1, 1, 1], 1.0), [1 / 3] * 3, atol=1e-15)


def test_tempered_high_temperature_limit():
    np.testing.assert_allclose(tempered_distribution([1, 0], 1e6), [0.5, 0.5], atol=1e-6)


def test_tempered_two_logits_matches_frozen_values():
    np.testing.assert_allclose(tempered_distribution([2, 0], 2.0), TEMPERED_2_0_T2, rtol=0, atol=1e-15)


@pytest.mark.parametrize("logits,T", [([1, float("nan")], 1.0), ([1, float("inf")], 1.0), ([1, 0], 0.0),
                                      ([1, 0], -1.0), ([1, 0], float("inf"))])
def test_tempered_invalid_arguments(logits, T):
    with pytest.raises(ValueError):
        tempered_distribution(logits, T)


def test_tempered_extreme_logits_stay_finite():
    q = tempered_distribution([1000.0, 0.0, -1000.0], 0.1)
    assert np.all(np.isfinite(q)) and q[0] == pytest.approx(1.0)


@given(st.lists(finite, min_size=2, max_size=8), st.floats(0.05, 20), st.randoms(use_true_random=False))
def test_tempered_normalized_and_permutation_equivariant(z, T, rnd):
    q = tempered_distribution(z, T)
    assert abs(q.sum() - 1) <= 1e-12
    perm = list(range(len(z)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(tempered_distribution([z[i] for i in perm], T), q[perm], rtol=1e-12, atol=1e-300)


@given(st.lists(finite, min_size=2, max_size=8), st.floats(0.1, 5), st.floats(1.05, 3))
def test_colder_temperature_sharpens_argmax(z, T, factor):
    z = np.asarray(z)
    top = int(np.argmax(z))
    runner_up = np.max(np.delete(z, top))
    if z[top] - runner_up < 1e-3:  # ties (and float-level near ties) excluded
        return
    hot, cold = tempered_distribution(z, T)[top], tempered_distribution(z, T / factor)[top]
    assert cold > hot or hot == 1.0


# ---------------------------------------------------------------------------
# sequence log-probabilities


def test_deterministic_policy_has_zero_log_prob():
    pol = TabularPolicy(Vocab(3), 4)
    Y = (2, 1, 3, EOS)
    table = pol.table.copy()
    for t in range(3):
        table[pol.row_of((), Y[:t])] = -50.0
        table[pol.row_of((), Y[:t]), Y[t]] = 50.0
    pol = pol.with_params(table.ravel())
    assert sequence_log_prob(pol, (), Y) == pytest.approx(0.0, abs=1e-30)


def test_uniform_policy_log_prob():
    pol = TabularPolicy(Vocab(3), 5)
    assert sequence_log_prob(pol, (), (1, 2, EOS)) == pytest.approx(3 * math.log(1 / 4), abs=1e-12)


def test_forced_eos_costs_nothing():
    pol = random_tabular(3, 3, seed=1)
    full = (1, 2, EOS)
    expected = seq_prob(pol, (), full)
    assert math.exp(sequence_log_prob(pol, (), full)) == pytest.approx(expected, rel=1e-12)
    q0 = softmax(list(pol.logits((), ())))[1]
    q1 = softmax(list(pol.logits((), (1,))))[2]
    assert expected == pytest.approx(q0 * q1, rel=1e-12)


@pytest.mark.parametrize("T", [1.0, 0.3, 2.5])
def test_tabular_log_prob_matches_stepwise_oracle(T):
    pol = random_tabular(2, 3, scale=2.0, seed=3)
    for Y in all_sequences(2, 3):
        assert sequence_log_prob(pol, (), Y, T) == pytest.approx(math.log(seq_prob(pol, (), Y, T)), abs=1e-10)


def test_neural_log_prob_matches_stepwise_oracle():
    pol = small_neural(3, 4, seed=2)
    for X in [(), (1,), (3, 2)]:
        for Y in all_sequences(3, 4)[::3]:
            assert sequence_log_prob(pol, X, Y) == pytest.approx(math.log(seq_prob(pol, X, Y)), abs=1e-10)


@pytest.mark.parametrize("make", [lambda: random_tabular(3, 4, seed=4), lambda: small_neural(3, 4, seed=4)])
def test_probabilities_sum_to_one_over_enumeration(make):
    pol = make()
    seqs = all_sequences(3, 4)
    total = np.exp(batch_log_prob(pol, [()] * len(seqs), seqs)).sum()
    assert total == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["tabular", "neural"]))
def test_factored_and_monolithic_log_probs_agree(seed, kind):
    pol = random_tabular(3, 4, seed=seed) if kind == "tabular" else small_neural(3, 4, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    seqs = all_sequences(3, 4)
    Ys = [seqs[i] for i in rng.integers(len(seqs), size=5)]
    tokens, lengths = pad_batch(Ys, pol.vocab, pol.max_len)
    factored = step_log_probs(pol, [()] * 5, tokens, lengths).sum(axis=1)
    mono = [math.log(seq_prob(pol, (), Y)) for Y in Ys]
    np.testing.assert_allclose(factored, mono, atol=1e-10)


def test_tabular_and_neural_share_the_interface():
    for pol in (random_tabular(3, 4), small_neural(3, 4)):
        z = pol.logits((), (1, 2))
        assert z.shape == (4,) and np.all(np.isfinite(z))
        assert pol.copy().params is not pol.params
        assert pol.with_params(pol.params * 0).n_params == pol.n_params


# ---------------------------------------------------------------------------
# gradients


def test_tabular_gradient_closed_form():
    pol = random_tabular(3, 4, seed=5)
    Y = (3, 1, EOS)
    g = grad_log_prob(pol, (), Y).reshape(pol.table.shape)
    expected = np.zeros_like(g)
    for t in range(len(Y)):
        row = pol.row_of((), Y[:t])
        expected[row] += np.eye(4)[Y[t]] - softmax(list(pol.table[row]))
    np.testing.assert_allclose(g, expected, atol=1e-14)


def test_neural_gradient_matches_full_finite_differences():
    pol = small_neural(3, 4, seed=7)
    rng = np.random.default_rng(0)
    pol = pol.with_params(rng.normal(0, 0.7, pol.n_params))
    h = 1e-5
    for X, Y in [((), (1, 3, EOS)), ((2,), (2, 2, 1, EOS)), ((1, 3), (EOS,))]:
        g = grad_log_prob(pol, X, Y)
        fd = np.empty_like(g)
        for k in range(pol.n_params):
            e = np.zeros(pol.n_params)
            e[k] = h
            fd[k] = (sequence_log_prob(pol.with_params(pol.params + e), X, Y)
                     - sequence_log_prob(pol.with_params(pol.params - e), X, Y)) / (2 * h)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-5)
        assert rel.max() < 1e-4


@pytest.mark.parametrize("make", [lambda: random_tabular(3, 4, seed=8), lambda: small_neural(3, 4, seed=8)])
def test_score_function_has_zero_mean(make):
    pol = make()
    seqs = all_sequences(3, 4)
    total = np.zeros(pol.n_params)
    for Y in seqs:
        total += math.exp(sequence_log_prob(pol, (), Y)) * grad_log_prob(pol, (), Y)
    assert np.abs(total).max() < 1e-10


# ---------------------------------------------------------------------------
# maximum likelihood


def test_mle_single_sequence_becomes_deterministic():
    pol = TabularPolicy(Vocab(3), 4)
    Y = (2, 3, EOS)
    out = mle_train(pol, [((), Y)] * 20, MLEConfig(lr=5.0, max_steps=400, val_fraction=0.0, patience=1000))
    assert -sequence_log_prob(out, (), Y) < 0.05


def test_mle_rejects_empty_data():
    with pytest.raises(ValueError):
        mle_train(TabularPolicy(Vocab(3), 4), [])


def test_mle_recovers_empirical_conditionals():
    data = MarkovData.random(Vocab(3), 3, order=1, seed=2)
    pairs = data.sample(10_000, np.random.default_rng(0))
    out = mle_train(TabularPolicy(Vocab(3), 3), pairs,
                    MLEConfig(lr=5.0, max_steps=3000, val_fraction=0.0, patience=1000))
    counts = {}
    for _, Y in pairs:
        for t in range(min(len(Y), 2)):
            counts.setdefault(Y[:t], np.zeros(4))[Y[t]] += 1
    for prefix, c in counts.items():
        learned = softmax(list(out.logits((), prefix)))
        tv = 0.5 * np.abs(np.asarray(learned) - c / c.sum()).sum()
        assert tv < 0.05, (prefix, tv)


def test_mle_loss_non_increasing_for_small_steps():
    data = MarkovData.random(Vocab(3), 4, seed=1)
    pairs = data.sample(500, np.random.default_rng(1))
    hist = MLEHistory()
    mle_train(TabularPolicy(Vocab(3), 4), pairs,
              MLEConfig(lr=0.5, max_steps=200, eval_every=5, val_fraction=0.0, patience=1000), hist)
    assert len(hist.train_nll) > 10
    assert all(b <= a + 1e-12 for a, b in zip(hist.train_nll, hist.train_nll[1:]))


def test_mle_neural_improves_over_initialization():
    data = MarkovData.random(Vocab(3), 4, seed=1)
    pairs = data.sample(400, np.random.default_rng(2))
    pol = small_neural(3, 4)
    Xs, Ys = [X for X, _ in pairs], [Y for _, Y in pairs]
    before = -batch_log_prob(pol, Xs, Ys).mean()
    out = mle_train(pol, pairs, MLEConfig(lr=0.5, max_steps=300, max_grad_norm=1.0))
    assert -batch_log_prob(out, Xs, Ys).mean() < before - 0.2


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("make", [lambda: random_tabular(3, 3, seed=9, inputs=((), (1,))),
                                  lambda: small_neural(3, 4, seed=9)])
def test_checkpoint_round_trip_is_byte_stable(make, tmp_path):
    pol = make()
    text = dumps_policy(pol)
    assert text == dumps_policy(pol.copy())
    path = tmp_path / "p.json"
    save_policy(pol, path)
    back = load_policy(path)
    assert type(back) is type(pol)
    np.testing.assert_array_equal(back.params, pol.params)
    assert dumps_policy(back) == text
    assert loads_policy(text).logits((), ()).tolist() == pol.logits((), ()).tolist()


def test_checkpoint_rejects_unknown_format():
    with pytest.raises(ValueError):
        loads_policy('{"format": "other", "version": 1}')


def test_enumeration_and_policy_agree_on_ordering(data):
    index = enumerate_sequences(data.vocab, data.max_len)
    pol = random_tabular(4, 4, seed=1)
    lp = batch_log_prob(pol, [()] * len(index), index.sequences)
    assert lp.shape == (85,) and np.all(np.isfinite(lp))
