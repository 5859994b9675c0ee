import math

import numpy as np
import pytest

from coldgan.discriminator import (
    GENERATED,
    HUMAN,
    DiscConfig,
    LabeledPair,
    NgramDiscriminator,
    ProbeConfig,
    RecurrentDiscriminator,
    accuracy,
    binary_reward,
    disc_score,
    disc_train,
    generated_pairs,
    human_pairs,
    make_discriminator,
    matched_specialization,
    objective,
    probe_cross_temperature,
    probe_prefix_accuracy,
)
from coldgan.oracle import default_instance
from coldgan.seqmodel import TabularPolicy, Vocab
from coldgan.trainer import ReplayBuffer

VOCAB = Vocab(4)


def toy_sets(n=200):
    H = human_pairs([((), (1, 1, 0))] * n)
    G = generated_pairs([()] * n, [(2, 3, 0)] * n)
    return H, G


@pytest.mark.parametrize("kind", ["ngram", "recurrent"])
def test_zero_parameters_score_one_half(kind):
    D = make_discriminator(kind, VOCAB, 4)
    if kind == "recurrent":
        D.params[:] = 0.0
    assert disc_score(D, (), (1, 2, 0)) == 0.5
    assert binary_reward(D, (), (1, 2, 0)) == 1


@pytest.mark.parametrize("kind", ["ngram", "recurrent"])
def test_separable_toy_is_learned(kind):
    H, G = toy_sets()
    D = disc_train(make_discriminator(kind, VOCAB, 4), H, G, config=DiscConfig(steps=300))
    assert disc_score(D, (), (1, 1, 0)) > 0.9
    assert disc_score(D, (), (2, 3, 0)) < 0.1
    assert accuracy(D, H, G) == 1.0


def test_scores_ignore_padding_and_batching():
    H, G = toy_sets()
    D = disc_train(NgramDiscriminator(VOCAB, 6), H, G)
    Ys = [(1, 0), (1, 1, 2, 3, 0), (0,)]
    batch = D.score_batch([()] * 3, Ys)
    single = [disc_score(D, (), Y) for Y in Ys]
    np.testing.assert_allclose(batch, single, atol=1e-15)


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_discriminator("transformer", VOCAB, 4)


def test_labels_are_validated():
    with pytest.raises(ValueError):
        LabeledPair((), (1, 0), "robot")
    with pytest.raises(ValueError):
        LabeledPair((), (1, 0), HUMAN, 3)
    H, G = toy_sets(5)
    with pytest.raises(ValueError):
        disc_train(NgramDiscriminator(VOCAB, 4), G, H)
    with pytest.raises(ValueError):
        disc_train(NgramDiscriminator(VOCAB, 4), H, [])


def test_same_distribution_is_near_chance():
    data = default_instance()
    rng = np.random.default_rng(0)
    H = human_pairs(data.sample(2000, rng))
    G = generated_pairs(*zip(*data.sample(2000, rng)))
    D = disc_train(NgramDiscriminator(data.vocab, data.max_len), H, G, config=DiscConfig(steps=200))
    Ht = human_pairs(data.sample(2000, rng))
    Gt = generated_pairs(*zip(*data.sample(2000, rng)))
    assert abs(accuracy(D, Ht, Gt) - 0.5) < 0.05


def test_training_does_not_mutate_inputs():
    H, G = toy_sets(50)
    H0, G0 = list(H), list(G)
    D0 = NgramDiscriminator(VOCAB, 4)
    D = disc_train(D0, H, G)
    assert H == H0 and G == G0
    assert not D0.params.any() and D.params.any()


def test_replay_replaces_one_percent_rounded_up():
    H, _ = toy_sets(200)
    G = generated_pairs([()] * 200, [(2, 0)] * 200, step=5)
    buf = ReplayBuffer(100)
    buf.push(generated_pairs([()] * 10, [(3, 3, 0)] * 10, step=1), step=1)
    D = disc_train(NgramDiscriminator(VOCAB, 4), H, G, buf, DiscConfig(steps=5, replay_fraction=0.01),
                   np.random.default_rng(0))
    assert D.last_train["n_replaced"] == 2
    assert all(p.origin_step == 5 for p in G)
    D = disc_train(NgramDiscriminator(VOCAB, 4), H, G[:150], buf, DiscConfig(steps=5, replay_fraction=0.01))
    assert D.last_train["n_replaced"] == 2


def test_objective_bounds():
    H, G = toy_sets(20)
    assert objective(NgramDiscriminator(VOCAB, 4), H, G) == pytest.approx(-2 * math.log(2))
    D = disc_train(NgramDiscriminator(VOCAB, 4), H, G)
    assert -2 * math.log(2) < D.last_train["objective"] <= 0


def test_warm_start_improves_objective():
    data = default_instance()
    rng = np.random.default_rng(1)
    H = human_pairs(data.sample(500, rng))
    G = generated_pairs([()] * 500, [(1, 0)] * 250 + [(2, 2, 0)] * 250)
    cfg = DiscConfig(steps=10)
    D1 = disc_train(NgramDiscriminator(VOCAB, 4), H, G, config=cfg)
    D2 = disc_train(D1, H, G, config=cfg)
    assert D2.last_train["objective"] > D1.last_train["objective"]


def test_recurrent_is_deterministic_per_seed():
    a = RecurrentDiscriminator(VOCAB, 4, seed=3)
    b = RecurrentDiscriminator(VOCAB, 4, seed=3)
    np.testing.assert_array_equal(a.params, b.params)


@pytest.fixture(scope="module")
def small_probe_setup():
    data = default_instance()
    pol = TabularPolicy(data.vocab, data.max_len)
    pol = pol.with_params(np.random.default_rng(0).normal(0, 1.0, pol.n_params))
    return pol, data, ProbeConfig(n_train=300, n_eval=200, disc=DiscConfig(steps=50), seed=2)


def test_cross_temperature_probe_shape_and_determinism(small_probe_setup):
    pol, data, cfg = small_probe_setup
    m1 = probe_cross_temperature(pol, data, [0, 1.0], cfg, past_generator=pol)
    m2 = probe_cross_temperature(pol, data, [0, 1.0], cfg, past_generator=pol)
    assert m1.columns == [HUMAN, "T=0", "T=1", "past T=0", "past T=1"]
    assert m1.rows == ["D_T=0", "D_T=1", "D_T in {0,1}"]
    assert m1.to_csv() == m2.to_csv()
    assert ((m1.values > 0) & (m1.values < 1)).all()
    assert len(matched_specialization(m1, [0, 1.0])) == 3


def test_prefix_probe_modes_agree_at_zero_length(small_probe_setup):
    pol, data, cfg = small_probe_setup
    res = probe_prefix_accuracy(pol, data, config=cfg)
    assert res.lengths == list(range(data.max_len + 1))
    assert res.accuracy["standard"][0] == res.accuracy["teacher_forcing"][0]
    assert res.to_csv().splitlines()[0] == "t,standard,teacher_forcing"


def test_prefix_probe_unknown_mode(small_probe_setup):
    pol, data, cfg = small_probe_setup
    with pytest.raises(ValueError):
        probe_prefix_accuracy(pol, data, modes=("beam",), config=cfg)


def test_generated_label_constant():
    assert generated_pairs([()], [(1, 0)])[0].label == GENERATED
