"""Human-vs-machine discriminators, binary rewards and diagnostic probes.

The default discriminator is logistic regression over a bag of n-grams of
``BOS + Y`` (n = 1..3), input-by-output unigram/bigram cross features and a
one-hot length.  A tiny recurrent scorer is available as an alternative.
Both are trained by gradient ascent on

    mean_H log D(X, Y) + mean_G log(1 - D(X, Y)).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .seqmodel import EOS, Policy, Vocab, next_token_logits, strip_padding, log_softmax

HUMAN = "human"
GENERATED = "generated"


@dataclass(frozen=True)
class LabeledPair:
    X: tuple
    Y: tuple
    label: str
    origin_step: int = -1

    def __post_init__(self):
        if self.label not in (HUMAN, GENERATED):
            raise ValueError(f"label must be {HUMAN!r} or {GENERATED!r}")
        if self.label == HUMAN and self.origin_step != -1:
            raise ValueError("human pairs carry origin_step -1")


def human_pairs(data) -> list[LabeledPair]:
    return [LabeledPair(tuple(X), tuple(Y), HUMAN) for X, Y in data]


def generated_pairs(Xs, Ys, step: int = 0) -> list[LabeledPair]:
    return [LabeledPair(tuple(X), tuple(Y), GENERATED, step) for X, Y in zip(Xs, Ys)]


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def _log_sigmoid(s):
    return -np.logaddexp(0.0, -s)


# ---------------------------------------------------------------------------
# featurizer


class NgramFeaturizer:
    """Sparse count features; rows are L2-normalized."""

    def __init__(self, vocab: Vocab, max_len: int, orders: Sequence[int] = (1, 2, 3), cross: bool = True):
        self.vocab = vocab
        self.max_len = max_len
        self.orders = tuple(orders)
        self.cross = cross
        A = vocab.input_size
        self._offsets = {}
        off = 0
        for n in self.orders:
            self._offsets[n] = off
            off += A**n
        self._cross_off = off
        if cross:
            off += A * (A + A * A)
        self._len_off = off
        off += max_len + 1
        self.dim = off + 1  # last slot: bias

    def _features(self, X, Y) -> list[int]:
        A = self.vocab.input_size
        stream = (self.vocab.bos,) + strip_padding(Y)
        feats = []
        for n in self.orders:
            for i in range(len(stream) - n + 1):
                code = 0
                for t in stream[i : i + n]:
                    code = code * A + t
                feats.append(self._offsets[n] + code)
        if self.cross and X:
            y_grams = [t for t in stream] + [A + a * A + b for a, b in zip(stream, stream[1:])]
            for x in set(X):
                base = self._cross_off + x * (A + A * A)
                feats.extend(base + g for g in y_grams)
        feats.append(self._len_off + min(len(stream) - 1, self.max_len))
        feats.append(self.dim - 1)
        return feats

    def transform(self, Xs, Ys) -> sp.csr_matrix:
        indptr, indices = [0], []
        for X, Y in zip(Xs, Ys):
            f = self._features(tuple(X), Y)
            indices.extend(f)
            indptr.append(len(indices))
        data = np.ones(len(indices))
        M = sp.csr_matrix((data, np.array(indices, dtype=np.int64), np.array(indptr)), shape=(len(indptr) - 1, self.dim))
        M.sum_duplicates()
        norms = np.sqrt(np.asarray(M.multiply(M).sum(axis=1)).ravel())
        return sp.diags(1.0 / np.maximum(norms, 1e-12)) @ M


# ---------------------------------------------------------------------------
# discriminators


@dataclass
class DiscConfig:
    steps: int = 200
    lr: float = 2.0
    l2: float = 1e-4
    replay_fraction: float = 0.01


class Discriminator:
    """Scores ``D(X, Y)`` = probability that the pair is human-written."""

    kind: str
    params: np.ndarray
    last_train: dict

    def score_batch(self, Xs, Ys) -> np.ndarray:
        raise NotImplementedError

    def copy(self) -> "Discriminator":
        raise NotImplementedError

    def _fit(self, Xs, Ys, labels, weights, config: DiscConfig):
        raise NotImplementedError

    def rewards(self, Xs, Ys) -> np.ndarray:
        return (self.score_batch(Xs, Ys) >= 0.5).astype(np.float64)

    # rewardfn protocol used by the trainer and the oracle
    def __call__(self, X, Y) -> float:
        return float(binary_reward(self, X, Y))

    def batch_rewards(self, Xs, Ys) -> np.ndarray:
        return self.rewards(Xs, Ys)


class NgramDiscriminator(Discriminator):
    kind = "ngram"

    def __init__(self, vocab: Vocab, max_len: int, params=None, orders=(1, 2, 3), cross: bool = True):
        self.vocab = vocab
        self.max_len = max_len
        self.featurizer = NgramFeaturizer(vocab, max_len, orders, cross)
        self.params = np.zeros(self.featurizer.dim) if params is None else np.asarray(params, dtype=np.float64).copy()
        self.last_train = {}

    def copy(self):
        return NgramDiscriminator(self.vocab, self.max_len, self.params, self.featurizer.orders, self.featurizer.cross)

    def logits_batch(self, Xs, Ys) -> np.ndarray:
        return self.featurizer.transform(Xs, Ys) @ self.params

    def score_batch(self, Xs, Ys):
        if len(Ys) == 0:
            return np.zeros(0)
        return _sigmoid(self.logits_batch(Xs, Ys))

    def _fit(self, Xs, Ys, labels, weights, config):
        F = self.featurizer.transform(Xs, Ys)
        w = self.params
        for _ in range(config.steps):
            s = F @ w
            # d/ds of weighted log-likelihood: label - sigmoid(s)
            g = F.T @ (weights * (labels - _sigmoid(s))) - config.l2 * w
            w = w + config.lr * g
        self.params = w


class RecurrentDiscriminator(Discriminator):
    """Embedding -> tanh cell over ``X + BOS + Y`` -> linear read-out of the last state."""

    kind = "recurrent"

    def __init__(self, vocab: Vocab, max_len: int, embed_dim: int = 8, hidden_dim: int = 16, params=None, seed: int = 0):
        self.vocab = vocab
        self.max_len = max_len
        self.embed_dim, self.hidden_dim = embed_dim, hidden_dim
        self._shapes = [("E", (vocab.input_size, embed_dim)), ("Wx", (embed_dim, hidden_dim)),
                        ("Wh", (hidden_dim, hidden_dim)), ("bh", (hidden_dim,)), ("w", (hidden_dim,)), ("b", (1,))]
        if params is None:
            rng = np.random.default_rng(seed)
            parts = [np.zeros(s) if n in ("bh", "w", "b") else rng.normal(0, 1 / math.sqrt(s[0]), size=s)
                     for n, s in self._shapes]
            params = np.concatenate([p.ravel() for p in parts])
        self.params = np.asarray(params, dtype=np.float64).copy()
        self.last_train = {}

    def copy(self):
        return RecurrentDiscriminator(self.vocab, self.max_len, self.embed_dim, self.hidden_dim, self.params)

    def _unpack(self):
        out, i = {}, 0
        for name, shape in self._shapes:
            k = int(np.prod(shape))
            out[name] = self.params[i : i + k].reshape(shape)
            i += k
        return out

    def _streams(self, Xs, Ys):
        seqs = [tuple(X) + (self.vocab.bos,) + strip_padding(Y) for X, Y in zip(Xs, Ys)]
        lens = np.array([len(s) for s in seqs])
        S = np.full((len(seqs), int(lens.max(initial=1))), self.vocab.pad, dtype=np.int64)
        for i, s in enumerate(seqs):
            S[i, : len(s)] = s
        return S, lens

    def _forward(self, Xs, Ys):
        p = self._unpack()
        S, lens = self._streams(Xs, Ys)
        n, W = S.shape
        H = np.zeros((n, W + 1, self.hidden_dim))
        for j in range(W):
            live = (j < lens)[:, None]
            h = np.tanh(p["E"][S[:, j]] @ p["Wx"] + H[:, j] @ p["Wh"] + p["bh"])
            H[:, j + 1] = np.where(live, h, H[:, j])
        s = H[:, -1] @ p["w"] + p["b"][0]
        return s, (S, lens, H)

    def score_batch(self, Xs, Ys):
        if len(Ys) == 0:
            return np.zeros(0)
        return _sigmoid(self._forward(Xs, Ys)[0])

    def _fit(self, Xs, Ys, labels, weights, config):
        for _ in range(config.steps):
            p = self._unpack()
            s, (S, lens, H) = self._forward(Xs, Ys)
            ds = weights * (labels - _sigmoid(s))
            g = {k: np.zeros_like(v) for k, v in p.items()}
            g["w"] = H[:, -1].T @ ds
            g["b"] = np.array([ds.sum()])
            dh = ds[:, None] * p["w"][None, :]
            for j in range(S.shape[1] - 1, -1, -1):
                live = (j < lens)[:, None]
                da = np.where(live, dh * (1 - H[:, j + 1] ** 2), 0.0)
                g["Wx"] += p["E"][S[:, j]].T @ da
                g["Wh"] += H[:, j].T @ da
                g["bh"] += da.sum(axis=0)
                np.add.at(g["E"], S[:, j], da @ p["Wx"].T)
                dh = np.where(live, da @ p["Wh"].T, dh)
            flat = np.concatenate([g[name].ravel() for name, _ in self._shapes])
            self.params = self.params + config.lr * (flat - config.l2 * self.params)


def make_discriminator(kind: str, vocab: Vocab, max_len: int, seed: int = 0) -> Discriminator:
    if kind == "ngram":
        return NgramDiscriminator(vocab, max_len)
    if kind == "recurrent":
        return RecurrentDiscriminator(vocab, max_len, seed=seed)
    raise ValueError(f"unknown discriminator kind {kind!r}")


def disc_score(D: Discriminator, X, Y) -> float:
    return float(D.score_batch([tuple(X)], [tuple(Y)])[0])


def binary_reward(D: Discriminator, X, Y) -> int:
    """1 iff ``D`` predicts human; a score of exactly 0.5 counts as human."""
    return int(disc_score(D, X, Y) >= 0.5)


def objective(D: Discriminator, H: Sequence[LabeledPair], G: Sequence[LabeledPair]) -> float:
    sh = D.score_batch([p.X for p in H], [p.Y for p in H])
    sg = D.score_batch([p.X for p in G], [p.Y for p in G])
    with np.errstate(divide="ignore"):
        return float(np.mean(np.log(sh)) + np.mean(np.log1p(-sg)))


def apply_replay(G: Sequence[LabeledPair], replay, fraction: float, rng: np.random.Generator):
    """Swap ``ceil(fraction * |G|)`` generated examples for buffer samples.

    Returns the new list and the number of swapped slots (fewer when the
    buffer is short).
    """
    G = list(G)
    if replay is None or fraction <= 0 or len(replay) == 0:
        return G, 0
    k = math.ceil(fraction * len(G) - 1e-9)
    drawn = replay.sample(k, rng)
    slots = rng.choice(len(G), size=len(drawn), replace=False)
    for slot, pair in zip(np.sort(slots), drawn):
        G[slot] = pair
    return G, len(drawn)


def disc_train(D: Discriminator, H: Sequence[LabeledPair], G: Sequence[LabeledPair], replay=None,
               config: DiscConfig | None = None, rng: np.random.Generator | None = None) -> Discriminator:
    """Warm-started gradient ascent on the human/generated log-likelihood."""
    config = config or DiscConfig()
    if not H or not G:
        raise ValueError("disc_train needs non-empty human and generated sets")
    if any(p.label != HUMAN for p in H) or any(p.label != GENERATED for p in G):
        raise ValueError("H must hold human pairs and G generated pairs")
    rng = rng if rng is not None else np.random.default_rng(0)
    G, n_replaced = apply_replay(G, replay, config.replay_fraction, rng)
    pairs = list(H) + G
    labels = np.r_[np.ones(len(H)), np.zeros(len(G))]
    weights = np.r_[np.full(len(H), 1.0 / len(H)), np.full(len(G), 1.0 / len(G))]
    out = D.copy()
    out._fit([p.X for p in pairs], [p.Y for p in pairs], labels, weights, config)
    out.last_train = {"n_replaced": n_replaced, "objective": objective(out, H, G)}
    return out


def accuracy(D: Discriminator, H: Sequence[LabeledPair], G: Sequence[LabeledPair]) -> float:
    sh = D.score_batch([p.X for p in H], [p.Y for p in H])
    sg = D.score_batch([p.X for p in G], [p.Y for p in G])
    return float((np.sum(sh >= 0.5) + np.sum(sg < 0.5)) / (len(H) + len(G)))


# ---------------------------------------------------------------------------
# probes


def generate(policy: Policy, Xs, T: float, rng) -> list[tuple]:
    """Samples at temperature ``T``; ``T == 0`` is greedy decoding."""
    from .sampling import Temperature, greedy_decode, sample_batch

    if T == 0:
        cache = {}
        for X in Xs:
            if X not in cache:
                cache[X] = greedy_decode(policy, X, 1)
        return [cache[X] for X in Xs]
    return sample_batch(policy, list(Xs), Temperature(T), rng).sequences


def _temp_label(T: float) -> str:
    if math.isinf(T):
        return "T=inf"
    return f"T={T:g}"


@dataclass
class ProbeConfig:
    n_train: int = 2000
    n_eval: int = 1000
    disc: DiscConfig = field(default_factory=lambda: DiscConfig(steps=300))
    kind: str = "ngram"
    seed: int = 0


@dataclass
class ScoreMatrix:
    """Mean probability-human, one row per discriminator."""

    columns: list[str]
    rows: list[str]
    values: np.ndarray

    def cell(self, row: str, col: str) -> float:
        return float(self.values[self.rows.index(row), self.columns.index(col)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["discriminator"] + self.columns)
        for name, vals in zip(self.rows, self.values):
            w.writerow([name] + [f"{v:.6f}" for v in vals])
        return buf.getvalue()


def probe_cross_temperature(generator: Policy, data, temps: Sequence[float], config: ProbeConfig | None = None,
                            past_generator: Policy | None = None) -> ScoreMatrix:
    """Train one discriminator per generation temperature and cross-evaluate.

    A final row trains on the union of all temperatures.  Columns are the
    human evaluation set, each temperature, and (with ``past_generator``)
    each temperature under the older checkpoint.
    """
    config = config or ProbeConfig()
    rng = np.random.default_rng(config.seed)
    vocab, L = generator.vocab, generator.max_len

    H_train = human_pairs(data.sample(config.n_train, rng))
    H_eval = human_pairs(data.sample(config.n_eval, rng))

    def gen_set(policy, T, n):
        Xs = [data.inputs[i] for i in rng.integers(len(data.inputs), size=n)]
        return generated_pairs(Xs, generate(policy, Xs, T, rng))

    G_train = {T: gen_set(generator, T, config.n_train) for T in temps}
    G_eval = {_temp_label(T): gen_set(generator, T, config.n_eval) for T in temps}
    if past_generator is not None:
        G_eval.update({"past " + _temp_label(T): gen_set(past_generator, T, config.n_eval) for T in temps})

    columns = [HUMAN] + list(G_eval)
    rows, values = [], []
    train_sets = [(f"D_{_temp_label(T)}", G_train[T]) for T in temps]
    train_sets.append((union_row_name(temps), [p for T in temps for p in G_train[T]]))
    for name, G in train_sets:
        D = disc_train(make_discriminator(config.kind, vocab, L, config.seed), H_train, G, None, config.disc, rng)
        row = [float(np.mean(D.score_batch([p.X for p in H_eval], [p.Y for p in H_eval])))]
        for col in columns[1:]:
            E = G_eval[col]
            row.append(float(np.mean(D.score_batch([p.X for p in E], [p.Y for p in E]))))
        rows.append(name)
        values.append(row)
    return ScoreMatrix(columns, rows, np.array(values))


def union_row_name(temps: Sequence[float]) -> str:
    return "D_T in {" + ",".join(_temp_label(T)[2:] for T in temps) + "}"


def matched_specialization(matrix: ScoreMatrix, temps: Sequence[float]) -> list[bool]:
    """One flag per trained discriminator row.

    A single-temperature row is specialized when its matched cell is below
    every mismatched generated cell.  For the union row every temperature is
    matched, so it counts when each generated cell is below the human cell.
    """
    cols = [_temp_label(S) for S in temps]
    out = []
    for T in temps:
        row = f"D_{_temp_label(T)}"
        matched = matrix.cell(row, _temp_label(T))
        out.append(all(matched < matrix.cell(row, c) for c in cols if c != _temp_label(T)))
    union = union_row_name(temps)
    if union in matrix.rows:
        out.append(all(matrix.cell(union, c) < matrix.cell(union, HUMAN) for c in cols))
    return out


def _truncate(Y, t):
    return tuple(Y[:t])


def _teacher_forced(generator: Policy, X_list, human_Ys, t, rng):
    """Ground-truth prefix of length ``t-1`` plus one generated token."""
    out = []
    need, idx = [], []
    for i, Y in enumerate(human_Ys):
        pre = tuple(Y[: t - 1])
        if EOS in pre or t == 0:
            out.append(pre[:t])
        elif len(pre) == generator.max_len - 1:
            out.append(pre + (EOS,))
        else:
            out.append(None)
            need.append(pre)
            idx.append(i)
    if need:
        logits = next_token_logits(generator, [X_list[i] for i in idx], need)
        probs = np.exp(log_softmax(logits))
        cdf = np.cumsum(probs, axis=1)
        tok = np.minimum((cdf < rng.random(len(need))[:, None] * cdf[:, -1:]).sum(axis=1), probs.shape[1] - 1)
        for i, pre, k in zip(idx, need, tok):
            out[i] = pre + (int(k),)
    return out


@dataclass
class PrefixAccuracy:
    lengths: list[int]
    accuracy: dict[str, list[float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        modes = list(self.accuracy)
        w.writerow(["t"] + modes)
        for j, t in enumerate(self.lengths):
            w.writerow([t] + [f"{self.accuracy[m][j]:.6f}" for m in modes])
        return buf.getvalue()


def probe_prefix_accuracy(generator: Policy, data, modes=("standard", "teacher_forcing"),
                          config: ProbeConfig | None = None) -> PrefixAccuracy:
    """Held-out discriminator accuracy on partial sequences of length ``t``.

    ``standard`` prefixes come from free-running generation; ``teacher_forcing``
    prefixes are human up to ``t-1`` with only the ``t``-th token generated.
    Every ``(mode, t)`` cell reuses the same seed, so cells that see identical
    data report identical accuracy.
    """
    config = config or ProbeConfig()
    from .sampling import Temperature, sample_batch

    L = generator.max_len
    result = {m: [] for m in modes}
    ts = list(range(L + 1))
    for t in ts:
        for mode in modes:
            rng = np.random.default_rng([config.seed, t])
            n = config.n_train + config.n_eval
            human = data.sample(n, rng)
            other = data.sample(n, rng)
            Xs = [X for X, _ in other]
            if mode == "standard":
                gen = [_truncate(Y, t) for Y in sample_batch(generator, Xs, Temperature(1.0), rng).sequences]
            elif mode == "teacher_forcing":
                gen = _teacher_forced(generator, Xs, [Y for _, Y in other], t, rng)
            else:
                raise ValueError(f"unknown generation mode {mode!r}")
            H = [LabeledPair(X, _truncate(Y, t), HUMAN) for X, Y in human]
            G = generated_pairs(Xs, gen)
            k = config.n_train
            D = disc_train(make_discriminator(config.kind, generator.vocab, L, config.seed), H[:k], G[:k], None,
                           config.disc, rng)
            result[mode].append(accuracy(D, H[k:], G[k:]))
    return PrefixAccuracy(ts, result)
