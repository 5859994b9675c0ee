"""Vocabularies, token sequences and autoregressive generator policies.

Token layout: id 0 is EOS, ids ``1..n_content`` are content tokens, so a
policy emits ``Vocab.size == n_content + 1`` logits.  BOS (``size``) and PAD
(``size + 1``) are reserved input-only ids that a policy never produces.

A sequence ``Y`` is a tuple of ids ending with exactly one EOS and holding at
most ``max_len`` tokens (EOS included).  When a prefix reaches ``max_len - 1``
content tokens the EOS step is forced: it has probability one under every
temperature and sampler, and no parameter influences it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EOS = 0

CHECKPOINT_FORMAT = "coldgan-policy"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    n_content: int

    def __post_init__(self):
        if self.n_content < 1:
            raise ValueError("vocabulary needs at least one content token besides EOS")

    @property
    def size(self) -> int:
        return self.n_content + 1

    @property
    def eos(self) -> int:
        return EOS

    @property
    def bos(self) -> int:
        return self.size

    @property
    def pad(self) -> int:
        return self.size + 1

    @property
    def input_size(self) -> int:
        """Number of distinct ids that may appear on an input stream."""
        return self.size + 2

    @property
    def content(self) -> range:
        return range(1, self.size)


def check_sequence(Y: Sequence[int], vocab: Vocab, max_len: int) -> tuple[int, ...]:
    """Validate an EOS-terminated output sequence and return it as a tuple."""
    Y = tuple(int(t) for t in Y)
    if not Y or Y[-1] != EOS:
        raise ValueError(f"sequence {Y} is not EOS-terminated")
    if len(Y) > max_len:
        raise ValueError(f"sequence {Y} longer than max_len={max_len}")
    for t in Y[:-1]:
        if not 1 <= t < vocab.size:
            raise ValueError(f"sequence {Y} holds invalid content id {t}")
    return Y


def check_input(X: Sequence[int], vocab: Vocab) -> tuple[int, ...]:
    X = tuple(int(t) for t in X)
    for t in X:
        if not 1 <= t < vocab.size:
            raise ValueError(f"conditioning input {X} holds invalid id {t}")
    return X


def strip_padding(tokens: Sequence[int]) -> tuple[int, ...]:
    """Cut a token stream right after its first EOS (drops PAD and trailing junk)."""
    out = []
    for t in tokens:
        out.append(int(t))
        if t == EOS:
            break
    return tuple(out)


def pad_batch(Ys: Sequence[Sequence[int]], vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Pack sequences into a ``(n, max_len)`` PAD-filled array plus lengths."""
    tokens = np.full((len(Ys), max_len), vocab.pad, dtype=np.int64)
    lengths = np.zeros(len(Ys), dtype=np.int64)
    for i, Y in enumerate(Ys):
        tokens[i, : len(Y)] = Y
        lengths[i] = len(Y)
    return tokens, lengths


def unpad(tokens: np.ndarray, lengths: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(t) for t in row[:n]) for row, n in zip(tokens, lengths)]


def free_step_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    """True where a step is actually sampled (not padding, not the forced EOS)."""
    steps = np.arange(max_len)[None, :]
    return steps < np.minimum(lengths, max_len - 1)[:, None]


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def tempered_distribution(logits, T: float) -> np.ndarray:
    """Softmax of ``logits / T`` with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if not T > 0 or not math.isfinite(T):
        raise ValueError(f"temperature must be a positive finite number, got {T}")
    return np.exp(log_softmax(z / T))


# ---------------------------------------------------------------------------
# policies


class Policy:
    """Common surface of the tabular and the recurrent generator.

    Subclasses hold a flat ``params`` vector and implement the batched
    teacher-forced forward/backward pair plus an incremental rollout state.
    """

    kind: str
    vocab: Vocab
    max_len: int
    params: np.ndarray

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "Policy":
        return self.with_params(self.params.copy())

    def with_params(self, params: np.ndarray) -> "Policy":
        raise NotImplementedError

    # teacher-forced computation -------------------------------------------
    def forward(self, Xs: Sequence[tuple], tokens: np.ndarray, lengths: np.ndarray):
        """Return ``(logits, cache)`` with logits shaped ``(n, max_len, V)``."""
        raise NotImplementedError

    def backward(self, cache, dlogits: np.ndarray) -> np.ndarray:
        """Flat gradient of ``sum(dlogits * logits)`` w.r.t. ``params``."""
        raise NotImplementedError

    # incremental rollouts ---------------------------------------------------
    def start(self, Xs: Sequence[tuple]):
        raise NotImplementedError

    def step_logits(self, state) -> np.ndarray:
        raise NotImplementedError

    def advance(self, state, tokens: np.ndarray):
        raise NotImplementedError

    # conveniences -----------------------------------------------------------
    def logits(self, X: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        """Next-token logits after ``prefix`` (content tokens only)."""
        prefix = tuple(prefix)
        if len(prefix) >= self.max_len - 1:
            raise ValueError("prefix leaves no free step before the forced EOS")
        state = self.start([tuple(X)])
        for t in prefix:
            state = self.advance(state, np.array([t]))
        return self.step_logits(state)[0]


def _checkpoint_payload(policy: Policy, dims: dict) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": policy.kind,
        "dims": dims,
        "params": [float(x) for x in policy.params],
    }


class TabularPolicy(Policy):
    """One free logit row per (input, content prefix) pair.

    Only usable for tiny vocabularies and lengths since the row count grows as
    ``n_inputs * sum(n_content**k for k < max_len - 1)``.
    """

    kind = "tabular"

    def __init__(self, vocab: Vocab, max_len: int, inputs: Sequence[Sequence[int]] = ((),), params=None):
        if max_len < 1:
            raise ValueError("max_len must be positive")
        self.vocab = vocab
        self.max_len = max_len
        self.inputs = tuple(check_input(X, vocab) for X in inputs)
        if len(set(self.inputs)) != len(self.inputs):
            raise ValueError("duplicate conditioning inputs")
        self._input_index = {X: i for i, X in enumerate(self.inputs)}
        self._build_tree()
        n = len(self.inputs) * self.n_nodes * vocab.size
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    def _build_tree(self):
        n_c = self.vocab.n_content
        depth = max(self.max_len - 1, 0)  # prefixes of length 0..max_len-2 own rows
        self.n_nodes = sum(n_c**k for k in range(depth))
        child = np.full((max(self.n_nodes, 1), self.vocab.input_size), -1, dtype=np.int64)
        frontier = [0] if self.n_nodes else []
        nxt = 1
        for _ in range(depth - 1):
            new = []
            for node in frontier:
                for c in self.vocab.content:
                    child[node, c] = nxt
                    new.append(nxt)
                    nxt += 1
            frontier = new
        self._child = child

    @property
    def table(self) -> np.ndarray:
        return self.params.reshape(-1, self.vocab.size)

    def row_of(self, X: Sequence[int], prefix: Sequence[int]) -> int:
        node = 0
        for t in prefix:
            node = self._child[node, t]
        if node < 0 or len(prefix) >= self.max_len - 1:
            raise ValueError("prefix has no free step")
        return self._input_index[tuple(X)] * self.n_nodes + int(node)

    def with_params(self, params):
        return TabularPolicy(self.vocab, self.max_len, self.inputs, params)

    def _offsets(self, Xs):
        try:
            return np.array([self._input_index[tuple(X)] * self.n_nodes for X in Xs], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"input {exc.args[0]} unknown to this tabular policy") from None

    def rows(self, Xs, tokens, lengths) -> np.ndarray:
        """Row index of every step, -1 where the step is not free."""
        n = tokens.shape[0]
        mask = free_step_mask(lengths, self.max_len)
        rows = np.full((n, self.max_len), -1, dtype=np.int64)
        node = np.zeros(n, dtype=np.int64)
        offs = self._offsets(Xs) if n else np.zeros(0, dtype=np.int64)
        for t in range(self.max_len - 1):
            m = mask[:, t]
            rows[m, t] = offs[m] + node[m]
            nxt = np.where(m, self._child[np.maximum(node, 0), np.where(m, tokens[:, t], 0)], -1)
            node = np.maximum(nxt, 0)
        return rows

    def forward(self, Xs, tokens, lengths):
        rows = self.rows(Xs, tokens, lengths)
        logits = self.table[np.maximum(rows, 0)]
        logits[rows < 0] = 0.0
        return logits, rows

    def backward(self, rows, dlogits):
        grad = np.zeros_like(self.table)
        m = rows >= 0
        np.add.at(grad, rows[m], dlogits[m])
        return grad.ravel()

    def start(self, Xs):
        return (self._offsets(Xs), np.zeros(len(Xs), dtype=np.int64))

    def step_logits(self, state):
        offs, node = state
        return self.table[offs + node]

    def advance(self, state, tokens):
        offs, node = state
        nxt = self._child[node, np.where(tokens > 0, tokens, 0)]
        return offs, np.maximum(nxt, 0)

    def to_payload(self) -> dict:
        return _checkpoint_payload(
            self,
            {"n_content": self.vocab.n_content, "max_len": self.max_len, "inputs": [list(X) for X in self.inputs]},
        )


class NeuralPolicy(Policy):
    """Embedding -> tanh recurrent cell -> output projection.

    The input stream is ``X + (BOS,) + Y[:-1]``; the logits for ``y_t`` are
    read off the hidden state at position ``len(X) + t``.
    """

    kind = "neural"

    def __init__(self, vocab: Vocab, max_len: int, embed_dim: int = 16, hidden_dim: int = 32, params=None, seed: int = 0):
        self.vocab = vocab
        self.max_len = max_len
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        d, h, vin, v = embed_dim, hidden_dim, vocab.input_size, vocab.size
        self._shapes = [("E", (vin, d)), ("Wx", (d, h)), ("Wh", (h, h)), ("bh", (h,)), ("Wy", (h, v)), ("by", (v,))]
        n = sum(int(np.prod(s)) for _, s in self._shapes)
        if params is None:
            rng = np.random.default_rng(seed)
            parts = []
            for name, shape in self._shapes:
                if name.startswith("b"):
                    parts.append(np.zeros(shape))
                else:
                    parts.append(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape))
            params = np.concatenate([p.ravel() for p in parts])
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    def unpack(self, flat=None) -> dict[str, np.ndarray]:
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self._shapes:
            k = int(np.prod(shape))
            out[name] = flat[i : i + k].reshape(shape)
            i += k
        return out

    def with_params(self, params):
        return NeuralPolicy(self.vocab, self.max_len, self.embed_dim, self.hidden_dim, params)

    def _streams(self, Xs, tokens, lengths):
        n = tokens.shape[0]
        xlen = np.array([len(X) for X in Xs], dtype=np.int64)
        width = int(xlen.max(initial=0)) + self.max_len
        stream = np.full((n, width), self.vocab.pad, dtype=np.int64)
        for i, X in enumerate(Xs):
            stream[i, : len(X)] = X
            stream[i, len(X)] = self.vocab.bos
            k = max(int(lengths[i]) - 1, 0)
            stream[i, len(X) + 1 : len(X) + 1 + k] = tokens[i, :k]
        out_pos = xlen[:, None] + np.arange(self.max_len)[None, :]
        return stream, out_pos

    def forward(self, Xs, tokens, lengths):
        p = self.unpack()
        stream, out_pos = self._streams(Xs, tokens, lengths)
        n, width = stream.shape
        H = np.zeros((n, width + 1, self.hidden_dim))  # H[:, j+1] = state after stream[j]
        for j in range(width):
            H[:, j + 1] = np.tanh(p["E"][stream[:, j]] @ p["Wx"] + H[:, j] @ p["Wh"] + p["bh"])
        h_out = H[np.arange(n)[:, None], out_pos + 1]
        logits = h_out @ p["Wy"] + p["by"]
        return logits, (stream, out_pos, H, h_out)

    def backward(self, cache, dlogits):
        stream, out_pos, H, h_out = cache
        p = self.unpack()
        g = {k: np.zeros_like(v) for k, v in p.items()}
        n, width = stream.shape
        g["Wy"] = np.einsum("nth,ntv->hv", h_out, dlogits)
        g["by"] = dlogits.sum(axis=(0, 1))
        dH = np.zeros_like(H)
        np.add.at(dH, (np.repeat(np.arange(n), self.max_len), (out_pos + 1).ravel()), (dlogits @ p["Wy"].T).reshape(-1, self.hidden_dim))
        dh = np.zeros((n, self.hidden_dim))
        for j in range(width - 1, -1, -1):
            dh = dh + dH[:, j + 1]
            da = dh * (1.0 - H[:, j + 1] ** 2)
            g["Wx"] += p["E"][stream[:, j]].T @ da
            g["Wh"] += H[:, j].T @ da
            g["bh"] += da.sum(axis=0)
            np.add.at(g["E"], stream[:, j], da @ p["Wx"].T)
            dh = da @ p["Wh"].T
        return np.concatenate([g[name].ravel() for name, _ in self._shapes])

    def start(self, Xs):
        p = self.unpack()
        n = len(Xs)
        h = np.zeros((n, self.hidden_dim))
        xlen = np.array([len(X) for X in Xs], dtype=np.int64)
        width = int(xlen.max(initial=0)) + 1
        stream = np.full((n, width), self.vocab.pad, dtype=np.int64)
        for i, X in enumerate(Xs):
            stream[i, : len(X)] = X
            stream[i, len(X)] = self.vocab.bos
        for j in range(width):
            live = (j <= xlen)[:, None]
            h_new = np.tanh(p["E"][stream[:, j]] @ p["Wx"] + h @ p["Wh"] + p["bh"])
            h = np.where(live, h_new, h)
        return h

    def step_logits(self, h):
        p = self.unpack()
        return h @ p["Wy"] + p["by"]

    def advance(self, h, tokens):
        p = self.unpack()
        return np.tanh(p["E"][tokens] @ p["Wx"] + h @ p["Wh"] + p["bh"])

    def to_payload(self) -> dict:
        return _checkpoint_payload(
            self,
            {
                "n_content": self.vocab.n_content,
                "max_len": self.max_len,
                "embed_dim": self.embed_dim,
                "hidden_dim": self.hidden_dim,
            },
        )


# ---------------------------------------------------------------------------
# sequence-level quantities


def step_log_probs(policy: Policy, Xs, tokens, lengths, T: float = 1.0) -> np.ndarray:
    """Per-step log-probabilities of the realized tokens, zero off free steps."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    logits, _ = policy.forward(Xs, tokens, lengths)
    lp = log_softmax(logits / T)
    mask = free_step_mask(lengths, policy.max_len)
    safe = np.where(mask, tokens, 0)
    picked = np.take_along_axis(lp, safe[..., None], axis=-1)[..., 0]
    return np.where(mask, picked, 0.0)


def batch_log_prob(policy: Policy, Xs, Ys, T: float = 1.0) -> np.ndarray:
    Ys = [check_sequence(Y, policy.vocab, policy.max_len) for Y in Ys]
    tokens, lengths = pad_batch(Ys, policy.vocab, policy.max_len)
    return step_log_probs(policy, list(Xs), tokens, lengths, T).sum(axis=1)


def sequence_log_prob(policy: Policy, X, Y, T: float = 1.0) -> float:
    """log of the probability of ``Y`` given ``X`` at temperature ``T``."""
    return float(batch_log_prob(policy, [tuple(X)], [Y], T)[0])


def weighted_grad(policy: Policy, Xs, tokens, lengths, coefs) -> np.ndarray:
    """``sum_i coefs[i] * grad log pi(Y_i | X_i)`` at T=1, in one pass."""
    coefs = np.asarray(coefs, dtype=np.float64)
    logits, cache = policy.forward(Xs, tokens, lengths)
    probs = np.exp(log_softmax(logits))
    mask = free_step_mask(lengths, policy.max_len)
    onehot = np.zeros_like(probs)
    safe = np.where(mask, tokens, 0)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    dlogits = (onehot - probs) * (mask * coefs[:, None])[..., None]
    return policy.backward(cache, dlogits)


def grad_log_prob(policy: Policy, X, Y) -> np.ndarray:
    Y = check_sequence(Y, policy.vocab, policy.max_len)
    tokens, lengths = pad_batch([Y], policy.vocab, policy.max_len)
    return weighted_grad(policy, [tuple(X)], tokens, lengths, [1.0])


# ---------------------------------------------------------------------------
# MLE pretraining


@dataclass
class MLEConfig:
    lr: float = 1.0
    max_steps: int = 2000
    batch_size: int | None = None  # None: full batch
    eval_every: int = 20
    patience: int = 10
    val_fraction: float = 0.1
    max_grad_norm: float | None = None
    seed: int = 0


@dataclass
class MLEHistory:
    steps: list[int] = field(default_factory=list)
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    best_step: int = 0


def _mean_nll(policy, Xs, tokens, lengths) -> float:
    return float(-step_log_probs(policy, Xs, tokens, lengths).sum(axis=1).mean())


def mle_train(policy: Policy, data, config: MLEConfig | None = None, history: MLEHistory | None = None) -> Policy:
    """Teacher-forced maximum likelihood by plain gradient ascent.

    ``data`` is a list of ``(X, Y)`` pairs.  A ``val_fraction`` split drives
    early stopping; the parameters with the lowest validation NLL seen are
    returned.  With ``val_fraction == 0`` the training NLL is monitored.
    """
    config = config or MLEConfig()
    data = list(data)
    if not data:
        raise ValueError("mle_train needs at least one (X, Y) pair")
    rng = np.random.default_rng(config.seed)
    Xs = [check_input(X, policy.vocab) for X, _ in data]
    Ys = [check_sequence(Y, policy.vocab, policy.max_len) for _, Y in data]
    tokens, lengths = pad_batch(Ys, policy.vocab, policy.max_len)
    order = rng.permutation(len(data))
    n_val = int(round(config.val_fraction * len(data)))
    if n_val >= len(data):
        n_val = 0
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    tr_X = [Xs[i] for i in tr_idx]
    mon_idx = val_idx if n_val else tr_idx
    mon_X = [Xs[i] for i in mon_idx]

    history = history if history is not None else MLEHistory()
    policy = policy.copy()
    best = (_mean_nll(policy, mon_X, tokens[mon_idx], lengths[mon_idx]), policy.params.copy(), 0)
    bad = 0
    for step in range(1, config.max_steps + 1):
        if config.batch_size and config.batch_size < len(tr_idx):
            pick = rng.choice(len(tr_idx), size=config.batch_size, replace=False)
        else:
            pick = np.arange(len(tr_idx))
        sel = tr_idx[pick]
        grad = weighted_grad(policy, [tr_X[k] for k in pick], tokens[sel], lengths[sel], np.full(len(sel), 1.0 / len(sel)))
        if config.max_grad_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > config.max_grad_norm:
                grad = grad * (config.max_grad_norm / norm)
        policy.params = policy.params + config.lr * grad
        if step % config.eval_every == 0 or step == config.max_steps:
            nll = _mean_nll(policy, mon_X, tokens[mon_idx], lengths[mon_idx])
            history.steps.append(step)
            history.val_nll.append(nll)
            history.train_nll.append(_mean_nll(policy, tr_X, tokens[tr_idx], lengths[tr_idx]) if n_val else nll)
            if nll < best[0] - 1e-12:
                best, bad = (nll, policy.params.copy(), step), 0
            else:
                bad += 1
                if bad >= config.patience:
                    break
    history.best_step = best[2]
    return policy.with_params(best[1])


# ---------------------------------------------------------------------------
# checkpoints


def dumps_policy(policy: Policy) -> str:
    """Canonical JSON text; identical params give identical bytes."""
    return json.dumps(policy.to_payload(), sort_keys=True, separators=(",", ":")) + "\n"


def loads_policy(text: str) -> Policy:
    payload = json.loads(text)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a policy checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    dims = payload["dims"]
    vocab = Vocab(dims["n_content"])
    params = np.array(payload["params"], dtype=np.float64)
    if payload["kind"] == "tabular":
        return TabularPolicy(vocab, dims["max_len"], [tuple(X) for X in dims["inputs"]], params)
    if payload["kind"] == "neural":
        return NeuralPolicy(vocab, dims["max_len"], dims["embed_dim"], dims["hidden_dim"], params)
    raise ValueError(f"unknown policy kind {payload['kind']!r}")


def save_policy(policy: Policy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_policy(policy))


def load_policy(path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return loads_policy(fh.read())


def per_sample_grads(policy: Policy, Xs, tokens, lengths, coefs) -> np.ndarray:
    """Dense ``(n, n_params)`` matrix whose rows are ``coefs[i] * grad log pi(Y_i)``."""
    coefs = np.asarray(coefs, dtype=np.float64)
    n = tokens.shape[0]
    if isinstance(policy, TabularPolicy):
        logits, rows = policy.forward(Xs, tokens, lengths)
        probs = np.exp(log_softmax(logits))
        mask = free_step_mask(lengths, policy.max_len)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, np.where(mask, tokens, 0)[..., None], 1.0, axis=-1)
        d = (onehot - probs) * (mask * coefs[:, None])[..., None]
        out = np.zeros((n, policy.table.shape[0], policy.vocab.size))
        ii = np.broadcast_to(np.arange(n)[:, None], rows.shape)
        np.add.at(out, (ii[mask], rows[mask]), d[mask])
        return out.reshape(n, -1)
    out = np.zeros((n, policy.n_params))
    for i in range(n):
        out[i] = weighted_grad(policy, [Xs[i]], tokens[i : i + 1], lengths[i : i + 1], coefs[i : i + 1])
    return out


def next_token_logits(policy: Policy, Xs, prefixes) -> np.ndarray:
    """Logits for the token following each (content-only) prefix."""
    n = len(prefixes)
    tokens = np.full((n, policy.max_len), policy.vocab.pad, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, pre in enumerate(prefixes):
        if len(pre) >= policy.max_len - 1:
            raise ValueError("prefix leaves no free step before the forced EOS")
        tokens[i, : len(pre)] = pre
        tokens[i, len(pre)] = EOS
        lengths[i] = len(pre) + 1
    logits, _ = policy.forward(list(Xs), tokens, lengths)
    return logits[np.arange(n), lengths - 1]
