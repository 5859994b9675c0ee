"""Run configuration: defaults, JSON loading, overrides, object builders.

A run config is one JSON document.  Sections missing from the file take the
defaults below, except ``data`` which must be present.  Command-line
``--set section.key=value`` overrides are applied last; values are parsed
as JSON when possible and kept as strings otherwise.

Seeds: every component draws from
``numpy.random.default_rng(SeedSequence([root_seed, crc32(component)]))``,
so adding a component never shifts another one's stream.
"""
from __future__ import annotations

import copy
import json
import math
import os
import zlib

import numpy as np

from .discriminator import DiscConfig, ProbeConfig, make_discriminator
from .oracle import MarkovData, count_sequences
from .seqmodel import MLEConfig, NeuralPolicy, TabularPolicy, Vocab
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "COLDGAN_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "task": "unconditional",
    "seed": 0,
    "output_dir": "run",
    "workers": 1,
    "data": {
        "kind": "markov",
        "n_content": 4,
        "max_len": 4,
        "order": 2,
        "concentration": 0.3,
        "eos_weight": 0.5,
        "n_inputs": 0,
        "structure": "independent",
        "seed": 0,
        "n_train": 2000,
    },
    "model": {"kind": "tabular", "embed_dim": 16, "hidden_dim": 32, "init_seed": 0},
    "mle": {"lr": 4.0, "max_steps": 3000, "batch_size": None, "eval_every": 20, "patience": 20, "val_fraction": 0.1,
            "max_grad_norm": None},
    "trainer": {
        "sampler": "mixture(eps=0.9,p=0.95,gamma=0.2)",
        "clip": 5.0,
        "lr": 0.05,
        "epochs": 10,
        "batch_size": 64,
        "steps_per_epoch": 50,
        "replay_window": None,
        "replay_fraction": 0.01,
        "disc_steps": 200,
        "disc_lr": 2.0,
        "disc_samples": 1000,
        "mle_mix": 0.0,
    },
    "disc": {"kind": "ngram"},
    "probe": {"temps": [0, 1, "inf"], "n_train": 2000, "n_eval": 1000, "disc_steps": 300, "past_lag": 1},
    "curve": {"temps": [0.5, 0.8, 1.0, 1.5], "n_samples": 400, "n_references": 2000, "max_n": 4},
    "verify": {"n_is": 100000, "n_clipped": 200000, "fd_probes": 100, "support_sequences": 10000,
               "support_specs": 100, "seed": 0, "budget": 1000000},
}

SECTIONS = [k for k, v in DEFAULTS.items() if isinstance(v, dict)]


def _merge(base: dict, new: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config section {path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, val = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config section in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = parse_value(val.strip())


def load_config(path: str | None, overrides=(), require_data: bool = True) -> dict:
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    if require_data and "data" not in raw:
        raise ConfigError("config has no 'data' section")
    cfg = _merge(DEFAULTS, raw)
    for o in overrides:
        apply_override(cfg, o)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["task"] not in ("unconditional", "conditional-synthetic"):
        raise ConfigError(f"unknown task {cfg['task']!r}")
    d = cfg["data"]
    if d["kind"] != "markov":
        raise ConfigError(f"unknown data kind {d['kind']!r}")
    if d["structure"] not in ("independent", "shift"):
        raise ConfigError(f"unknown data structure {d['structure']!r}")
    if cfg["task"] == "conditional-synthetic" and d["n_inputs"] < 1:
        raise ConfigError("conditional-synthetic task needs data.n_inputs >= 1")
    if cfg["task"] == "unconditional" and d["n_inputs"] != 0:
        raise ConfigError("unconditional task needs data.n_inputs == 0")
    if d["n_inputs"] > d["n_content"]:
        raise ConfigError("data.n_inputs cannot exceed data.n_content")
    if cfg["model"]["kind"] not in ("tabular", "neural"):
        raise ConfigError(f"unknown model kind {cfg['model']['kind']!r}")
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    try:
        train_config(cfg).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def output_dir(cfg: dict) -> str:
    out = cfg["output_dir"]
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def write_resolved(cfg: dict, directory: str, name: str = "resolved_config.json") -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def rng_for(cfg: dict, component: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg["seed"]), zlib.crc32(component.encode())]))


# ---------------------------------------------------------------------------
# builders


def build_data(cfg: dict) -> MarkovData:
    d = cfg["data"]
    vocab = Vocab(d["n_content"])
    inputs = [(i,) for i in range(1, d["n_inputs"] + 1)] or [()]
    if d["structure"] == "shift" and len(inputs) > 1:
        base = MarkovData.random(vocab, d["max_len"], d["order"], [()], d["concentration"], d["eos_weight"], d["seed"])
        return shifted_chain(base, inputs)
    return MarkovData.random(vocab, d["max_len"], d["order"], inputs, d["concentration"], d["eos_weight"], d["seed"])


def shifted_chain(base: MarkovData, inputs) -> MarkovData:
    """Input ``(x,)`` relabels content token ``c`` as ``(c - 1 + x - 1) % n + 1`` in the base chain."""
    vocab = base.vocab
    n = vocab.n_content
    A = vocab.input_size
    tables = []
    for (x,) in inputs:
        shift = x - 1

        def relabel(t):
            return (t - 1 + shift) % n + 1 if 1 <= t <= n else t

        tab = np.empty_like(base.tables[0])
        for ctx in range(A**base.order):
            digits, rem = [], ctx
            for _ in range(base.order):
                digits.append(rem % A)
                rem //= A
            digits = digits[::-1]
            src = 0
            for t in digits:
                inv = (t - 1 - shift) % n + 1 if 1 <= t <= n else t
                src = src * A + inv
            row = base.tables[0, src]
            new = np.empty_like(row)
            new[0] = row[0]
            for c in range(1, n + 1):
                new[relabel(c)] = row[c]
            tab[ctx] = new
        tables.append(tab)
    return MarkovData(vocab, base.max_len, np.array(tables), base.order, inputs)


def build_policy(cfg: dict, data):
    m = cfg["model"]
    if m["kind"] == "tabular":
        return TabularPolicy(data.vocab, data.max_len, data.inputs)
    return NeuralPolicy(data.vocab, data.max_len, m["embed_dim"], m["hidden_dim"], seed=m["init_seed"])


def mle_config(cfg: dict) -> MLEConfig:
    return MLEConfig(seed=int(cfg["seed"]), **cfg["mle"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=int(cfg["seed"]), **cfg["trainer"])


def build_discriminator(cfg: dict, data):
    return make_discriminator(cfg["disc"]["kind"], data.vocab, data.max_len, int(cfg["seed"]))


def probe_config(cfg: dict) -> ProbeConfig:
    p = cfg["probe"]
    return ProbeConfig(n_train=p["n_train"], n_eval=p["n_eval"], disc=DiscConfig(steps=p["disc_steps"]),
                       kind=cfg["disc"]["kind"], seed=int(cfg["seed"]))


def parse_temps(values) -> list[float]:
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    out = []
    for v in values:
        t = float(v)
        if math.isnan(t) or t < 0:
            raise ConfigError(f"bad temperature {v!r}")
        out.append(t)
    if not out:
        raise ConfigError("need at least one temperature")
    return out


def enumerable(cfg: dict, budget: int = 10**6) -> bool:
    d = cfg["data"]
    return count_sequences(Vocab(d["n_content"]), d["max_len"]) <= budget
