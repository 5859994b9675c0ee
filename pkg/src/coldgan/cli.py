"""Command-line entry point: ``coldgan <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error (including missing checkpoints), 3 enumeration budget exceeded.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor

from . import plotting
from . import runconfig as rc
from .discriminator import matched_specialization, probe_cross_temperature, probe_prefix_accuracy
from .metrics import (
    binned_csv,
    bleu,
    curve_csv,
    length_binned_report,
    oracle_nll,
    plot_data,
    quality_diversity_curve,
)
from .oracle import BudgetExceededError, count_sequences
from .sampling import greedy_decode, parse_spec, sample_batch
from .seqmodel import MLEHistory, Vocab, load_policy, mle_train, save_policy
from .trainer import corrupted_weights, train, write_log_csv
from .verification import CHECKS

log = logging.getLogger("coldgan")

MLE_CHECKPOINT = "generator_mle.json"
FINAL_CHECKPOINT = "generator_final.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _config(args, require_data=True) -> dict:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"trainer.epochs={args.epochs}")
    if getattr(args, "sampler", None) is not None:
        overrides.append(f"trainer.sampler={json.dumps(args.sampler)}")
    if args.config is None and require_data:
        raise rc.ConfigError("a config file is required (--config)")
    return rc.load_config(args.config, overrides, require_data=require_data)


def _load_checkpoint(path: str):
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_policy(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def _evaluator(cfg, data):
    """Oracle NLL: exact when the instance is enumerable, else a fixed-seed sample."""
    if rc.enumerable(cfg):
        return lambda policy: oracle_nll(policy, data)
    return lambda policy: oracle_nll(policy, data, n=2000, rng=rc.rng_for(cfg, "eval"))


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = rc.output_dir(cfg)
    rc.write_resolved(cfg, out)
    data = rc.build_data(cfg)
    pairs = data.sample(cfg["data"]["n_train"], rc.rng_for(cfg, "data"))
    history = MLEHistory()
    policy = mle_train(rc.build_policy(cfg, data), pairs, rc.mle_config(cfg), history)
    save_policy(policy, os.path.join(out, MLE_CHECKPOINT))
    with open(os.path.join(out, "mle_log.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_nll", "val_nll"])
        for row in zip(history.steps, history.train_nll, history.val_nll):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    plotting.mle_curve(history, os.path.join(out, "mle_curve.png"))
    nll = _evaluator(cfg, data)(policy)
    print(f"pretrained {cfg['model']['kind']} policy: best step {history.best_step}, oracle NLL {nll:.4f}")
    print(f"checkpoint: {os.path.join(out, MLE_CHECKPOINT)}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = rc.output_dir(cfg)
    run_dir = os.path.join(out, args.name)
    init = args.init or os.path.join(out, MLE_CHECKPOINT)
    generator = _load_checkpoint(init)
    os.makedirs(run_dir, exist_ok=True)
    rc.write_resolved(cfg, run_dir)
    log_path = os.path.join(run_dir, "train_log.csv")
    final_path = os.path.join(run_dir, FINAL_CHECKPOINT)
    tcfg = rc.train_config(cfg)
    if tcfg.epochs == 0:
        shutil.copyfile(init, final_path)
        write_log_csv([], log_path)
        print(f"epochs=0: copied {init} to {final_path}")
        return 0
    data = rc.build_data(cfg)
    evaluate = _evaluator(cfg, data)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    result = train(generator, rc.build_discriminator(cfg, data), data, tcfg, evaluate, ckpt_dir, log_path)
    write_log_csv(result.log, log_path)
    save_policy(result.generator, final_path)
    start, final = result.log[0]["oracle_nll"], result.log[-1]["oracle_nll"]
    summary = {"sampler": tcfg.sampler, "epochs": tcfg.epochs, "initial_oracle_nll": start,
               "final_oracle_nll": final, "relative_change": (final - start) / start}
    _write(os.path.join(run_dir, "final_eval.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    plotting.training_curves({args.name: result.log}, os.path.join(run_dir, "disc_score.png"))
    plotting.training_curves({args.name: result.log}, os.path.join(run_dir, "oracle_nll.png"), key="oracle_nll")
    print(f"{tcfg.sampler}: oracle NLL {start:.4f} -> {final:.4f} ({100 * summary['relative_change']:+.2f}%)")
    print(f"artifacts: {run_dir}")
    return 0


def _run_check(name, kwargs, corrupt):
    with corrupted_weights(corrupt):
        return CHECKS[name](**kwargs)


def cmd_verify(args) -> int:
    if args.list:
        for name, fn in CHECKS.items():
            print(f"{name}: {fn.__doc__.strip().splitlines()[0]}")
        return 0
    cfg = _config(args, require_data=False)
    if cfg["task"] != "unconditional":
        raise rc.ConfigError("verify needs an unconditional task")
    names = args.only or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown check(s) {unknown}; choose from {list(CHECKS)}")
    d, v = cfg["data"], cfg["verify"]
    need = count_sequences(Vocab(d["n_content"]), d["max_len"])
    if need > v["budget"]:
        raise BudgetExceededError(need, v["budget"])
    data = rc.build_data(cfg)
    kwargs = {
        "is-unbiased": {"data": data, "N": v["n_is"], "seed": v["seed"]},
        "clipped-unbiased": {"data": data, "N": v["n_clipped"], "seed": v["seed"]},
        "grad-fd": {"n_probes": v["fd_probes"], "seed": v["seed"]},
        "support": {"n_sequences": v["support_sequences"], "n_specs": v["support_specs"], "seed": v["seed"]},
        "sampler-normalized": {"data": data, "seed": v["seed"]},
    }
    corrupt = args.corrupt_is_weight
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            results = list(pool.map(_run_check, names, [kwargs[n] for n in names], [corrupt] * len(names)))
    else:
        results = [_run_check(n, kwargs[n], corrupt) for n in names]
    for r in results:
        print(r)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    out = rc.output_dir(cfg)
    rc.write_resolved(cfg, out, "resolved_config.verify.json")
    with open(os.path.join(out, "verify_report.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "passed", "detail"])
        for r in results:
            for line in r.lines:
                w.writerow([r.name, int(r.passed), line])
    summary = {"passed": not failed, "checks": {r.name: r.passed for r in results}}
    _write(os.path.join(out, "verify_summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 1 if failed else 0


def cmd_probe(args) -> int:
    cfg = _config(args)
    out = rc.output_dir(cfg)
    generator = _load_checkpoint(args.checkpoint or os.path.join(out, MLE_CHECKPOINT))
    data = rc.build_data(cfg)
    pcfg = rc.probe_config(cfg)
    rc.write_resolved(cfg, out, f"resolved_config.probe-{args.probe}.json")
    if args.probe == "cross-temp":
        temps = rc.parse_temps(args.temps if args.temps is not None else cfg["probe"]["temps"])
        past_path = args.past or _lagged_checkpoint(args.checkpoint, cfg["probe"]["past_lag"])
        past = _load_checkpoint(past_path) if past_path else None
        matrix = probe_cross_temperature(generator, data, temps, pcfg, past)
        path = os.path.join(out, "probe_cross_temp.csv")
        _write(path, matrix.to_csv())
        plotting.score_matrix(matrix, os.path.join(out, "probe_cross_temp.png"))
        print(matrix.to_csv(), end="")
        spec = matched_specialization(matrix, temps)
        print(f"specialized rows: {sum(spec)}/{len(spec)}")
    else:
        result = probe_prefix_accuracy(generator, data, config=pcfg)
        path = os.path.join(out, "probe_prefix_acc.csv")
        _write(path, result.to_csv())
        plotting.prefix_accuracy(result, os.path.join(out, "probe_prefix_acc.png"))
        print(result.to_csv(), end="")
    print(f"written: {path}")
    return 0


def _lagged_checkpoint(path, lag):
    """Checkpoint ``lag`` epochs before ``path`` inside a train run, if it exists.

    Works for ``.../checkpoints/generator_epochNNN.json`` and for a run's
    ``generator_final.json`` (whose epoch is the newest saved checkpoint).
    """
    if not path or lag < 1:
        return None
    path = os.path.abspath(path)
    if os.path.basename(path) == FINAL_CHECKPOINT:
        ckpt_dir = os.path.join(os.path.dirname(path), "checkpoints")
    else:
        ckpt_dir = os.path.dirname(path)
    epochs = sorted(glob.glob(os.path.join(ckpt_dir, "generator_epoch*.json")))
    if not epochs:
        return None
    names = [os.path.basename(e) for e in epochs]
    current = names.index(os.path.basename(path)) if os.path.basename(path) in names else len(names) - 1
    epoch = int(names[current][len("generator_epoch"):-len(".json")]) - lag
    if epoch < 1:
        return None
    candidate = os.path.join(ckpt_dir, f"generator_epoch{epoch:03d}.json")
    return candidate if os.path.isfile(candidate) else None


def _named_checkpoints(specs, out):
    found = {}
    if specs:
        for s in specs:
            name, sep, path = s.partition("=")
            if not sep:
                raise UsageError(f"--checkpoint expects NAME=PATH, got {s!r}")
            found[name] = path
        return found
    found["mle"] = os.path.join(out, MLE_CHECKPOINT)
    for path in sorted(glob.glob(os.path.join(out, "*", FINAL_CHECKPOINT))):
        found[os.path.basename(os.path.dirname(path))] = path
    return found


def cmd_curve(args) -> int:
    cfg = _config(args)
    if cfg["task"] != "unconditional":
        raise rc.ConfigError("curve needs an unconditional task")
    out = rc.output_dir(cfg)
    c = cfg["curve"]
    temps = rc.parse_temps(args.temps if args.temps is not None else c["temps"])
    if any(t == 0 for t in temps):
        raise rc.ConfigError("curve temperatures must be positive")
    n_samples = args.n_samples or c["n_samples"]
    data = rc.build_data(cfg)
    refs = [Y for _, Y in data.sample(c["n_references"], rc.rng_for(cfg, "references"))]
    series = {}
    for name, path in _named_checkpoints(args.checkpoint, out).items():
        policy = _load_checkpoint(path)
        series[name] = quality_diversity_curve(policy, refs, temps, n_samples, rc.rng_for(cfg, "curve/" + name),
                                               c["max_n"])
    rc.write_resolved(cfg, out, "resolved_config.curve.json")
    text = "".join(curve_csv(pts, name) if i == 0 else curve_csv(pts, name).split("\n", 1)[1]
                   for i, (name, pts) in enumerate(series.items()))
    _write(os.path.join(out, "curve.csv"), text)
    with open(os.path.join(out, "plot_data.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_neg_bleu", "y_self_bleu", "series"])
        for x, y, name in plot_data(series):
            w.writerow([repr(x), repr(y), name])
    plotting.quality_diversity(series, os.path.join(out, "curve.png"))
    print(text, end="")
    print(f"written: {os.path.join(out, 'curve.csv')}")
    return 0


def cmd_bins(args) -> int:
    cfg = _config(args)
    out = rc.output_dir(cfg)
    run = _load_checkpoint(args.checkpoint or os.path.join(out, "train", FINAL_CHECKPOINT))
    base = _load_checkpoint(args.baseline or os.path.join(out, MLE_CHECKPOINT))
    data = rc.build_data(cfg)
    pairs = data.sample(args.n, rc.rng_for(cfg, "bins"))
    decoded = {}

    def decode(policy, X):
        key = (id(policy), X)
        if key not in decoded:
            decoded[key] = greedy_decode(policy, X, args.beam)
        return decoded[key]

    lengths, scores, base_scores = [], [], []
    for X, Y in pairs:
        lengths.append(len(Y) - 1)
        scores.append(bleu([decode(run, X)], [[Y]], args.max_n))
        base_scores.append(bleu([decode(base, X)], [[Y]], args.max_n))
    try:
        edges = [float(e) for e in args.edges.split(",")]
    except ValueError:
        raise UsageError(f"bad bin edges {args.edges!r}") from None
    rows = length_binned_report(lengths, scores, edges, baseline=base_scores)
    rc.write_resolved(cfg, out, "resolved_config.bins.json")
    _write(os.path.join(out, "length_bins.csv"), binned_csv(rows))
    plotting.length_bins(rows, os.path.join(out, "length_bins.png"), ylabel="BLEU gain over baseline")
    print(binned_csv(rows), end="")
    return 0


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = rc.output_dir(cfg)
    policy = _load_checkpoint(args.checkpoint or os.path.join(out, MLE_CHECKPOINT))
    try:
        spec = parse_spec(args.spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = rc.build_data(cfg)
    rng = rc.rng_for(cfg, "gen")
    Xs = [data.inputs[i] for i in rng.integers(len(data.inputs), size=args.n)]
    batch = sample_batch(policy, Xs, spec, rng)
    for X, Y in zip(batch.Xs, batch.sequences):
        y = " ".join(map(str, Y))
        print(f"{' '.join(map(str, X))} ||| {y}" if X else y)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coldgan", description="Cold-sampling GAN training on synthetic text.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sampler=False, epochs=False):
        p.add_argument("-c", "--config", help="JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--out", help=f"output directory (relative paths go under ${rc.OUTPUT_ROOT_ENV} if set)")
        p.add_argument("--workers", type=int, help="worker processes (default 1, serial)")
        if sampler:
            p.add_argument("--sampler", help="behaviour sampler, e.g. 'temperature(0.3)'")
        if epochs:
            p.add_argument("--epochs", type=int, help="adversarial epochs (0 copies the checkpoint)")
        return p

    p = common(sub.add_parser("pretrain", help="MLE pretraining"))
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("train", help="adversarial training from a pretrained checkpoint"), True, True)
    p.add_argument("--name", default="train", help="run subdirectory (default: train)")
    p.add_argument("--init", help="starting checkpoint (default: <out>/generator_mle.json)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("verify", help="estimator, gradient and support checks"))
    p.add_argument("--list", action="store_true", help="list check names and exit")
    p.add_argument("--only", action="append", metavar="CHECK", help="run only this check (repeatable)")
    p.add_argument("--corrupt-is-weight", type=float, default=1.0, metavar="FACTOR",
                   help="test hook: multiply every importance weight by FACTOR")
    p.set_defaults(func=cmd_verify)

    p = common(sub.add_parser("probe", help="discriminator probes"))
    p.add_argument("probe", choices=["cross-temp", "prefix-acc"])
    p.add_argument("--checkpoint", help="generator (default: <out>/generator_mle.json)")
    p.add_argument("--past", help="older generator checkpoint for the 'past T' columns"
                   " (default: probe.past_lag epochs before --checkpoint when it belongs to a train run)")
    p.add_argument("--temps", help="comma-separated temperatures, 0 = greedy")
    p.set_defaults(func=cmd_probe)

    p = common(sub.add_parser("curve", help="negative-BLEU vs self-BLEU temperature sweep"))
    p.add_argument("--temps", help="comma-separated temperatures")
    p.add_argument("--n-samples", type=int, help="samples per temperature")
    p.add_argument("--checkpoint", action="append", metavar="NAME=PATH",
                   help="series to plot (default: mle plus every <out>/*/generator_final.json)")
    p.set_defaults(func=cmd_curve)

    p = common(sub.add_parser("bins", help="length-binned BLEU gain of one checkpoint over another"))
    p.add_argument("--checkpoint", help="evaluated generator (default: <out>/train/generator_final.json)")
    p.add_argument("--baseline", help="baseline generator (default: <out>/generator_mle.json)")
    p.add_argument("--n", type=int, default=2000, help="evaluation pairs")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-n", type=int, default=2)
    p.add_argument("--edges", default="0,2,4,6,8", help="comma-separated bin edges on target length")
    p.set_defaults(func=cmd_bins)

    p = common(sub.add_parser("gen", help="print samples"))
    p.add_argument("--checkpoint", help="generator (default: <out>/generator_mle.json)")
    p.add_argument("--spec", default="temperature(1.0)", help="sampler spec")
    p.add_argument("--n", type=int, default=10)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (rc.ConfigError, UsageError) as exc:
        print(f"coldgan: error: {exc}", file=sys.stderr)
        return 2
    except BudgetExceededError as exc:
        print(f"coldgan: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
