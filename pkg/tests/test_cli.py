import csv
import json
import os

import pytest

from coldgan.cli import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TINY = os.path.join(ROOT, "configs", "tiny.json")
FAST = ["--set", "mle.max_steps=150", "--set", "trainer.epochs=1", "--set", "trainer.steps_per_epoch=3",
        "--set", "trainer.disc_samples=200", "--set", "trainer.disc_steps=30"]


@pytest.fixture(autouse=True)
def no_output_root(monkeypatch):
    monkeypatch.delenv("COLDGAN_OUTPUT_ROOT", raising=False)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["pretrain", "-c", TINY, "--out", str(out)] + FAST) == 0
    return out


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_pretrain_artifacts_and_rerun(pretrained, tmp_path):
    for name in ["generator_mle.json", "mle_log.csv", "mle_curve.png", "resolved_config.json"]:
        assert (pretrained / name).is_file()
    assert run("pretrain", "-c", TINY, "--out", tmp_path, *FAST) == 0
    assert read(tmp_path / "generator_mle.json") == read(pretrained / "generator_mle.json")
    assert read(tmp_path / "mle_log.csv") == read(pretrained / "mle_log.csv")
    resolved = json.loads((pretrained / "resolved_config.json").read_text())
    assert resolved["mle"]["max_steps"] == 150 and resolved["output_dir"] == str(pretrained)


def test_config_without_data_is_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"task": "unconditional"}))
    assert run("pretrain", "-c", bad, "--out", tmp_path) == 2
    assert run("pretrain", "--out", tmp_path) == 2
    assert run("pretrain", "-c", TINY, "--set", "data.colour=3") == 2


def test_train_needs_a_checkpoint(tmp_path):
    assert run("train", "-c", TINY, "--out", tmp_path) == 2


def test_zero_epochs_copies_checkpoint(pretrained):
    assert run("train", "-c", TINY, "--out", pretrained, "--name", "copy", "--epochs", 0) == 0
    assert read(pretrained / "copy" / "generator_final.json") == read(pretrained / "generator_mle.json")


def test_train_writes_reproducible_log(pretrained):
    assert run("train", "-c", TINY, "--out", pretrained, "--name", "a", *FAST) == 0
    assert run("train", "-c", TINY, "--out", pretrained, "--name", "b", *FAST) == 0
    a, b = pretrained / "a", pretrained / "b"
    assert read(a / "train_log.csv") == read(b / "train_log.csv")
    for name in ["generator_final.json", "final_eval.json", "disc_score.png", "oracle_nll.png",
                 "resolved_config.json", "checkpoints/generator_epoch001.json"]:
        assert (a / name).is_file()
    assert json.loads((a / "final_eval.json").read_text())["epochs"] == 1


def test_verify_list(capsys):
    assert run("verify", "--list") == 0
    names = [line.split(":")[0] for line in capsys.readouterr().out.splitlines()]
    assert names == ["is-unbiased", "clipped-unbiased", "grad-fd", "support", "sampler-normalized"]


def test_verify_passes_and_reports(tmp_path):
    assert run("verify", "--out", tmp_path, "--only", "is-unbiased", "--only", "sampler-normalized",
               "--set", "verify.n_is=100000") == 0
    summary = json.loads((tmp_path / "verify_summary.json").read_text())
    assert summary == {"passed": True, "checks": {"is-unbiased": True, "sampler-normalized": True}}
    assert (tmp_path / "resolved_config.verify.json").is_file()
    rows = list(csv.reader(open(tmp_path / "verify_report.csv")))
    assert rows[0] == ["check", "passed", "detail"] and len(rows) == 1 + 3 + 5


def test_corrupted_weights_fail_verification(tmp_path):
    assert run("verify", "--out", tmp_path, "--only", "is-unbiased", "--corrupt-is-weight", 2.0,
               "--set", "verify.n_is=20000") == 1


def test_verify_budget_and_usage_errors(tmp_path):
    assert run("verify", "--out", tmp_path, "--set", "data.n_content=10", "--set", "data.max_len=8") == 3
    assert run("verify", "--out", tmp_path, "--only", "nope") == 2
    assert run("verify", "--out", tmp_path, "--set", "task=conditional-synthetic", "--set", "data.n_inputs=2") == 2


def test_unknown_probe_is_a_usage_error():
    with pytest.raises(SystemExit) as err:
        run("probe", "entropy", "-c", TINY)
    assert err.value.code == 2


def test_probe_cross_temp(pretrained):
    assert run("probe", "cross-temp", "-c", TINY, "--out", pretrained, "--temps", "0,1",
               "--set", "probe.n_train=200", "--set", "probe.n_eval=100", "--set", "probe.disc_steps=20") == 0
    assert (pretrained / "probe_cross_temp.csv").is_file()
    assert (pretrained / "probe_cross_temp.png").is_file()
    assert (pretrained / "resolved_config.probe-cross-temp.json").is_file()


def test_curve_points_and_determinism(pretrained, tmp_path):
    args = ["curve", "-c", TINY, "--temps", "0.5,0.8,1.0,1.5", "--n-samples", 50,
            "--set", "curve.n_references=200"]
    assert run(*args, "--out", pretrained) == 0
    rows = list(csv.DictReader(open(pretrained / "curve.csv")))
    mle = [r for r in rows if r["series"] == "mle"]
    assert [float(r["temperature"]) for r in mle] == [0.5, 0.8, 1.0, 1.5]
    first = read(pretrained / "curve.csv")
    assert run(*args, "--out", pretrained) == 0
    assert read(pretrained / "curve.csv") == first
    for name in ["plot_data.csv", "curve.png", "resolved_config.curve.json"]:
        assert (pretrained / name).is_file()


def test_gen_prints_samples(pretrained, capsys):
    assert run("gen", "-c", TINY, "--out", pretrained, "--n", 5, "--spec", "temperature(0.5)") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    assert run("gen", "-c", TINY, "--out", pretrained, "--spec", "beam(2)") == 2


def test_probe_past_columns_from_checkpoint_lag(pretrained):
    assert run("train", "-c", TINY, "--out", pretrained, "--name", "lag", *FAST, "--set", "trainer.epochs=2") == 0
    assert run("probe", "cross-temp", "-c", TINY, "--out", pretrained, "--temps", "0,1",
               "--checkpoint", pretrained / "lag" / "generator_final.json",
               "--set", "probe.n_train=200", "--set", "probe.n_eval=100", "--set", "probe.disc_steps=20") == 0
    header = (pretrained / "probe_cross_temp.csv").read_text().splitlines()[0]
    assert header == "discriminator,human,T=0,T=1,past T=0,past T=1"
