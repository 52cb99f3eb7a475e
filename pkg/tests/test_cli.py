import csv
from pathlib import Path

import numpy as np
import pytest

from resswitch.checkpoint import load_checkpoint, read_manifest
from resswitch.cli import main
from resswitch.config import ConfigError, load_config

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml")


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", SMOKE, "--out", str(out)]) == 0
    return out


def test_train_layout(trained_run):
    assert (trained_run / "config.yaml").exists()
    ck = trained_run / "checkpoints" / "model" / "final"
    assert read_manifest(ck)["banks"] == "16,12,8"
    assert len(read_csv(trained_run / "metrics" / "model.csv")) == 2
    assert not (trained_run / ".lock").exists()


def test_config_snapshot_reproduces(trained_run):
    assert load_config(trained_run / "config.yaml") == load_config(SMOKE)


def test_train_individual(tmp_path):
    code = main(["train", "--config", SMOKE, "--out", str(tmp_path), "--set", "train.mode=individual",
                 "--set", "epochs=1"])
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["r12", "r16", "r8"]
    for r in (16, 12, 8):
        assert len(read_csv(tmp_path / "metrics" / f"r{r}.csv")) == 1
        assert load_checkpoint(tmp_path / "checkpoints" / f"r{r}" / "final").profile.resolutions == (r,)


def test_eval_profile_and_interpolated(trained_run, capsys):
    ck = str(trained_run / "checkpoints" / "model" / "final")
    out = trained_run / "eval_a"
    assert main(["eval", "--checkpoint", ck, "--out", str(out)]) == 0
    rows = read_csv(out / "eval.csv")
    assert [int(r["resolution"]) for r in rows] == [16, 12, 8]
    assert main(["eval", "--checkpoint", ck, "--resolutions", "14,10", "--out", str(out)]) == 0
    rows = read_csv(out / "eval.csv")
    assert [r["bank"] for r in rows] == ["interpolated", "interpolated"]
    assert all(0 <= float(r["top1"]) <= float(r["top5"]) <= 100 for r in rows)
    assert int(rows[0]["madds"]) > int(rows[1]["madds"])


def test_eval_usage_errors(trained_run):
    ck = str(trained_run / "checkpoints" / "model" / "final")
    assert main(["eval", "--checkpoint", ck, "--resolutions", ""]) == 2
    assert main(["eval", "--checkpoint", ck, "--resolutions", "20"]) == 2
    assert main(["eval", "--checkpoint", ck, "--resolutions", "a,b"]) == 2


def test_analyze_kinds(trained_run):
    ck = str(trained_run / "checkpoints" / "model" / "final")
    out = trained_run / "reports"
    assert main(["analyze", "--checkpoint", ck, "--kind", "disagreement", "--out", str(out)]) == 0
    lines = (out / "disagreement.csv").read_text().splitlines()
    assert len(lines) == 4 and all(len(line.split(",")) == 4 for line in lines)
    assert main(["analyze", "--checkpoint", ck, "--kind", "alpha", "--out", str(out)]) == 0
    alpha = [float(r["alpha"]) for r in read_csv(out / "alpha.csv")]
    assert len(alpha) == 3 and sum(alpha) == pytest.approx(1, abs=1e-5)
    assert main(["analyze", "--checkpoint", ck, "--kind", "gap-cdf", "--resolutions", "16",
                 "--out", str(out)]) == 0
    assert {p.name for p in out.glob("gap_cdf_16_*.csv")} == {"gap_cdf_16_test.csv", "gap_cdf_16_train.csv"}
    assert main(["analyze", "--checkpoint", ck, "--kind", "bn-summary", "--out", str(out)]) == 0
    assert {r["param"] for r in read_csv(out / "bn_summary.csv")} == {"gamma", "beta", "mu", "sigma"}
    assert main(["analyze", "--checkpoint", ck, "--kind", "saliency"]) == 2


def test_interpolate_and_export(trained_run):
    ck = str(trained_run / "checkpoints" / "model" / "final")
    out = trained_run / "banks"
    assert main(["interpolate-bn", "--checkpoint", ck, "--resolutions", "14", "--out", str(out)]) == 0
    with np.load(out / "bn_bank_14.npz") as npz:
        assert all(k.startswith("bn/14/") for k in npz.files)
    assert main(["interpolate-bn", "--checkpoint", ck, "--out", str(out)]) == 2
    assert main(["export", "--checkpoint", ck, "--resolutions", "12,10", "--out", str(trained_run / "exp")]) == 0
    single = load_checkpoint(trained_run / "exp" / "r10")
    assert single.profile.resolutions == (10,)


def test_count_madds(capsys):
    assert main(["count-madds", "--set", "model.arch=resnet18", "--set", "num_classes=1000",
                 "--resolutions", "224,96"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t")[:3] == ["resnet18", "224", "1814073344"]
    assert len(lines) == 2


def test_unknown_key_lists_valid_keys(tmp_path, capsys):
    assert main(["train", "--config", SMOKE, "--out", str(tmp_path), "--set", "train.warmup=5"]) == 2
    err = capsys.readouterr().err
    assert "train.warmup" in err and "train.base_lr" in err
    with pytest.raises(ConfigError):
        load_config(None, ["model.depth=3"])


def test_bad_yaml_key(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  layers: 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_missing_checkpoint_is_io_error(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none")]) == 4


def test_locked_output_dir(tmp_path):
    (tmp_path / ".lock").write_text("123")
    assert main(["train", "--config", SMOKE, "--out", str(tmp_path)]) == 4


def test_train_idempotent(tmp_path):
    args = ["train", "--config", SMOKE, "--set", "epochs=1", "--set", "n_train=16"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    for rel in ("metrics/model.csv", "checkpoints/model/final/params.npz",
                "checkpoints/model/final/manifest.txt", "config.yaml"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_no_subcommand_is_usage_error():
    assert main([]) == 2
