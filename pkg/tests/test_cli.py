import json

import numpy as np
import pytest
from click.testing import CliRunner

from dfu import pipeline
from dfu.cli import main
from dfu.config import ConfigError, config_hash, load_config, merge_config
from dfu.models import load_checkpoint


def tiny_blob_cfg(**unlearn_overrides):
    cfg = {
        "master_seed": 3,
        "topology": {"kind": "ring", "n": 2},
        "dataset": {"kind": "synth_blobs", "train_size": 120, "test_size": 60,
                    "dim": 4, "classes": 2, "standardize": False},
        "model": {"kind": "regularized_logistic", "lambda_reg": 0.5},
        "train": {"rounds": 60, "lr": 0.1, "batch_size": 60, "metrics_every": 20},
        "unlearn": {"granularity": "samples", "fraction": 0.1,
                    "epsilon": 1.0, "delta": 0.05, **unlearn_overrides},
    }
    return merge_config(cfg)


def quad_toy_cfg():
    # raw blob scale keeps the quadratic well conditioned so full-batch GD
    # reaches the exact minimizer and the Newton step reproduces RT exactly
    return merge_config({
        "master_seed": 2,
        "topology": {"kind": "ring", "n": 1},
        "dataset": {"kind": "synth_blobs", "train_size": 40, "test_size": 10,
                    "dim": 3, "classes": 2, "standardize": False, "unit_ball": False},
        "model": {"kind": "least_squares", "lambda_reg": 1e-6},
        "train": {"rounds": 4000, "lr": 0.08, "batch_size": 40, "metrics_every": 1000},
        "unlearn": {"granularity": "samples", "fraction": 0.1, "no_noise": True,
                    "epsilon": 1.0, "delta": 0.05, "finetune_rounds": 0},
    })


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


# --- stages -------------------------------------------------------------------


def test_train_writes_checkpoints_and_is_repeatable(tmp_path):
    cfg = tiny_blob_cfg()
    s1 = pipeline.run_train(cfg, tmp_path / "a")
    s2 = pipeline.run_train(cfg, tmp_path / "b")
    for i in range(2):
        w1, h1 = load_checkpoint(tmp_path / "a" / f"train_client_{i}.txt")
        w2, h2 = load_checkpoint(tmp_path / "b" / f"train_client_{i}.txt")
        assert np.array_equal(w1, w2)
        assert h1 == h2 == config_hash(cfg)
    assert s1["test_acc"] == s2["test_acc"]
    assert (tmp_path / "a" / "metrics.jsonl").exists()
    assert (tmp_path / "a" / "run_manifest.json").exists()


def test_train_metrics_show_decreasing_loss(tmp_path):
    cfg = merge_config({
        "master_seed": 7,
        "topology": {"kind": "ring", "n": 10},
        "dataset": {"kind": "synth_blobs", "train_size": 600, "test_size": 100,
                    "dim": 6, "classes": 2, "standardize": False},
        "model": {"kind": "regularized_logistic", "lambda_reg": 0.3},
        "train": {"rounds": 100, "lr": 0.1, "batch_size": 30, "metrics_every": 10},
    })
    pipeline.run_train(cfg, tmp_path / "run")
    recs = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    losses = [r["mean_train_loss"] for r in recs]
    assert losses[-1] < losses[0]


def test_unlearn_stage_reads_checkpoints(tmp_path):
    cfg = tiny_blob_cfg()
    pipeline.run_train(cfg, tmp_path / "train")
    summary = pipeline.run_unlearn(cfg, tmp_path / "train", tmp_path / "du")
    assert (tmp_path / "du" / "audit.jsonl").exists()
    assert summary["test_acc"] is not None
    audits = [json.loads(l) for l in (tmp_path / "du" / "audit.jsonl").read_text().splitlines()]
    assert all(a["config_hash"] == config_hash(cfg) for a in audits)


def test_unlearn_stage_refuses_mismatched_checkpoints(tmp_path):
    cfg = tiny_blob_cfg()
    pipeline.run_train(cfg, tmp_path / "train")
    other = tiny_blob_cfg()
    other["train"]["rounds"] = 61  # different trajectory: checkpoints unusable
    with pytest.raises(ConfigError, match="fingerprint"):
        pipeline.run_unlearn(other, tmp_path / "train", tmp_path / "du")


def test_unlearn_stage_accepts_different_unlearn_knobs(tmp_path):
    # removal settings do not invalidate trained checkpoints
    cfg = tiny_blob_cfg()
    pipeline.run_train(cfg, tmp_path / "train")
    other = tiny_blob_cfg(fraction=0.2)
    summary = pipeline.run_unlearn(other, tmp_path / "train", tmp_path / "du")
    assert summary["deleted"] > 0


def test_experiment_quadratic_no_noise_du_equals_rt(tmp_path):
    # with an exact Newton step, zero noise and full-batch training to the
    # optimum, the unlearned models coincide with the retrain oracle
    cfg = quad_toy_cfg()
    pipeline.run_experiment(cfg, tmp_path / "exp")
    w_du, _ = load_checkpoint(tmp_path / "exp" / "unlearned_client_0.txt")
    w_rt, _ = load_checkpoint(tmp_path / "exp" / "retrain_client_0.txt")
    assert np.linalg.norm(w_du - w_rt) <= 1e-8
    table = (tmp_path / "exp" / "table.csv").read_text().splitlines()
    assert table[0].startswith("# config=")
    assert table[1] == "Method,TestAcc,MIAAcc,WallMs"


def test_experiment_table_and_determinism(tmp_path):
    cfg = tiny_blob_cfg()
    s1 = pipeline.run_experiment(cfg, tmp_path / "e1")
    s2 = pipeline.run_experiment(cfg, tmp_path / "e2")
    assert s1["test_acc_du"] == s2["test_acc_du"]
    assert s1["test_acc_rt"] == s2["test_acc_rt"]
    assert s1["mia_acc_du"] == s2["mia_acc_du"]
    a1 = (tmp_path / "e1" / "audit.jsonl").read_text()
    a2 = (tmp_path / "e2" / "audit.jsonl").read_text()
    strip = lambda text: [
        {k: v for k, v in json.loads(l).items() if k != "wall_ms"}
        for l in text.splitlines()
    ]
    assert strip(a1) == strip(a2)


def test_experiment_client_granularity(tmp_path):
    cfg = tiny_blob_cfg()
    cfg["topology"]["n"] = 4
    cfg["unlearn"]["granularity"] = "client"
    cfg["unlearn"]["client"] = 2
    cfg["unlearn"]["capacity_fraction"] = 0.30
    summary = pipeline.run_experiment(cfg, tmp_path / "exp")
    # leaving client keeps no unlearned checkpoint; survivors do
    assert not (tmp_path / "exp" / "unlearned_client_2.txt").exists()
    assert (tmp_path / "exp" / "unlearned_client_3.txt").exists()
    assert summary["test_acc_du"] is not None


# --- verify and sweep ---------------------------------------------------------------


def test_verify_accepts_consistent_runs(tmp_path):
    cfg = tiny_blob_cfg()
    pipeline.run_experiment(cfg, tmp_path / "e1")
    report = pipeline.run_verify([tmp_path / "e1"], tmp_path / "report.json")
    assert report["audit_mismatches"] == 0
    assert report["audit_records_checked"] >= 1


def test_verify_refuses_mixed_hashes(tmp_path):
    pipeline.run_train(tiny_blob_cfg(), tmp_path / "a")
    pipeline.run_train(tiny_blob_cfg(fraction=0.2), tmp_path / "b")
    with pytest.raises(ConfigError, match="mixed"):
        pipeline.run_verify([tmp_path / "a", tmp_path / "b"])


def test_verify_flags_doctored_audit(tmp_path):
    cfg = tiny_blob_cfg()
    pipeline.run_experiment(cfg, tmp_path / "e1")
    audit = tmp_path / "e1" / "audit.jsonl"
    recs = [json.loads(l) for l in audit.read_text().splitlines()]
    recs[0]["sigma"] *= 2.0  # tampered noise scale must be caught
    audit.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    with pytest.raises(pipeline.BoundViolation):
        pipeline.run_verify([tmp_path / "e1"])


def test_sweep_writes_reports(tmp_path):
    summary = pipeline.run_sweep(5, 3, tmp_path / "sweep")
    assert summary["violations"] == 0
    lines = (tmp_path / "sweep" / "bounds.jsonl").read_text().splitlines()
    assert len(lines) == 10


# --- CLI surface ------------------------------------------------------------------


def test_cli_train_and_experiment(tmp_path):
    runner = CliRunner()
    cfg_path = write_cfg(tmp_path, {
        "master_seed": 3,
        "topology": {"kind": "ring", "n": 2},
        "dataset": {"kind": "synth_blobs", "train_size": 120, "test_size": 60,
                    "dim": 4, "classes": 2, "standardize": False},
        "model": {"kind": "regularized_logistic", "lambda_reg": 0.5},
        "train": {"rounds": 40, "lr": 0.1, "batch_size": 60, "metrics_every": 20},
        "_comment": "keys starting with underscore are ignored",
    })
    res = runner.invoke(main, ["train", "-c", str(cfg_path), "-o", str(tmp_path / "t")])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["experiment", "-c", str(cfg_path), "-o", str(tmp_path / "e"),
                               "--threads", "1"])
    assert res.exit_code == 0, res.output
    assert "speedup" in res.output


def test_cli_unlearn_flags(tmp_path):
    runner = CliRunner()
    cfg_path = write_cfg(tmp_path, {
        "master_seed": 3,
        "topology": {"kind": "ring", "n": 2},
        "dataset": {"kind": "synth_blobs", "train_size": 120, "test_size": 60,
                    "dim": 4, "classes": 2, "standardize": False},
        "model": {"kind": "regularized_logistic", "lambda_reg": 0.5},
        "train": {"rounds": 40, "lr": 0.1, "batch_size": 60, "metrics_every": 20},
    })
    assert runner.invoke(main, ["train", "-c", str(cfg_path), "-o", str(tmp_path / "t")]).exit_code == 0
    res = runner.invoke(main, [
        "unlearn", "-c", str(cfg_path), "--checkpoints", str(tmp_path / "t"),
        "-o", str(tmp_path / "u"), "--stat-mode", "fisher", "--no-noise",
        "--finetune-rounds", "0",
    ])
    assert res.exit_code == 0, res.output
    audits = [json.loads(l) for l in (tmp_path / "u" / "audit.jsonl").read_text().splitlines()]
    assert all(a["sigma"] == 0.0 for a in audits)
    assert all(a["stat_mode"] == "fisher" for a in audits)


def test_cli_bad_config_exits_2(tmp_path):
    runner = CliRunner()
    cfg_path = write_cfg(tmp_path, {"no_such_key": 1})
    res = runner.invoke(main, ["train", "-c", str(cfg_path), "-o", str(tmp_path / "t")])
    assert res.exit_code == 2


def test_cli_verify_and_sweep(tmp_path):
    runner = CliRunner()
    assert runner.invoke(main, ["sweep", "--sweep-size", "4", "--sweep-seed", "1",
                                "-o", str(tmp_path / "s")]).exit_code == 0
    # cmd_verify aggregates a sweep directory: 8 bound checks, 0 violations
    res = runner.invoke(main, ["verify", str(tmp_path / "s")])
    assert res.exit_code == 0, res.output
    assert "bounds: 8 checked" in res.output
    pipeline.run_experiment(tiny_blob_cfg(), tmp_path / "e")
    res = runner.invoke(main, ["verify", str(tmp_path / "e")])
    assert res.exit_code == 0, res.output


def test_verify_flags_doctored_bounds(tmp_path):
    pipeline.run_sweep(3, 2, tmp_path / "s")
    bounds = tmp_path / "s" / "bounds.jsonl"
    recs = [json.loads(l) for l in bounds.read_text().splitlines()]
    recs[0]["satisfied"] = False
    bounds.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    with pytest.raises(pipeline.BoundViolation):
        pipeline.run_verify([tmp_path / "s"])


def test_cli_divergence_exits_4(tmp_path):
    runner = CliRunner()
    cfg_path = write_cfg(tmp_path, {
        "master_seed": 3,
        "topology": {"kind": "ring", "n": 2},
        "dataset": {"kind": "synth_blobs", "train_size": 80, "test_size": 20,
                    "dim": 4, "classes": 2, "standardize": False, "unit_ball": False},
        "model": {"kind": "least_squares", "lambda_reg": 0.1},
        "train": {"rounds": 400, "lr": 1e4, "batch_size": 80, "metrics_every": 100},
    })
    res = runner.invoke(main, ["train", "-c", str(cfg_path), "-o", str(tmp_path / "t")])
    assert res.exit_code == 4


def test_train_exports_mixing_csv(tmp_path):
    pipeline.run_train(tiny_blob_cfg(), tmp_path / "t")
    from dfu.topology import load_mixing_csv
    w = load_mixing_csv(tmp_path / "t" / "mixing.csv")
    assert w.shape == (2, 2)
    assert np.allclose(w.sum(axis=1), 1.0)


def test_load_config_unknown_key_rejected(tmp_path):
    p = write_cfg(tmp_path, {"dataset": {"bogus": 1}})
    with pytest.raises(ConfigError, match="bogus"):
        load_config(p)


def test_config_hash_ignores_comments():
    a = merge_config({"master_seed": 5})
    b = merge_config({"master_seed": 5, "_note": "hi"})
    assert config_hash(a) == config_hash(b)
