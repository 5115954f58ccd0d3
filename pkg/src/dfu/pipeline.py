"""On-disk experiment pipeline: train -> request -> unlearn -> retrain -> report.

Stages communicate through artifacts (checkpoints, metrics.jsonl,
audit.jsonl, table.csv, run_manifest.json); every artifact carries the
config hash and cmd_verify refuses to aggregate mixed-hash runs. Keeping
the stages on disk is what makes the retrain-vs-unlearn wall-clock
comparison honest: each side is timed as its own stage under the same
thread settings.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import ACTIVE_BACKEND
from .config import (
    ConfigError,
    config_hash,
    train_fingerprint,
    build_dataset,
    build_loss_model,
    build_partition,
    build_topology,
    build_train_config,
    request_spec,
)
from .data import DeletionRequest, make_request
from .dpsgd import average_model, collect_statistics, make_clients, train
from .models import load_checkpoint, save_checkpoint
from .topology import save_mixing_csv
from .unlearn import UnlearnOptions, finetune, noise_scale, sensitivity, unlearn
from .models import SmoothnessConstants
from .unlearn import PrivacyBudget
from .verify import bound_sweep, mia, retrain_oracle

log = logging.getLogger(__name__)

__all__ = [
    "run_train",
    "run_unlearn",
    "run_retrain",
    "run_experiment",
    "run_verify",
    "run_sweep",
    "BoundViolation",
]

AUDIT_RECOMPUTE_RTOL = 1e-12


class BoundViolation(RuntimeError):
    """A verified bound or audit invariant failed."""


def _write_manifest(outdir: Path, stage: str, cfg: dict, **payload) -> None:
    manifest = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "version": __version__,
        "kernel_backend": ACTIVE_BACKEND,
        "config": cfg,
    }
    if "train" in cfg:  # sweep manifests have no training section
        manifest["train_fingerprint"] = train_fingerprint(cfg)
    manifest.update(payload)
    (outdir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _read_manifest(rundir: Path) -> dict:
    path = Path(rundir) / "run_manifest.json"
    if not path.exists():
        raise ConfigError(f"{rundir}: missing run_manifest.json")
    return json.loads(path.read_text())


def _save_models(clients, outdir: Path, prefix: str, chash: str) -> None:
    for c in clients:
        save_checkpoint(c.model, outdir / f"{prefix}_client_{c.id}.txt", config_hash=chash)


def _setup(cfg: dict):
    train_ds, test_ds = build_dataset(cfg)
    model = build_loss_model(cfg, train_ds)
    part = build_partition(cfg, train_ds)
    mix = build_topology(cfg)
    tcfg = build_train_config(cfg)
    return train_ds, test_ds, model, part, mix, tcfg


def _accuracy(model, w, test_ds):
    if model.kind == "least_squares":
        return None
    return model.accuracy(w, test_ds.features, test_ds.labels)


def run_train(cfg: dict, outdir) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    train_ds, test_ds, model, part, mix, tcfg = _setup(cfg)
    clients = make_clients(train_ds, part, model)
    t0 = time.perf_counter()
    clients = train(
        clients, mix, model, tcfg, test=test_ds,
        metrics_path=outdir / "metrics.jsonl",
        extra_record={"stage": "train", "config_hash": chash},
    )
    train_ms = (time.perf_counter() - t0) * 1e3
    _save_models(clients, outdir, "train", chash)
    save_mixing_csv(mix, outdir / "mixing.csv")
    acc = _accuracy(model, average_model(clients), test_ds)
    summary = {"test_acc": acc, "train_ms": train_ms, "rounds": tcfg.rounds}
    _write_manifest(outdir, "train", cfg, results=summary)
    log.info("train: acc=%s (%.0f ms)", acc, train_ms)
    return summary


def _load_trained_clients(cfg: dict, checkpoint_dir: Path, train_ds, part, model):
    manifest = _read_manifest(checkpoint_dir)
    if manifest.get("train_fingerprint") != train_fingerprint(cfg):
        raise ConfigError(
            f"checkpoints in {checkpoint_dir} were trained under fingerprint "
            f"{manifest.get('train_fingerprint')}, not {train_fingerprint(cfg)}"
        )
    clients = make_clients(train_ds, part, model)
    for c in clients:
        w, _ = load_checkpoint(checkpoint_dir / f"train_client_{c.id}.txt")
        c.model = w
    return clients


def _retained_shards(part, request: DeletionRequest):
    """Shards minus deleted rows; client-wise removal drops the shard."""
    shards = []
    for i in range(part.n_clients):
        if request.granularity == "client" and i in request.targets:
            continue
        drop = set(int(v) for v in request.targets.get(i, ()))
        shards.append(np.array([s for s in part.shard(i) if int(s) not in drop], dtype=np.int64))
    return tuple(shards)


def _du_stage(cfg, train_ds, test_ds, model, part, mix, tcfg, clients, outdir, chash):
    """Collect statistics, unlearn, fine-tune; returns (clients', summary)."""
    u = cfg["unlearn"]
    request = make_request(part, train_ds, request_spec(cfg))
    consts = model.constants()
    options = UnlearnOptions(
        stat_mode=u["stat_mode"],
        no_noise=bool(u["no_noise"]),
        noise_seed=int(cfg["master_seed"]) * 16 + 3,
        capacity_fraction=float(u["capacity_fraction"]),
    )
    scope = "all" if request.granularity == "client" else "requesting"

    t0 = time.perf_counter()
    du = collect_statistics(clients, model, u["stat_mode"], deletion=request, scope=scope)
    stats_ms = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    du, audits = unlearn(du, mix, train_ds, request, model, consts, options)
    unlearn_ms = (time.perf_counter() - t0) * 1e3

    mix_ft = mix
    if request.granularity == "client":
        mix_ft = build_topology(cfg, n_override=len(du))
    t0 = time.perf_counter()
    du = finetune(du, mix_ft, model, tcfg, rounds=int(u["finetune_rounds"]))
    finetune_ms = (time.perf_counter() - t0) * 1e3

    with open(outdir / "audit.jsonl", "w") as fh:
        for rec in audits:
            fh.write(rec.to_json(config_hash=chash, stat_mode=u["stat_mode"]) + "\n")
    _save_models(du, outdir, "unlearned", chash)

    summary = {
        "stats_ms": stats_ms,
        "unlearn_ms": unlearn_ms,
        "finetune_ms": finetune_ms,
        "du_total_ms": stats_ms + unlearn_ms + finetune_ms,
        "n_updates": len(audits),
        "deleted": request.total_deleted,
    }
    return du, request, summary


def run_unlearn(cfg: dict, checkpoint_dir, outdir) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    train_ds, test_ds, model, part, mix, tcfg = _setup(cfg)
    clients = _load_trained_clients(cfg, Path(checkpoint_dir), train_ds, part, model)
    du, request, summary = _du_stage(
        cfg, train_ds, test_ds, model, part, mix, tcfg, clients, outdir, chash
    )
    summary["test_acc"] = _accuracy(model, average_model(du), test_ds)
    _write_manifest(outdir, "unlearn", cfg, results=summary)
    log.info("unlearn: acc=%s (%.0f ms total)", summary["test_acc"], summary["du_total_ms"])
    return summary


def run_retrain(cfg: dict, outdir) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    train_ds, test_ds, model, part, mix, tcfg = _setup(cfg)
    request = make_request(part, train_ds, request_spec(cfg))
    shards = _retained_shards(part, request)
    mix_rt = mix if len(shards) == part.n_clients else build_topology(cfg, n_override=len(shards))
    t0 = time.perf_counter()
    rt = retrain_oracle(
        train_ds, shards, mix_rt, model, tcfg, test=test_ds,
        metrics_path=outdir / "metrics.jsonl",
        extra_record={"config_hash": chash},
    )
    retrain_ms = (time.perf_counter() - t0) * 1e3
    _save_models(rt, outdir, "retrain", chash)
    summary = {
        "test_acc": _accuracy(model, average_model(rt), test_ds),
        "retrain_ms": retrain_ms,
        "rounds": tcfg.rounds,
    }
    _write_manifest(outdir, "retrain", cfg, results=summary)
    log.info("retrain: acc=%s (%.0f ms)", summary["test_acc"], retrain_ms)
    return summary


def _mia_for(cfg, model, w, train_ds, test_ds, request, part):
    """Deleted rows vs held-out test rows; tau calibrated on retained/test heads."""
    deleted = np.concatenate([request.targets[c] for c in sorted(request.targets)])
    retained = np.concatenate(_retained_shards(part, request)) if request.granularity != "client" \
        else np.concatenate([part.shard(i) for i in range(part.n_clients) if i not in request.targets])
    k_cal = min(500, len(test_ds) // 2, len(retained))
    cal = (
        (train_ds.features[retained[:k_cal]], train_ds.labels[retained[:k_cal]]),
        (test_ds.features[:k_cal], test_ds.labels[:k_cal]),
    )
    report = mia(
        w,
        members=(train_ds.features[deleted], train_ds.labels[deleted]),
        nonmembers=(test_ds.features[k_cal:], test_ds.labels[k_cal:]),
        loss_model=model,
        calibration=cal,
        seed=int(cfg["master_seed"]) * 16 + 5,
    )
    return report


def run_experiment(cfg: dict, outdir) -> dict:
    """Full pipeline plus the RT-vs-DU comparison table."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    (outdir / "effective_config.json").write_text(json.dumps(cfg, indent=2))
    train_ds, test_ds, model, part, mix, tcfg = _setup(cfg)

    clients = make_clients(train_ds, part, model)
    t0 = time.perf_counter()
    clients = train(
        clients, mix, model, tcfg, test=test_ds,
        metrics_path=outdir / "metrics.jsonl",
        extra_record={"stage": "train", "config_hash": chash},
    )
    train_ms = (time.perf_counter() - t0) * 1e3
    _save_models(clients, outdir, "train", chash)
    save_mixing_csv(mix, outdir / "mixing.csv")

    du, request, du_summary = _du_stage(
        cfg, train_ds, test_ds, model, part, mix, tcfg, clients, outdir, chash
    )
    w_du = average_model(du)
    acc_du = _accuracy(model, w_du, test_ds)

    shards = _retained_shards(part, request)
    mix_rt = mix if len(shards) == part.n_clients else build_topology(cfg, n_override=len(shards))
    t0 = time.perf_counter()
    rt = retrain_oracle(
        train_ds, shards, mix_rt, model, tcfg, test=test_ds,
        metrics_path=outdir / "metrics_retrain.jsonl",
        extra_record={"config_hash": chash},
    )
    retrain_ms = (time.perf_counter() - t0) * 1e3
    _save_models(rt, outdir, "retrain", chash)
    w_rt = average_model(rt)
    acc_rt = _accuracy(model, w_rt, test_ds)

    mia_du = mia_rt = None
    if model.kind != "least_squares":
        mia_du = _mia_for(cfg, model, w_du, train_ds, test_ds, request, part)
        mia_rt = _mia_for(cfg, model, w_rt, train_ds, test_ds, request, part)

    du_ms = du_summary["du_total_ms"]
    speedup = retrain_ms / du_ms if du_ms > 0 else float("inf")
    with open(outdir / "table.csv", "w") as fh:
        fh.write(f"# config={chash}\n")
        fh.write("Method,TestAcc,MIAAcc,WallMs\n")
        fh.write(f"RT,{_fmt(acc_rt)},{_fmt(mia_rt and mia_rt.attack_acc)},{retrain_ms:.1f}\n")
        fh.write(f"DU,{_fmt(acc_du)},{_fmt(mia_du and mia_du.attack_acc)},{du_ms:.1f}\n")

    summary = {
        "test_acc_rt": acc_rt,
        "test_acc_du": acc_du,
        "mia_acc_rt": mia_rt.attack_acc if mia_rt else None,
        "mia_acc_du": mia_du.attack_acc if mia_du else None,
        "train_ms": train_ms,
        "retrain_ms": retrain_ms,
        "speedup": speedup,
        **du_summary,
    }
    _write_manifest(outdir, "experiment", cfg, results=summary)
    log.info(
        "experiment: RT=%s DU=%s MIA(DU)=%s speedup=%.1fx",
        _fmt(acc_rt), _fmt(acc_du), _fmt(summary["mia_acc_du"]), speedup,
    )
    return summary


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def run_sweep(size: int, seed: int, outdir) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sweep_hash = config_hash({"sweep_size": size, "sweep_seed": seed})
    reports = bound_sweep(size=size, seed=seed)
    bad = [r for r in reports if not r.satisfied]
    with open(outdir / "bounds.jsonl", "w") as fh:
        for r in reports:
            rec = json.loads(r.to_json())
            rec["config_hash"] = sweep_hash
            fh.write(json.dumps(rec) + "\n")
    summary = {
        "config_hash": sweep_hash,
        "instances": size,
        "checks": len(reports),
        "satisfied": len(reports) - len(bad),
        "violations": len(bad),
    }
    (outdir / "sweep_summary.json").write_text(json.dumps(summary, indent=2))
    _write_manifest(outdir, "sweep", {"sweep_size": size, "sweep_seed": seed},
                    results=summary)
    if bad:
        for r in bad[:5]:
            log.error("bound violated: %s lhs=%.3e rhs=%.3e (%s)",
                      r.bound_name, r.lhs, r.rhs, r.instance)
        raise BoundViolation(f"{len(bad)} of {len(reports)} bound checks failed")
    return summary


def run_verify(run_dirs, out_path=None) -> dict:
    """Cross-check artifacts: audit noise calibration, hashes, bound files."""
    dirs = [Path(d) for d in run_dirs]
    hashes = {}
    audit_checked = 0
    audit_bad = 0
    bound_total = 0
    bound_bad = 0
    for d in dirs:
        manifest = _read_manifest(d)
        hashes[str(d)] = manifest["config_hash"]
    if len(set(hashes.values())) > 1:
        raise ConfigError(f"refusing to verify mixed-config runs: {hashes}")
    for d in dirs:
        audit = d / "audit.jsonl"
        if audit.exists():
            for line in audit.read_text().splitlines():
                rec = json.loads(line)
                consts = SmoothnessConstants(
                    lam=rec["lam"], mu=rec["lam"] + 1e-9,  # mu unused by the formulas
                    lipschitz=rec["L"], hessian_lipschitz=rec["M"],
                )
                df = sensitivity(consts, rec["m"], rec["n"])
                sig = noise_scale(df, PrivacyBudget(rec["epsilon"], rec["delta"]))
                ok_df = np.isclose(df, rec["deltaF"], rtol=AUDIT_RECOMPUTE_RTOL, atol=0.0)
                expect_sigma = 0.0 if rec["sigma"] == 0.0 else sig
                ok_sig = rec["sigma"] == 0.0 or np.isclose(
                    sig, rec["sigma"], rtol=AUDIT_RECOMPUTE_RTOL, atol=0.0
                )
                audit_checked += 1
                if not (ok_df and ok_sig):
                    audit_bad += 1
                    log.error("audit mismatch in %s: record=%s recomputed dF=%r sigma=%r",
                              d, rec, df, expect_sigma)
        bounds = d / "bounds.jsonl"
        if bounds.exists():
            for line in bounds.read_text().splitlines():
                rec = json.loads(line)
                bound_total += 1
                if not rec["satisfied"]:
                    bound_bad += 1
    report = {
        "runs": [str(d) for d in dirs],
        "config_hash": next(iter(hashes.values())) if hashes else None,
        "audit_records_checked": audit_checked,
        "audit_mismatches": audit_bad,
        "bound_checks": bound_total,
        "bound_violations": bound_bad,
    }
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=2))
    if audit_bad or bound_bad:
        raise BoundViolation(
            f"verification failed: {audit_bad} audit mismatches, {bound_bad} bound violations"
        )
    return report
