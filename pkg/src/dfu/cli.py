"""Command-line entry points.

Exit codes: 0 success, 2 config error, 3 bound violation, 4 protocol
failure (flooding/divergence/solver breakdown).
"""

from __future__ import annotations

import contextlib
import logging
import sys

import click

from .config import ConfigError, load_config
from .data import DataError
from .dpsgd import DivergenceError
from .unlearn import CapacityError, ProtocolError, SolveError
from . import pipeline

log = logging.getLogger("dfu")

EXIT_CONFIG = 2
EXIT_BOUND = 3
EXIT_PROTOCOL = 4


@contextlib.contextmanager
def _thread_limit(threads):
    if threads is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl unavailable; set OMP_NUM_THREADS=%d instead", threads)
        yield
        return
    with threadpool_limits(limits=threads):
        yield


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, DataError, CapacityError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except pipeline.BoundViolation as exc:
        click.echo(f"bound violation: {exc}", err=True)
        sys.exit(EXIT_BOUND)
    except (ProtocolError, DivergenceError, SolveError) as exc:
        click.echo(f"protocol failure: {exc}", err=True)
        sys.exit(EXIT_PROTOCOL)


def _apply_unlearn_flags(cfg, epsilon, delta, stat_mode, no_noise, finetune_rounds):
    if epsilon is not None:
        cfg["unlearn"]["epsilon"] = epsilon
    if delta is not None:
        cfg["unlearn"]["delta"] = delta
    if stat_mode is not None:
        cfg["unlearn"]["stat_mode"] = stat_mode
    if no_noise:
        cfg["unlearn"]["no_noise"] = True
        log.warning("noise disabled by flag: this run is NOT certified")
    if finetune_rounds is not None:
        cfg["unlearn"]["finetune_rounds"] = finetune_rounds
    return cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    """Decentralized training with certified data removal."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("-o", "--out", "outdir", required=True, type=click.Path())
@click.option("--threads", type=int, default=None)
def train(config_path, outdir, threads):
    """Run decentralized training and write checkpoints + metrics."""
    cfg = _run(load_config, config_path)
    with _thread_limit(threads):
        summary = _run(pipeline.run_train, cfg, outdir)
    click.echo(f"test_acc={summary['test_acc']} ({summary['train_ms']:.0f} ms)")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", required=True, type=click.Path(exists=True))
@click.option("-o", "--out", "outdir", required=True, type=click.Path())
@click.option("--epsilon", type=float, default=None)
@click.option("--delta", type=float, default=None)
@click.option("--stat-mode", type=click.Choice(["exact_hessian", "fisher"]), default=None)
@click.option("--no-noise", is_flag=True, help="Skip the noise draw (testing only).")
@click.option("--finetune-rounds", type=int, default=None)
@click.option("--threads", type=int, default=None)
def unlearn(config_path, checkpoints, outdir, epsilon, delta, stat_mode, no_noise,
            finetune_rounds, threads):
    """Apply corrective updates to trained checkpoints."""
    cfg = _apply_unlearn_flags(
        _run(load_config, config_path), epsilon, delta, stat_mode, no_noise, finetune_rounds
    )
    with _thread_limit(threads):
        summary = _run(pipeline.run_unlearn, cfg, checkpoints, outdir)
    click.echo(f"test_acc={summary['test_acc']} ({summary['du_total_ms']:.0f} ms)")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("-o", "--out", "outdir", required=True, type=click.Path())
@click.option("--threads", type=int, default=None)
def retrain(config_path, outdir, threads):
    """Retrain from scratch on the retained data (the RT oracle)."""
    cfg = _run(load_config, config_path)
    with _thread_limit(threads):
        summary = _run(pipeline.run_retrain, cfg, outdir)
    click.echo(f"test_acc={summary['test_acc']} ({summary['retrain_ms']:.0f} ms)")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("-o", "--out", "outdir", required=True, type=click.Path())
@click.option("--threads", type=int, default=None)
def experiment(config_path, outdir, threads):
    """Full pipeline: train, unlearn, retrain, attack, comparison table."""
    cfg = _run(load_config, config_path)
    with _thread_limit(threads):
        summary = _run(pipeline.run_experiment, cfg, outdir)
    click.echo(
        f"RT={summary['test_acc_rt']} DU={summary['test_acc_du']} "
        f"MIA(DU)={summary['mia_acc_du']} speedup={summary['speedup']:.1f}x"
    )


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("-o", "--out", "out_path", type=click.Path(), default=None)
def verify(run_dirs, out_path):
    """Recheck audit records and bound files across run directories."""
    report = _run(pipeline.run_verify, run_dirs, out_path)
    click.echo(
        f"audits: {report['audit_records_checked']} ok, "
        f"bounds: {report['bound_checks']} checked, 0 violations"
    )


@main.command()
@click.option("--sweep-size", "size", type=int, default=100, show_default=True)
@click.option("--sweep-seed", "seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", "outdir", required=True, type=click.Path())
def sweep(size, seed, outdir):
    """Randomized distance-bound sweep on exactly-solved instances."""
    summary = _run(pipeline.run_sweep, size, seed, outdir)
    click.echo(f"{summary['satisfied']}/{summary['checks']} bound checks satisfied")


if __name__ == "__main__":
    main()
