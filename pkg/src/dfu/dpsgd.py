"""Synchronous decentralized SGD over a mixing matrix.

Each round: every client draws a minibatch from its shard and evaluates the
gradient at its current model x_{k,i}; models are exchanged and averaged
with the mixing weights; the descent step is then applied to the mixed
model. Aggregation order is fixed by client id and per-client batch draws
come from counter-based streams keyed on (seed, client, round), so the
trajectory is bit-reproducible regardless of scheduling.

At deletion time, clients compute and store an auxiliary curvature
statistic: either the mean per-sample Hessian (d x d) or the per-sample
gradient rows backing the empirical Fisher product (the O(d)-per-sample
variant).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from .data import DataError, Dataset, Partition
from .models import LossModel
from .topology import MixingMatrix

__all__ = [
    "ClientState",
    "TrainConfig",
    "DivergenceError",
    "make_clients",
    "train",
    "collect_statistics",
    "average_model",
    "global_loss",
    "consensus_residual",
]

DIVERGENCE_LIMIT = 1e6

STAT_EXACT = "exact_hessian"
STAT_FISHER = "fisher"


class DivergenceError(RuntimeError):
    """A client model norm blew past the guard during training."""


@dataclass
class ClientState:
    """One client's model, shard view, and (optional) stored statistic."""

    id: int
    model: np.ndarray
    shard: np.ndarray  # indices into the shared Dataset
    X: np.ndarray  # cached shard features (rebuilt when the shard changes)
    y: np.ndarray
    hessian_stat: dict | None = None  # {"mode", "matrix"|"factors", "n_used"}

    @property
    def n_samples(self) -> int:
        return len(self.shard)


@dataclass(frozen=True)
class TrainConfig:
    rounds: int
    lr: float
    batch_size: int = 100
    seed: int = 0
    stat_mode: str = STAT_EXACT
    metrics_every: int = 50

    def __post_init__(self):
        if self.rounds < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("need rounds >= 0, lr > 0, batch_size >= 1")
        if self.stat_mode not in (STAT_EXACT, STAT_FISHER):
            raise ValueError(f"unknown stat_mode {self.stat_mode!r}")


def make_clients(dataset: Dataset, part: Partition, loss_model: LossModel) -> list[ClientState]:
    clients = []
    for i in range(part.n_clients):
        shard = np.asarray(part.shard(i), dtype=np.int64)
        clients.append(
            ClientState(
                id=i,
                model=loss_model.zeros(),
                shard=shard,
                X=np.ascontiguousarray(dataset.features[shard]),
                y=dataset.labels[shard].copy(),
            )
        )
    return clients


def _batch_rng(seed: int, client_id: int, rnd: int) -> Generator:
    # counter-based stream: identical draws no matter the execution order
    return Generator(Philox(SeedSequence(entropy=(seed, client_id, rnd))))


def average_model(clients: list[ClientState]) -> np.ndarray:
    if not clients:
        raise ValueError("no clients")
    return np.mean([c.model for c in clients], axis=0)


def consensus_residual(clients: list[ClientState]) -> float:
    avg = average_model(clients)
    return float(max(np.linalg.norm(c.model - avg) for c in clients))


def global_loss(clients: list[ClientState], loss_model: LossModel, w: np.ndarray) -> float:
    """f(w): uniform mean of the clients' local objectives at w."""
    return float(np.mean([loss_model.batch_loss_grad(w, c.X, c.y)[0] for c in clients]))


def train(
    clients: list[ClientState],
    mixing: MixingMatrix,
    loss_model: LossModel,
    config: TrainConfig,
    *,
    test: Dataset | None = None,
    metrics_path=None,
    extra_record: dict | None = None,
) -> list[ClientState]:
    """Run config.rounds synchronous rounds and return fresh client states."""
    n_clients = len(clients)
    if mixing.n != n_clients:
        raise ValueError(f"mixing is {mixing.n}x{mixing.n} but there are {n_clients} clients")
    dims = {c.model.shape for c in clients}
    if len(dims) != 1:
        raise ValueError("client models disagree in dimension")

    Q = mixing.weights
    models = np.array([c.model for c in clients])  # (N, d)
    grads = np.empty_like(models)
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for rnd in range(config.rounds):
            for i, c in enumerate(clients):  # fixed order by client id
                n_i = len(c.y)
                if config.batch_size >= n_i:
                    Xb, yb = c.X, c.y
                else:
                    idx = _batch_rng(config.seed, c.id, rnd).choice(
                        n_i, size=config.batch_size, replace=False
                    )
                    Xb, yb = c.X[idx], c.y[idx]
                _, grads[i] = loss_model.batch_loss_grad(models[i], Xb, yb)
            models = Q @ models - config.lr * grads
            worst = float(np.sqrt((models * models).sum(axis=1).max()))
            if worst > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"round {rnd}: model norm {worst:.3g} exceeds {DIVERGENCE_LIMIT:.0e}"
                )
            if sink and ((rnd + 1) % config.metrics_every == 0 or rnd + 1 == config.rounds):
                snapshot = [replace(c, model=models[i].copy()) for i, c in enumerate(clients)]
                rec = {
                    "round": rnd + 1,
                    "mean_train_loss": float(
                        np.mean(
                            [
                                loss_model.batch_loss_grad(models[i], c.X, c.y)[0]
                                for i, c in enumerate(clients)
                            ]
                        )
                    ),
                    "test_acc": (
                        loss_model.accuracy(average_model(snapshot), test.features, test.labels)
                        if test is not None and loss_model.kind != "least_squares"
                        else None
                    ),
                    "consensus_residual": consensus_residual(snapshot),
                }
                if extra_record:
                    rec.update(extra_record)
                sink.write(json.dumps(rec) + "\n")
    finally:
        if sink:
            sink.close()
    return [replace(c, model=models[i].copy(), hessian_stat=None) for i, c in enumerate(clients)]


def collect_statistics(
    clients: list[ClientState],
    loss_model: LossModel,
    stat_mode: str,
    deletion=None,
    retained_only: bool = True,
    scope: str = "requesting",
) -> list[ClientState]:
    """Store the curvature statistic on each client in scope.

    Requesting clients (those named by ``deletion``) evaluate over their
    retained samples when ``retained_only`` is set, which is what the
    sample-wise corrective update divides through; everyone else uses the
    full shard. ``scope="all"`` is required by the client-departure path,
    which aggregates every client's full-shard Hessian.
    """
    targets = dict(deletion.targets) if deletion is not None else {}
    # client departure consumes full-shard statistics from everyone; the
    # retained-data restriction only applies to sample/class requests
    drops_samples = deletion is not None and deletion.granularity != "client"
    out = []
    for c in clients:
        requesting = c.id in targets
        if not requesting and scope != "all":
            out.append(c)
            continue
        if requesting and retained_only and drops_samples:
            drop = set(int(v) for v in targets[c.id])
            mask = np.array([int(s) not in drop for s in c.shard])
            if not mask.any():
                raise DataError(
                    f"client {c.id} would delete its whole shard; use the client-wise path"
                )
            Xs, ys = c.X[mask], c.y[mask]
        else:
            Xs, ys = c.X, c.y
        if stat_mode == STAT_EXACT:
            stat = {
                "mode": STAT_EXACT,
                "matrix": loss_model.hessian_mean(c.model, Xs),
                "n_used": len(ys),
            }
        elif stat_mode == STAT_FISHER:
            stat = {
                "mode": STAT_FISHER,
                "factors": loss_model.grad_rows(c.model, Xs, ys),
                "n_used": len(ys),
            }
        else:
            raise ValueError(f"unknown stat_mode {stat_mode!r}")
        out.append(replace(c, hessian_stat=stat))
    return out
