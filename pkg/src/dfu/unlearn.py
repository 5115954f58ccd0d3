"""Certified data removal: Newton corrections, noise calibration, flooding.

Sample-wise removal at client c (shard size n_c, deleting m_c samples):

    H_hat  = mean per-sample Hessian over the retained shard at x_{k,c}
    x_c^D  = (1/(n_c - m_c)) * H_hat^{-1} * sum_{deleted} grad F(x_{k,c}, xi)

The corrective update is perturbed with Gaussian noise whose scale is
calibrated from the worst-case distance between the noise-free unlearned
model and a retrained one,

    dF    = 2 M L^2 m_c^2 / (lam^3 n_c^2)
    sigma = (dF / eps) * sqrt(2 ln(1.25/delta))

and flooded through the communication graph; every client applies the
update exactly once with uniform weight 1/N. Class-wise removal runs the
same path as simultaneous per-client sample requests. Client departure
aggregates every client's full-shard Hessian and applies a single
correction built from the leaving client's local gradient.

The Fisher variant swaps the stored Hessian for per-sample gradient
factors G and solves (G^T G / n_used + lam_F I) z = b in factor form.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.linalg

from .data import DataError, Dataset, DeletionRequest
from .dpsgd import STAT_EXACT, STAT_FISHER, ClientState, TrainConfig
from .dpsgd import train as dpsgd_train
from .models import LossModel, SmoothnessConstants
from .topology import Graph, MixingMatrix

log = logging.getLogger(__name__)

__all__ = [
    "PrivacyBudget",
    "CorrectiveUpdate",
    "AuditRecord",
    "UnlearnOptions",
    "CapacityError",
    "ProtocolError",
    "SolveError",
    "sensitivity",
    "noise_scale",
    "perturb",
    "flood_broadcast",
    "newton_correction_samples",
    "newton_correction_client",
    "unlearn",
    "finetune",
    "remove_deleted_samples",
]

FISHER_RIDGE_FLOOR = 1e-6
RIDGE_ESCALATIONS = 3


class CapacityError(ValueError):
    """Total requested deletions exceed the configured capacity."""


class ProtocolError(RuntimeError):
    """Flooding could not deliver an update to every client."""


class SolveError(RuntimeError):
    """The curvature system stayed non-PD after all ridge escalations."""


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if self.epsilon <= 0 or not (0.0 < self.delta < 1.0):
            raise ValueError("need epsilon > 0 and delta in (0, 1)")


@dataclass(frozen=True)
class CorrectiveUpdate:
    origin_client: int
    delta: np.ndarray  # x_c^D + noise
    sigma: float
    sequence_no: int


@dataclass(frozen=True)
class AuditRecord:
    client: int
    granularity: str
    m: int
    n: int
    lam: float
    L: float
    M: float
    deltaF: float
    sigma: float
    epsilon: float
    delta: float
    noise_seed: int
    wall_ms: float

    def to_json(self, **extra) -> str:
        d = asdict(self)
        d.update(extra)
        return json.dumps(d)


@dataclass(frozen=True)
class UnlearnOptions:
    stat_mode: str = STAT_EXACT
    no_noise: bool = False  # testing only; logged loudly
    noise_seed: int = 0
    capacity_fraction: float = 0.25


# --- closed forms -------------------------------------------------------------


def sensitivity(constants: SmoothnessConstants, m_c: int, n_c: int) -> float:
    """Worst-case unlearned-vs-retrained distance 2 M L^2 m^2 / (lam^3 n^2)."""
    if m_c == 0:
        return 0.0
    if not (n_c > m_c >= 1):
        raise ValueError(f"need n_c > m_c >= 1, got m={m_c}, n={n_c}")
    lam, L, M = constants.lam, constants.lipschitz, constants.hessian_lipschitz
    return 2.0 * M * L * L * m_c * m_c / (lam**3 * n_c * n_c)


def noise_scale(delta_F: float, budget: PrivacyBudget) -> float:
    """Gaussian mechanism scale (dF/eps) * sqrt(2 ln(1.25/delta))."""
    if delta_F < 0:
        raise ValueError("sensitivity must be >= 0")
    return (delta_F / budget.epsilon) * np.sqrt(2.0 * np.log(1.25 / budget.delta))


def perturb(delta: np.ndarray, sigma: float, noise_seed: int) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return delta.copy()
    rng = np.random.default_rng(noise_seed)
    return delta + rng.normal(0.0, sigma, size=delta.shape)


def _derive_noise_seed(base: int, client_id: int) -> int:
    return int(np.random.SeedSequence(entropy=(base, client_id)).generate_state(1, np.uint64)[0])


# --- linear solves -------------------------------------------------------------


def _spd_solve(H: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cholesky solve with ridge fallback (+1e-8*trace/d, x10, 3 tries)."""
    d = H.shape[0]
    ridge = 1e-8 * float(np.trace(H)) / d
    bump = 0.0
    for attempt in range(RIDGE_ESCALATIONS + 1):
        try:
            cf = scipy.linalg.cho_factor(
                H if bump == 0.0 else H + bump * np.eye(d), lower=True, check_finite=False
            )
            return scipy.linalg.cho_solve(cf, b, check_finite=False)
        except np.linalg.LinAlgError:
            pass
        except scipy.linalg.LinAlgError:  # pragma: no cover - alias on some scipy
            pass
        bump = ridge * (10.0**attempt)
    smallest = float(np.linalg.eigvalsh(H)[0])
    raise SolveError(
        f"curvature matrix is not PD after {RIDGE_ESCALATIONS} ridge escalations "
        f"(smallest eigenvalue ~ {smallest:.3e})"
    )


def _fisher_solve(G: np.ndarray, n_used: int, lam_f: float, b: np.ndarray) -> np.ndarray:
    """Solve (G^T G / n_used + lam_f I) z = b without forming d x d when tall.

    G holds per-sample gradient rows, shape (k, d). For k < d the Woodbury
    identity reduces the solve to the k x k system
    (n_used*lam_f I + G G^T) u = G b.
    """
    k, d = G.shape
    if k >= d:
        H = G.T @ G / n_used
        H[np.diag_indices(d)] += lam_f
        return _spd_solve(H, b)
    S = G @ G.T
    S[np.diag_indices(k)] += n_used * lam_f
    u = _spd_solve(S, G @ b)
    return (b - G.T @ u) / lam_f


def _solve_with_stat(stat: dict, lam: float, b: np.ndarray) -> np.ndarray:
    if stat["mode"] == STAT_EXACT:
        return _spd_solve(stat["matrix"], b)
    if stat["mode"] == STAT_FISHER:
        lam_f = max(lam, FISHER_RIDGE_FLOOR)
        return _fisher_solve(stat["factors"], stat["n_used"], lam_f, b)
    raise ValueError(f"unknown statistic mode {stat['mode']!r}")


# --- corrections ----------------------------------------------------------------


def newton_correction_samples(
    client: ClientState,
    deleted: np.ndarray,
    dataset: Dataset,
    loss_model: LossModel,
) -> np.ndarray:
    """x_c^D for deleting ``deleted`` (dataset indices) from this client."""
    if client.hessian_stat is None:
        raise ValueError(f"client {client.id} has no stored statistic")
    m = len(deleted)
    if m == 0:
        return loss_model.zeros()
    n = client.n_samples
    if n - m <= 0:
        raise DataError("deleting the whole shard; use the client-wise path")
    G_del = loss_model.grad_rows(
        client.model, dataset.features[deleted], dataset.labels[deleted]
    )
    summed = G_del.sum(axis=0)
    return _solve_with_stat(client.hessian_stat, loss_model.lambda_reg, summed) / (n - m)


def _aggregate_retained_stat(clients, leaving_id, lam):
    """Mean curvature over the N-1 retained clients' full-shard statistics."""
    kept = [c for c in clients if c.id != leaving_id]
    modes = {c.hessian_stat["mode"] for c in kept if c.hessian_stat}
    if len(modes) != 1 or any(c.hessian_stat is None for c in kept):
        raise ValueError("client-wise removal needs a statistic from every retained client")
    mode = modes.pop()
    if mode == STAT_EXACT:
        H = np.mean([c.hessian_stat["matrix"] for c in kept], axis=0)
        return {"mode": STAT_EXACT, "matrix": H}
    # Fisher: (1/(N-1)) sum_i G_i^T G_i / n_i stays a factor product after
    # scaling each row block by 1/sqrt(n_i (N-1))
    blocks = [
        c.hessian_stat["factors"] / np.sqrt(c.hessian_stat["n_used"] * len(kept))
        for c in kept
    ]
    return {"mode": STAT_FISHER, "factors": np.vstack(blocks), "n_used": 1}


def newton_correction_client(
    clients: list[ClientState],
    leaving: int,
    loss_model: LossModel,
) -> np.ndarray:
    """x_c^D = (1/(N-1)) H_hat^{-1} grad f_c(x_{k,c}) for a departing client."""
    if len(clients) < 2:
        raise ValueError("client-wise removal needs at least two clients")
    leaver = next((c for c in clients if c.id == leaving), None)
    if leaver is None:
        raise ValueError(f"no client with id {leaving}")
    stat = _aggregate_retained_stat(clients, leaving, loss_model.lambda_reg)
    _, grad_c = loss_model.batch_loss_grad(leaver.model, leaver.X, leaver.y)
    return _solve_with_stat(stat, loss_model.lambda_reg, grad_c) / (len(clients) - 1)


# --- flooding --------------------------------------------------------------------


def flood_broadcast(graph: Graph, origin: int, update: CorrectiveUpdate | None = None) -> dict:
    """Forward-on-first-receipt broadcast; returns per-client delivery stats.

    Every node applies (conceptually) on first receipt and discards later
    copies; the report carries hop counts and duplicate counts. Raises
    ProtocolError when some node is unreachable.
    """
    n = graph.n_nodes
    report = {i: {"hops": None, "duplicates": 0} for i in range(n)}
    report[origin]["hops"] = 0
    queue = deque()
    for nb in graph.neighbors(origin):
        queue.append((nb, origin, 1))
    while queue:
        node, sender, hops = queue.popleft()
        if report[node]["hops"] is None:
            report[node]["hops"] = hops
            for nb in graph.neighbors(node):  # ascending id order
                if nb != sender:
                    queue.append((nb, node, hops + 1))
        else:
            report[node]["duplicates"] += 1
    unreachable = [i for i, r in report.items() if r["hops"] is None]
    if unreachable:
        raise ProtocolError(f"flooding never reached clients {unreachable}")
    return report


# --- orchestration -----------------------------------------------------------------


def _apply_update(clients: list[ClientState], update: CorrectiveUpdate, weight: float):
    return [replace(c, model=c.model + weight * update.delta) for c in clients]


def unlearn(
    clients: list[ClientState],
    mixing: MixingMatrix,
    dataset: Dataset,
    request: DeletionRequest,
    loss_model: LossModel,
    constants: SmoothnessConstants,
    options: UnlearnOptions = UnlearnOptions(),
) -> tuple[list[ClientState], list[AuditRecord]]:
    """Run the corrective-update protocol for one deletion request.

    Requires statistics already collected (dpsgd.collect_statistics).
    Sample- and class-wise requests shrink the issuing shards afterwards;
    client-wise removal drops the leaving client from the returned list.
    """
    budget = PrivacyBudget(request.epsilon, request.delta)
    total = sum(len(c.shard) for c in clients)
    capacity = int(options.capacity_fraction * total)
    if request.total_deleted > capacity:
        raise CapacityError(
            f"{request.total_deleted} deletions exceed capacity {capacity} "
            f"({options.capacity_fraction:.0%} of {total})"
        )
    if options.no_noise:
        log.warning("unlearn running with --no-noise: NOT a certified run")

    n_clients = len(clients)
    audits: list[AuditRecord] = []
    seq = 0

    if request.granularity in ("samples", "class"):
        for cid in sorted(request.targets):
            t0 = time.perf_counter()
            client = next(c for c in clients if c.id == cid)
            deleted = request.targets[cid]
            m_c, n_c = len(deleted), client.n_samples
            delta_f = sensitivity(constants, m_c, n_c)
            sigma = 0.0 if options.no_noise else noise_scale(delta_f, budget)
            x_delta = newton_correction_samples(client, deleted, dataset, loss_model)
            seed_c = _derive_noise_seed(options.noise_seed, cid)
            update = CorrectiveUpdate(cid, perturb(x_delta, sigma, seed_c), sigma, seq)
            report = flood_broadcast(mixing.graph, cid, update)
            clients = _apply_update(clients, update, 1.0 / n_clients)
            wall = (time.perf_counter() - t0) * 1e3
            audits.append(
                AuditRecord(
                    client=cid, granularity=request.granularity, m=m_c, n=n_c,
                    lam=constants.lam, L=constants.lipschitz,
                    M=constants.hessian_lipschitz, deltaF=delta_f, sigma=sigma,
                    epsilon=budget.epsilon, delta=budget.delta,
                    noise_seed=seed_c, wall_ms=wall,
                )
            )
            log.debug("update %d from client %d: max hops %s", seq, cid,
                      max(r["hops"] for r in report.values()))
            seq += 1
        clients = remove_deleted_samples(clients, dataset, request)
        return clients, audits

    if request.granularity == "client":
        if len(request.targets) != 1:
            raise DataError("client-wise removal takes exactly one leaving client")
        (leaving,) = request.targets
        t0 = time.perf_counter()
        m_c = len(request.targets[leaving])
        x_delta = newton_correction_client(clients, leaving, loss_model)
        # sensitivity of removing one client mirrors the sample-wise bound at
        # global scale: m = its shard size, n = all samples in the system
        delta_f = sensitivity(constants, m_c, total)
        sigma = 0.0 if options.no_noise else noise_scale(delta_f, budget)
        seed_c = _derive_noise_seed(options.noise_seed, leaving)
        update = CorrectiveUpdate(leaving, perturb(x_delta, sigma, seed_c), sigma, seq)
        flood_broadcast(mixing.graph, leaving, update)
        clients = _apply_update(clients, update, 1.0 / n_clients)
        wall = (time.perf_counter() - t0) * 1e3
        audits.append(
            AuditRecord(
                client=leaving, granularity="client", m=m_c, n=total,
                lam=constants.lam, L=constants.lipschitz,
                M=constants.hessian_lipschitz, deltaF=delta_f, sigma=sigma,
                epsilon=budget.epsilon, delta=budget.delta,
                noise_seed=seed_c, wall_ms=wall,
            )
        )
        return [c for c in clients if c.id != leaving], audits

    raise DataError(f"unknown granularity {request.granularity!r}")


def remove_deleted_samples(
    clients: list[ClientState], dataset: Dataset, request: DeletionRequest
) -> list[ClientState]:
    """Physically drop deleted rows from the issuing shards."""
    out = []
    for c in clients:
        if c.id not in request.targets:
            out.append(c)
            continue
        drop = set(int(v) for v in request.targets[c.id])
        keep = np.array([s for s in c.shard if int(s) not in drop], dtype=np.int64)
        if len(keep) == 0:
            raise DataError(f"client {c.id} has no samples left after deletion")
        out.append(
            replace(
                c,
                shard=keep,
                X=np.ascontiguousarray(dataset.features[keep]),
                y=dataset.labels[keep].copy(),
                hessian_stat=None,
            )
        )
    return out


def finetune(
    clients: list[ClientState],
    mixing: MixingMatrix,
    loss_model: LossModel,
    config: TrainConfig,
    rounds: int = 1,
) -> list[ClientState]:
    """Post-unlearning recovery: standard rounds on the retained shards only.

    This never touches deleted data (the shards were physically shrunk),
    so it is post-processing of the released models and preserves the
    certification.
    """
    if rounds == 0:
        return [replace(c) for c in clients]
    return dpsgd_train(clients, mixing, loss_model, replace(config, rounds=rounds))
