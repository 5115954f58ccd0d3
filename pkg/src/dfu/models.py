"""Convex per-sample loss families with exact derivatives and constants.

Three families, all carrying an L2 regularizer (lam/2)*||w||^2 inside the
per-sample loss so shard means stay consistent with the per-sample view:

* ``least_squares``      0.5*(<w,a> - y)^2
* ``regularized_logistic`` with 2 classes: binary cross-entropy on a single
  logit <w,a>, labels in {0,1}
* ``regularized_logistic`` with C > 2 classes: multinomial cross-entropy on
  logits W a, model flattened class-major to shape (C*p,)

The smoothness constants (strong convexity lam, smoothness mu, Lipschitz L,
Hessian-Lipschitz M) are conservative analytic bounds from the feature norm
bound B; the noise calibration must never under-estimate them, so they are
derived, not fitted. The Lipschitz constant is taken over the ball
||w|| <= R with R = L_unreg/lam, which contains every regularized empirical
minimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

__all__ = [
    "LossModel",
    "SmoothnessConstants",
    "newton_minimize",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = "dfu-model v1"
M_FLOOR = 1e-12  # quadratic losses have M = 0; keep the noise path non-degenerate


@dataclass(frozen=True)
class SmoothnessConstants:
    lam: float
    mu: float
    lipschitz: float
    hessian_lipschitz: float

    def __post_init__(self):
        if min(self.lam, self.mu, self.lipschitz, self.hessian_lipschitz) <= 0:
            raise ValueError("smoothness constants must be strictly positive")
        if self.mu < self.lam:
            raise ValueError("mu must be >= lam")


@dataclass
class LossModel:
    """A loss family bound to a model dimension and regularizer."""

    kind: str  # "regularized_logistic" | "least_squares"
    n_features: int
    n_classes: int = 2
    lambda_reg: float = 0.0
    feature_bound: float | None = None  # max sample norm B, set from data
    label_bound: float = 1.0  # max |y|, least squares only

    def __post_init__(self):
        if self.kind not in ("regularized_logistic", "least_squares"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "least_squares" and self.n_classes != 2:
            raise ValueError("least_squares has no class count")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")

    # --- shape -----------------------------------------------------------

    @property
    def multinomial(self) -> bool:
        return self.kind == "regularized_logistic" and self.n_classes > 2

    @property
    def dim(self) -> int:
        if self.multinomial:
            return self.n_classes * self.n_features
        return self.n_features

    @property
    def domain_radius(self) -> float:
        """Ball radius containing the regularized minimizer (R = L_unreg/lam)."""
        if self.feature_bound is None:
            raise ValueError("feature_bound not set")
        if self.lambda_reg <= 0:
            return math.inf
        return self._unregularized_lipschitz(self.feature_bound) / self.lambda_reg

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)

    def _check(self, w: np.ndarray, X: np.ndarray) -> None:
        if w.shape != (self.dim,):
            raise ValueError(f"model has dim {w.shape}, expected ({self.dim},)")
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"features have shape {X.shape}, expected (*, {self.n_features})")

    def _labels(self, y: np.ndarray) -> np.ndarray:
        if self.multinomial:
            return np.ascontiguousarray(y, dtype=np.int64)
        return np.ascontiguousarray(y, dtype=np.float64)

    # --- batch evaluators (kernel-backed) ----------------------------------

    def batch_loss_grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray):
        self._check(w, X)
        X = np.ascontiguousarray(X, dtype=np.float64)
        yy = self._labels(y)
        if self.kind == "least_squares":
            return K.batch_loss_grad_lstsq(X, yy, w, self.lambda_reg)
        if self.multinomial:
            return K.batch_loss_grad_softmax(X, yy, w, self.n_classes, self.lambda_reg)
        return K.batch_loss_grad_sigmoid(X, yy, w, self.lambda_reg)

    def persample_losses(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        self._check(w, X)
        X = np.ascontiguousarray(X, dtype=np.float64)
        yy = self._labels(y)
        if self.kind == "least_squares":
            return K.persample_losses_lstsq(X, yy, w, self.lambda_reg)
        if self.multinomial:
            return K.persample_losses_softmax(X, yy, w, self.n_classes, self.lambda_reg)
        return K.persample_losses_sigmoid(X, yy, w, self.lambda_reg)

    def hessian_mean(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Mean of per-sample Hessians over the rows of X (includes lam*I)."""
        self._check(w, X)
        X = np.ascontiguousarray(X, dtype=np.float64)
        if self.kind == "least_squares":
            return K.hessian_mean_lstsq(X, self.lambda_reg)
        if self.multinomial:
            return K.hessian_mean_softmax(X, w, self.n_classes, self.lambda_reg)
        return K.hessian_mean_sigmoid(X, w, self.lambda_reg)

    def grad_rows(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample regularized gradients, one row per sample."""
        self._check(w, X)
        X = np.ascontiguousarray(X, dtype=np.float64)
        yy = self._labels(y)
        if self.kind == "least_squares":
            return K.grad_rows_lstsq(X, yy, w, self.lambda_reg)
        if self.multinomial:
            return K.grad_rows_softmax(X, yy, w, self.n_classes, self.lambda_reg)
        return K.grad_rows_sigmoid(X, yy, w, self.lambda_reg)

    # --- single-sample evaluators ------------------------------------------

    def loss(self, w: np.ndarray, sample) -> float:
        a, y = sample
        return float(self.persample_losses(w, np.atleast_2d(a), np.atleast_1d(y))[0])

    def grad(self, w: np.ndarray, sample) -> np.ndarray:
        a, y = sample
        return self.grad_rows(w, np.atleast_2d(a), np.atleast_1d(y))[0]

    def hessian(self, w: np.ndarray, sample) -> np.ndarray:
        a, _ = sample
        return self.hessian_mean(w, np.atleast_2d(a))

    # --- prediction ----------------------------------------------------------

    def predict(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        self._check(w, X)
        if self.kind == "least_squares":
            return X @ w
        if self.multinomial:
            W = w.reshape(self.n_classes, self.n_features)
            return np.argmax(X @ W.T, axis=1)
        return (X @ w > 0).astype(np.int64)

    def accuracy(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        if self.kind == "least_squares":
            raise ValueError("accuracy is undefined for regression")
        return float(np.mean(self.predict(w, X) == np.asarray(y)))

    # --- analytic constants ----------------------------------------------------

    def _unregularized_lipschitz(self, B: float) -> float:
        if self.kind == "regularized_logistic":
            if self.multinomial:
                # binary bound stacked across classes: factor sqrt(C)
                return math.sqrt(self.n_classes) * B
            return B
        # least squares: gradient norm grows with ||w||; solve the fixed point
        # R = B*(B*R + y_max)/lam, finite only when lam > B^2
        lam, ymax = self.lambda_reg, self.label_bound
        if lam <= B * B:
            return math.inf
        R = B * ymax / (lam - B * B)
        return B * (B * R + ymax)

    def constants(self, data_bound: float | None = None) -> SmoothnessConstants:
        """Conservative (lam, mu, L, M) from the feature norm bound B."""
        B = self.feature_bound if data_bound is None else data_bound
        if B is None or B <= 0:
            raise ValueError("need a positive feature bound B")
        lam = self.lambda_reg
        if lam <= 0:
            raise ValueError("constants require lambda_reg > 0")
        L_unreg = self._unregularized_lipschitz(B)
        R = L_unreg / lam
        if self.kind == "regularized_logistic":
            mu = B * B / 4.0 + lam
            M = B**3 / (6.0 * math.sqrt(3.0))
            if self.multinomial:
                L = L_unreg + lam * R  # = 2*sqrt(C)*B
            else:
                L = B + lam * R  # = 2B
        else:
            mu = B * B + lam
            M = M_FLOOR
            L = L_unreg + lam * R if math.isfinite(R) else math.inf
        return SmoothnessConstants(lam=lam, mu=mu, lipschitz=L, hessian_lipschitz=M)


def newton_minimize(
    model: LossModel,
    X: np.ndarray,
    y: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> np.ndarray:
    """Full-batch Newton descent to gradient norm <= tol.

    Exact on quadratics; on logistic losses the lam*I term keeps every
    Hessian PD so plain (undamped) steps converge at this scale.
    """
    w = model.zeros()
    for _ in range(max_iter):
        _, g = model.batch_loss_grad(w, X, y)
        if np.linalg.norm(g) <= tol:
            return w
        H = model.hessian_mean(w, X)
        w = w - np.linalg.solve(H, g)
    _, g = model.batch_loss_grad(w, X, y)
    if np.linalg.norm(g) > tol:
        raise RuntimeError(f"newton_minimize stalled at ||g||={np.linalg.norm(g):.3e}")
    return w


# --- checkpoint files --------------------------------------------------------


def save_checkpoint(w: np.ndarray, path, config_hash: str | None = None) -> None:
    """Text format: header ``dfu-model v1 dim=<d>`` then one float per line."""
    header = f"{CHECKPOINT_MAGIC} dim={w.shape[0]}"
    if config_hash:
        header += f" config={config_hash}"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for v in w:
            fh.write(repr(float(v)) + "\n")


def load_checkpoint(path) -> tuple[np.ndarray, str | None]:
    with open(path) as fh:
        header = fh.readline().strip()
        parts = header.split()
        if parts[:2] != CHECKPOINT_MAGIC.split() or not parts[2].startswith("dim="):
            raise ValueError(f"bad checkpoint header: {header!r}")
        dim = int(parts[2][4:])
        config_hash = None
        for tok in parts[3:]:
            if tok.startswith("config="):
                config_hash = tok[7:]
        w = np.array([float(line) for line in fh if line.strip()])
    if w.shape[0] != dim:
        raise ValueError(f"checkpoint declares dim={dim} but has {w.shape[0]} values")
    return w, config_hash
