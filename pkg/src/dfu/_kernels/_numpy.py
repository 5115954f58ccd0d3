"""NumPy reference implementation of the numeric kernels.

Every function here has a compiled twin in ``_core.pyx`` with the same
signature. All inputs are float64; feature matrices are (n, p) row-major.
Model vectors are flat: binary logistic / least squares use shape (p,),
softmax uses shape (C*p,) laid out class-major (class c occupies
``[c*p, (c+1)*p)``).

Per-sample losses are the regularized ones: every sample's loss, gradient
and Hessian carry the + (lam/2)*||w||^2 term, so the shard mean of the
per-sample Hessians equals the Hessian of the local objective.
"""

import numpy as np

BACKEND = "numpy"


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    # log(1 + e^z), stable for large |z|
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _softmax_probs(X, w, n_classes):
    p = X.shape[1]
    W = w.reshape(n_classes, p)
    Z = X @ W.T
    Z -= Z.max(axis=1, keepdims=True)
    np.exp(Z, out=Z)
    Z /= Z.sum(axis=1, keepdims=True)
    return Z


# --- batch mean loss + gradient ---------------------------------------------


def batch_loss_grad_sigmoid(X, y, w, lam):
    n = X.shape[0]
    z = X @ w
    loss = float(np.mean(_softplus(z) - y * z)) + 0.5 * lam * float(w @ w)
    grad = X.T @ (_sigmoid(z) - y) / n + lam * w
    return loss, grad


def batch_loss_grad_softmax(X, y, w, n_classes, lam):
    n, p = X.shape
    W = w.reshape(n_classes, p)
    Z = X @ W.T
    zmax = Z.max(axis=1)
    lse = zmax + np.log(np.exp(Z - zmax[:, None]).sum(axis=1))
    idx = np.arange(n)
    loss = float(np.mean(lse - Z[idx, y])) + 0.5 * lam * float(w @ w)
    P = np.exp(Z - lse[:, None])
    P[idx, y] -= 1.0
    grad = (P.T @ X / n).ravel() + lam * w
    return loss, grad


def batch_loss_grad_lstsq(X, y, w, lam):
    n = X.shape[0]
    r = X @ w - y
    loss = 0.5 * float(r @ r) / n + 0.5 * lam * float(w @ w)
    grad = X.T @ r / n + lam * w
    return loss, grad


# --- per-sample losses -------------------------------------------------------


def persample_losses_sigmoid(X, y, w, lam):
    z = X @ w
    return _softplus(z) - y * z + 0.5 * lam * float(w @ w)


def persample_losses_softmax(X, y, w, n_classes, lam):
    n, p = X.shape
    W = w.reshape(n_classes, p)
    Z = X @ W.T
    zmax = Z.max(axis=1)
    lse = zmax + np.log(np.exp(Z - zmax[:, None]).sum(axis=1))
    return lse - Z[np.arange(n), y] + 0.5 * lam * float(w @ w)


def persample_losses_lstsq(X, y, w, lam):
    r = X @ w - y
    return 0.5 * r * r + 0.5 * lam * float(w @ w)


# --- mean per-sample Hessians ------------------------------------------------


def _symmetrize(H):
    # BLAS products are not exactly symmetric; (H + H^T)/2 is (IEEE addition
    # commutes), and the callers' contracts promise exact symmetry
    return (H + H.T) / 2.0


def hessian_mean_sigmoid(X, w, lam):
    n, p = X.shape
    z = X @ w
    s = _sigmoid(z)
    weights = s * (1.0 - s)
    H = _symmetrize((X * weights[:, None]).T @ X / n)
    H[np.diag_indices(p)] += lam
    return H


def hessian_mean_softmax(X, w, n_classes, lam):
    # Per-sample Hessian is kron(diag(p) - p p^T, x x^T); accumulate it
    # block-by-block as weighted Gram matrices so BLAS does the heavy work.
    n, p = X.shape
    P = _softmax_probs(X, w, n_classes)
    d = n_classes * p
    H = np.empty((d, d))
    for c in range(n_classes):
        for c2 in range(c, n_classes):
            wts = -P[:, c] * P[:, c2]
            if c == c2:
                wts = wts + P[:, c]
            block = (X * wts[:, None]).T @ X / n
            if c2 == c:
                block = _symmetrize(block)
            H[c * p:(c + 1) * p, c2 * p:(c2 + 1) * p] = block
            if c2 != c:
                H[c2 * p:(c2 + 1) * p, c * p:(c + 1) * p] = block.T
    H[np.diag_indices(d)] += lam
    return H


def hessian_mean_lstsq(X, lam):
    n, p = X.shape
    H = _symmetrize(X.T @ X / n)
    H[np.diag_indices(p)] += lam
    return H


# --- per-sample gradient rows (Fisher factors) -------------------------------


def grad_rows_sigmoid(X, y, w, lam):
    z = X @ w
    G = X * (_sigmoid(z) - y)[:, None]
    G += lam * w
    return G


def grad_rows_softmax(X, y, w, n_classes, lam):
    n, p = X.shape
    P = _softmax_probs(X, w, n_classes)
    P[np.arange(n), y] -= 1.0
    # row s of G is (p_s - e_{y_s}) kron x_s, flattened class-major
    G = np.einsum("sc,sj->scj", P, X).reshape(n, n_classes * p)
    G += lam * w
    return G


def grad_rows_lstsq(X, y, w, lam):
    r = X @ w - y
    G = X * r[:, None]
    G += lam * w
    return G
