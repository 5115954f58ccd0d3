"""Numeric kernel backend selection.

The hot per-sample math (loss/gradient batches, per-sample Hessian
accumulation, Fisher gradient factors) lives behind a small function
namespace with two interchangeable implementations:

* ``dfu._kernels._core`` — Cython extension built by setup.py, fused
  single-pass loops;
* ``dfu._kernels._numpy`` — pure NumPy, BLAS-backed.

Neither dominates: the fused loops win where call overhead and temporaries
dominate (small batches, binary-logistic paths), while BLAS wins the
matmul-shaped work (softmax forward passes, Gram-matrix Hessian
accumulation). The default routing below sends each function to the
implementation that measured faster on representative shapes; run
``python benchmarks/bench_kernels.py`` to reproduce the numbers on your
machine.

Environment overrides:
    DFU_PURE_PYTHON=1        use NumPy for everything (no extension needed)
    DFU_FORCE_BACKEND=name   force 'cython' or 'numpy' for every function

Results agree across backends to floating-point reduction order (see
tests/test_kernels.py); a run is deterministic for a fixed routing.
"""

import importlib
import os

from . import _numpy

_NAMES = [
    "batch_loss_grad_sigmoid",
    "batch_loss_grad_softmax",
    "batch_loss_grad_lstsq",
    "persample_losses_sigmoid",
    "persample_losses_softmax",
    "persample_losses_lstsq",
    "hessian_mean_sigmoid",
    "hessian_mean_softmax",
    "hessian_mean_lstsq",
    "grad_rows_sigmoid",
    "grad_rows_softmax",
    "grad_rows_lstsq",
]

# Preferred implementation when the compiled core is importable. The
# BLAS-shaped ops stay on numpy; the fused loops take the rest.
_ROUTE = {
    "batch_loss_grad_sigmoid": "cython",
    "batch_loss_grad_softmax": "numpy",
    "batch_loss_grad_lstsq": "cython",
    "persample_losses_sigmoid": "cython",
    "persample_losses_softmax": "numpy",
    "persample_losses_lstsq": "cython",
    "hessian_mean_sigmoid": "numpy",
    "hessian_mean_softmax": "numpy",
    "hessian_mean_lstsq": "numpy",
    "grad_rows_sigmoid": "cython",
    "grad_rows_softmax": "cython",
    "grad_rows_lstsq": "cython",
}

_core = None
if os.environ.get("DFU_PURE_PYTHON", "") != "1":
    try:
        _core = importlib.import_module(__name__ + "._core")
    except ImportError:
        _core = None

_force = os.environ.get("DFU_FORCE_BACKEND", "")
if _core is None or _force == "numpy":
    ACTIVE_BACKEND = "numpy"
    _table = {name: _numpy for name in _NAMES}
elif _force == "cython":
    ACTIVE_BACKEND = "cython"
    _table = {name: _core for name in _NAMES}
else:
    ACTIVE_BACKEND = "cython+numpy"
    _table = {
        name: (_core if _ROUTE[name] == "cython" else _numpy) for name in _NAMES
    }

batch_loss_grad_sigmoid = _table["batch_loss_grad_sigmoid"].batch_loss_grad_sigmoid
batch_loss_grad_softmax = _table["batch_loss_grad_softmax"].batch_loss_grad_softmax
batch_loss_grad_lstsq = _table["batch_loss_grad_lstsq"].batch_loss_grad_lstsq
persample_losses_sigmoid = _table["persample_losses_sigmoid"].persample_losses_sigmoid
persample_losses_softmax = _table["persample_losses_softmax"].persample_losses_softmax
persample_losses_lstsq = _table["persample_losses_lstsq"].persample_losses_lstsq
hessian_mean_sigmoid = _table["hessian_mean_sigmoid"].hessian_mean_sigmoid
hessian_mean_softmax = _table["hessian_mean_softmax"].hessian_mean_softmax
hessian_mean_lstsq = _table["hessian_mean_lstsq"].hessian_mean_lstsq
grad_rows_sigmoid = _table["grad_rows_sigmoid"].grad_rows_sigmoid
grad_rows_softmax = _table["grad_rows_softmax"].grad_rows_softmax
grad_rows_lstsq = _table["grad_rows_lstsq"].grad_rows_lstsq


def backends():
    """Importable backend modules, numpy first."""
    found = [_numpy]
    if _core is not None:
        found.append(_core)
    return found
