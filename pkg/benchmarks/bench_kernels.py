#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--reps 50]

Prints per-kernel timings for the shapes the pipelines actually run
(small binary-logistic batches from the bound sweep, mid-size softmax
batches from the digit experiments) plus an end-to-end training-round
comparison. The routing table in dfu._kernels reflects these numbers.
"""

import argparse
import time

import numpy as np

from dfu._kernels import _numpy as knp

try:
    from dfu._kernels import _core as kcy
except ImportError:
    kcy = None


def timeit(fn, *args, reps):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps * 1e3


def cases():
    rng = np.random.default_rng(0)
    # small binary shapes (bound sweep, blob experiments)
    Xs = np.ascontiguousarray(rng.normal(size=(50, 11)))
    ys = rng.integers(0, 2, 50).astype(np.float64)
    ws = rng.normal(size=11)
    # mid softmax shapes (digit experiments: 10 classes, 65 features)
    Xm = np.ascontiguousarray(rng.normal(size=(200, 65)))
    ym = rng.integers(0, 10, 200).astype(np.int64)
    yb = rng.integers(0, 2, 200).astype(np.float64)
    wm = rng.normal(size=650) * 0.01
    wb = rng.normal(size=65)
    lam = 1.0
    return [
        ("batch_loss_grad_sigmoid (50x11)", "batch_loss_grad_sigmoid", (Xs, ys, ws, lam)),
        ("batch_loss_grad_sigmoid (200x65)", "batch_loss_grad_sigmoid", (Xm, yb, wb, lam)),
        ("batch_loss_grad_softmax (200x65,C=10)", "batch_loss_grad_softmax", (Xm, ym, wm, 10, lam)),
        ("batch_loss_grad_lstsq (50x11)", "batch_loss_grad_lstsq", (Xs, ys, ws, lam)),
        ("persample_losses_sigmoid (200x65)", "persample_losses_sigmoid", (Xm, yb, wb, lam)),
        ("persample_losses_softmax (200x65)", "persample_losses_softmax", (Xm, ym, wm, 10, lam)),
        ("persample_losses_lstsq (200x65)", "persample_losses_lstsq", (Xm, yb, wb, lam)),
        ("hessian_mean_sigmoid (200x65)", "hessian_mean_sigmoid", (Xm, wb, lam)),
        ("hessian_mean_softmax (200x65,C=10)", "hessian_mean_softmax", (Xm, wm, 10, lam)),
        ("hessian_mean_lstsq (200x65)", "hessian_mean_lstsq", (Xm, lam)),
        ("grad_rows_sigmoid (200x65)", "grad_rows_sigmoid", (Xm, yb, wb, lam)),
        ("grad_rows_softmax (200x65)", "grad_rows_softmax", (Xm, ym, wm, 10, lam)),
        ("grad_rows_lstsq (200x65)", "grad_rows_lstsq", (Xm, yb, wb, lam)),
    ]


def bench_training_round(reps):
    """One synchronous round, 10 clients, under each forced routing."""
    from dfu import data, dpsgd, models, topology

    ds = data.synth_blobs(500, 10, 2, seed=1)
    part = data.partition(ds, 10, "iid", seed=1)
    model = models.LossModel("regularized_logistic", 10, 2, lambda_reg=0.5)
    mix = topology.build_ring(10)
    cfg = dpsgd.TrainConfig(rounds=reps, lr=0.05, batch_size=25, seed=0, metrics_every=10**9)
    clients = dpsgd.make_clients(ds, part, model)
    t0 = time.perf_counter()
    dpsgd.train(clients, mix, model, cfg)
    return (time.perf_counter() - t0) / reps * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=50)
    args = ap.parse_args()

    if kcy is None:
        print("compiled core not built; only the numpy backend is available")
        return

    print(f"{'kernel':45s} {'numpy ms':>10s} {'cython ms':>10s} {'winner':>8s}")
    for label, name, fargs in cases():
        tn = timeit(getattr(knp, name), *fargs, reps=args.reps)
        tc = timeit(getattr(kcy, name), *fargs, reps=args.reps)
        print(f"{label:45s} {tn:10.4f} {tc:10.4f} {'cython' if tc < tn else 'numpy':>8s}")

    ms = bench_training_round(args.reps)
    print(f"\ntraining round (10 clients, active routing): {ms:.3f} ms/round")


if __name__ == "__main__":
    main()
