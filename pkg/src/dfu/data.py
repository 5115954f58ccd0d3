"""Dataset ingestion, synthetic generation, partitioning, deletion requests.

Datasets are immutable (features, labels) pairs with the max sample norm B
cached; every sampling operation is deterministic under its seed. Client
shards are index lists into a shared Dataset, never copies.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "Dataset",
    "Partition",
    "DeletionRequest",
    "DataError",
    "load_csv",
    "load_idx",
    "write_idx",
    "synth_blobs",
    "partition",
    "make_request",
    "preprocess",
    "digits_dataset",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed input data or impossible partition/request constraints."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64 for classification, float64 for regression
    normalization: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise DataError("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN/Inf")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def feature_bound(self) -> float:
        """Max row norm B (cached)."""
        if "_B" not in self.normalization:
            self.normalization["_B"] = float(
                np.linalg.norm(self.features, axis=1).max(initial=0.0)
            )
        return self.normalization["_B"]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class Partition:
    """Disjoint client shards covering (a subset of) one dataset."""

    client_indices: tuple[np.ndarray, ...]

    def __post_init__(self):
        seen: set[int] = set()
        for i, idx in enumerate(self.client_indices):
            if len(idx) == 0:
                raise DataError(f"client {i} has an empty shard")
            s = set(int(v) for v in idx)
            if seen & s:
                raise DataError("client shards overlap")
            seen |= s

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def shard(self, i: int) -> np.ndarray:
        return self.client_indices[i]


@dataclass(frozen=True)
class DeletionRequest:
    """Per-client dataset indices to forget, plus the privacy budget."""

    granularity: str  # "samples" | "class" | "client"
    targets: dict[int, np.ndarray]  # client id -> indices into the Dataset
    epsilon: float
    delta: float
    class_label: int | None = None

    def __post_init__(self):
        if self.granularity not in ("samples", "class", "client"):
            raise DataError(f"unknown granularity {self.granularity!r}")
        if self.epsilon <= 0 or not (0.0 < self.delta < 1.0):
            raise DataError("need epsilon > 0 and delta in (0, 1)")

    @property
    def total_deleted(self) -> int:
        return sum(len(v) for v in self.targets.values())


# --- loaders -------------------------------------------------------------------


def load_csv(path, has_header: bool = False, regression: bool = False) -> Dataset:
    """Numeric CSV, last column is the label."""
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if has_header and lineno == 1:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
                if width < 2:
                    raise DataError(f"{path}: need at least one feature column")
            elif len(cells) != width:
                raise DataError(f"{path}: row {lineno} has {len(cells)} cells, expected {width}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows)
    labels = arr[:, -1] if regression else arr[:, -1].astype(np.int64)
    return Dataset(features=np.ascontiguousarray(arr[:, :-1]), labels=labels)


def _read_idx_header(fh, path, expect_magic, expect_dims):
    head = fh.read(4 * (1 + expect_dims))
    if len(head) != 4 * (1 + expect_dims):
        raise DataError(f"{path}: truncated IDX header at offset {len(head)}")
    words = struct.unpack(f">{1 + expect_dims}I", head)
    if words[0] != expect_magic:
        raise DataError(f"{path}: bad IDX magic 0x{words[0]:08x}, expected 0x{expect_magic:08x}")
    return words[1:]


def load_idx(image_path, label_path) -> Dataset:
    """MNIST-format IDX pair; pixels scaled to [0, 1], images flattened."""
    with open(image_path, "rb") as fh:
        n, rows, cols = _read_idx_header(fh, image_path, IDX_IMAGE_MAGIC, 3)
        raw = fh.read(n * rows * cols)
        if len(raw) != n * rows * cols:
            raise DataError(f"{image_path}: expected {n*rows*cols} pixels, got {len(raw)}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    with open(label_path, "rb") as fh:
        (n_lab,) = _read_idx_header(fh, label_path, IDX_LABEL_MAGIC, 1)
        raw = fh.read(n_lab)
        if len(raw) != n_lab:
            raise DataError(f"{label_path}: expected {n_lab} labels, got {len(raw)}")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n_lab != n:
        raise DataError(f"IDX pair mismatch: {n} images vs {n_lab} labels")
    return Dataset(features=images.astype(np.float64) / 255.0, labels=labels)


def write_idx(features01: np.ndarray, labels: np.ndarray, image_path, label_path,
              rows: int, cols: int) -> None:
    """Write [0,1]-scaled features as an IDX image/label pair (byte-quantized)."""
    n = len(features01)
    pix = np.clip(np.rint(features01 * 255.0), 0, 255).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(pix.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# --- synthetic data -------------------------------------------------------------


def synth_blobs(n: int, d: int, classes: int, seed: int) -> Dataset:
    """Unit-variance Gaussian class blobs, means on a radius-3 sphere.

    Feature rows are clipped to norm <= 4 so the analytic constants (and
    with them the calibrated noise scale) stay small.
    """
    if min(n, d, classes) < 1:
        raise DataError("n, d, classes must all be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, d))
    means *= 3.0 / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.integers(0, classes, size=n)
    feats = means[labels] + rng.normal(size=(n, d))
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    over = norms[:, 0] > 4.0
    feats[over] *= 4.0 / norms[over]
    return Dataset(features=feats, labels=labels.astype(np.int64))


# --- preprocessing ----------------------------------------------------------------


def preprocess(
    train: Dataset,
    test: Dataset | None = None,
    *,
    standardize: bool = False,
    add_bias: bool = False,
    unit_ball: bool = False,
):
    """Fit feature transforms on the training set and apply to both splits.

    unit_ball rescales all features by the max training row norm so the
    cached bound B becomes exactly 1 on the training split.
    """
    record: dict = {}
    Xtr = train.features.copy()
    Xte = test.features.copy() if test is not None else None
    if standardize:
        mu = Xtr.mean(axis=0)
        sd = Xtr.std(axis=0)
        sd[sd < 1e-9] = 1.0
        Xtr = (Xtr - mu) / sd
        if Xte is not None:
            Xte = (Xte - mu) / sd
        record["standardize"] = {"mean": mu, "std": sd}
    if add_bias:
        Xtr = np.hstack([Xtr, np.ones((len(Xtr), 1))])
        if Xte is not None:
            Xte = np.hstack([Xte, np.ones((len(Xte), 1))])
        record["bias"] = True
    if unit_ball:
        scale = float(np.linalg.norm(Xtr, axis=1).max())
        if scale > 0:
            Xtr /= scale
            if Xte is not None:
                Xte /= scale
        record["unit_ball_scale"] = scale
    out_tr = Dataset(np.ascontiguousarray(Xtr), train.labels.copy(), dict(record))
    out_te = None
    if test is not None:
        out_te = Dataset(np.ascontiguousarray(Xte), test.labels.copy(), dict(record))
    return out_tr, out_te


# --- partitioning ------------------------------------------------------------------


def partition(dataset: Dataset, n_clients: int, mode: str, seed: int,
              alpha: float = 0.3) -> Partition:
    """Split sample indices across clients.

    iid: shuffled equal split, remainder going to the lowest client ids.
    dirichlet: per-class proportions drawn from Dir(alpha * 1_N), then
    minimally rebalanced so every shard has >= max(1, n/(4N)) samples.
    """
    n = len(dataset)
    if n_clients < 1 or n_clients > n:
        raise DataError(f"cannot split {n} samples across {n_clients} clients")
    rng = np.random.default_rng(seed)
    if mode == "iid":
        perm = rng.permutation(n)
        base, extra = divmod(n, n_clients)
        shards, at = [], 0
        for i in range(n_clients):
            size = base + (1 if i < extra else 0)
            shards.append(np.sort(perm[at:at + size]))
            at += size
        return Partition(tuple(shards))
    if mode != "dirichlet":
        raise DataError(f"unknown partition mode {mode!r}")

    labels = np.asarray(dataset.labels, dtype=np.int64)
    shards_l: list[list[int]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        cls_idx = rng.permutation(np.flatnonzero(labels == cls))
        props = rng.dirichlet(np.full(n_clients, alpha))
        counts = np.floor(props * len(cls_idx)).astype(int)
        # distribute the remainder by largest fractional part
        rem = len(cls_idx) - counts.sum()
        frac = props * len(cls_idx) - counts
        for j in np.argsort(-frac)[:rem]:
            counts[j] += 1
        at = 0
        for i in range(n_clients):
            shards_l[i].extend(int(v) for v in cls_idx[at:at + counts[i]])
            at += counts[i]

    floor = max(1, n // (4 * n_clients))
    sizes = np.array([len(s) for s in shards_l])
    while sizes.min() < floor:
        poor = int(np.argmin(sizes))
        rich = int(np.argmax(sizes))
        take = min(sizes[rich] - floor, floor - sizes[poor])
        if take <= 0:
            raise DataError("dirichlet rebalancing cannot reach the shard floor")
        moved = rng.choice(len(shards_l[rich]), size=take, replace=False)
        moved_set = set(int(m) for m in moved)
        moving = [v for k, v in enumerate(shards_l[rich]) if k in moved_set]
        shards_l[rich] = [v for k, v in enumerate(shards_l[rich]) if k not in moved_set]
        shards_l[poor].extend(moving)
        sizes = np.array([len(s) for s in shards_l])
    return Partition(tuple(np.sort(np.array(s, dtype=np.int64)) for s in shards_l))


# --- deletion requests ---------------------------------------------------------------


def make_request(part: Partition, dataset: Dataset, spec: dict) -> DeletionRequest:
    """Materialize per-client deletion index sets from a request spec.

    spec keys: granularity; epsilon; delta; seed; then one of
      samples: fraction (applied per client) and optional clients list
      class:   class_label (all clients holding that class)
      client:  client (id whose entire shard is removed)
    """
    gran = spec["granularity"]
    eps, delta = float(spec["epsilon"]), float(spec["delta"])
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    targets: dict[int, np.ndarray] = {}

    if gran == "samples":
        clients = spec.get("clients", list(range(part.n_clients)))
        frac = spec.get("fraction")
        for c in clients:
            shard = part.shard(c)
            if "sample_indices" in spec:
                idx = np.asarray(spec["sample_indices"], dtype=np.int64)
            else:
                m = int(round(frac * len(shard)))
                idx = np.sort(rng.choice(shard, size=m, replace=False)) if m else np.array([], dtype=np.int64)
            if not set(int(v) for v in idx) <= set(int(v) for v in shard):
                raise DataError(f"request indices are not in client {c}'s shard")
            if len(idx):
                targets[int(c)] = idx
        if not targets:
            raise DataError("sample-wise request resolved to an empty target set")
        return DeletionRequest("samples", targets, eps, delta)

    if gran == "class":
        label = int(spec["class_label"])
        for c in range(part.n_clients):
            shard = part.shard(c)
            idx = shard[np.asarray(dataset.labels)[shard] == label]
            if len(idx):
                targets[int(c)] = idx
            else:
                warnings.warn(f"client {c} holds no samples of class {label}", stacklevel=2)
        if not targets:
            raise DataError(f"class {label} is absent from every client")
        return DeletionRequest("class", targets, eps, delta, class_label=label)

    if gran == "client":
        c = int(spec["client"])
        targets[c] = part.shard(c).copy()
        return DeletionRequest("client", targets, eps, delta)

    raise DataError(f"unknown granularity {gran!r}")


# --- offline digit images (MNIST-format stand-in) --------------------------------------


def digits_dataset(train_size: int = 2000, test_size: int = 1000, seed: int = 0,
                   pixel_noise: float = 0.01):
    """Deterministic 8x8 handwritten-digit splits in MNIST IDX semantics.

    Built from scikit-learn's bundled digit images (no network access
    needed). The base images are split into disjoint train/test pools
    before augmentation, so no source digit appears on both sides; pools
    are grown with small Gaussian pixel-noise copies to reach the
    requested sizes. Pixels end up in [0, 1] like a parsed IDX file.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    X = raw.data / 16.0
    y = raw.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(X))
    cut = int(len(X) * 0.72)
    pools = {"train": perm[:cut], "test": perm[cut:]}
    out = {}
    for name, base, want in (("train", pools["train"], train_size),
                             ("test", pools["test"], test_size)):
        copies = max(1, -(-want // len(base)))  # ceil
        feats = [X[base]]
        labs = [y[base]]
        for _ in range(copies):
            feats.append(np.clip(X[base] + rng.normal(0, pixel_noise, (len(base), 64)), 0, 1))
            labs.append(y[base])
        feats = np.vstack(feats)
        labs = np.concatenate(labs)
        if want > len(feats):
            raise DataError(f"cannot draw {want} samples from a pool of {len(feats)}")
        pick = rng.choice(len(feats), size=want, replace=False)
        out[name] = Dataset(np.ascontiguousarray(feats[pick]), labs[pick])
    return out["train"], out["test"]
