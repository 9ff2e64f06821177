"""Dataset generation, loading, client partitioning, and label-noise injection.

Partitioning maps one source dataset onto K client stores. Four regimes:

* ``iid``          shuffled equal-size split (sizes differ by at most 1)
* ``label_skew``   per-class proportions drawn from a symmetric Dirichlet
* ``grouped``      one client per distinct group key (K = number of keys)
* ``grouped_iid``  whole groups randomly assigned to K bins

All operations are pure functions of (dataset, spec, generator); partitions
are disjoint, exhaustive, and fixed for the life of a run.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PARTITION_KINDS = ("iid", "label_skew", "grouped", "grouped_iid")


@dataclass
class Dataset:
    """Feature matrix, integer labels, and an optional per-example group key."""

    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must align with feature rows")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if self.groups.shape != (self.features.shape[0],):
                raise ValueError("groups must align with feature rows")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def take(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        groups = self.groups[idx] if self.groups is not None else None
        return Dataset(self.features[idx], self.labels[idx], groups)


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across clients.

    ``clients`` is required for iid / label_skew / grouped_iid; for
    ``grouped`` the client count equals the number of distinct group keys.
    ``concentration`` is the symmetric Dirichlet parameter for label_skew
    (small = heavily skewed, large = near-uniform).
    """

    kind: str
    clients: int | None = None
    concentration: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in PARTITION_KINDS:
            raise ValueError(f"unknown partition kind {self.kind!r}, expected one of {PARTITION_KINDS}")
        if self.kind in ("iid", "label_skew", "grouped_iid"):
            if self.clients is None or self.clients < 1:
                raise ValueError(f"partition kind {self.kind!r} needs clients >= 1")
        if self.kind == "label_skew":
            if self.concentration is None or self.concentration <= 0:
                raise ValueError("label_skew needs concentration > 0")


@dataclass(frozen=True)
class NoiseSpec:
    """Label corruption: a fraction of clients whose labels flip with probability p."""

    noisy_client_fraction: float = 0.0
    label_flip_prob: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.noisy_client_fraction <= 1.0:
            raise ValueError("noisy_client_fraction must be in [0, 1]")
        if not 0.0 <= self.label_flip_prob <= 1.0:
            raise ValueError("label_flip_prob must be in [0, 1]")


# ---------------------------------------------------------------------------
# generation and eval-set carving
# ---------------------------------------------------------------------------


def generate_synthetic(
    classes: int,
    dims: int,
    examples: int,
    cluster_spread: float,
    rng: np.random.Generator,
    groups: int | None = None,
) -> Dataset:
    """Gaussian class clusters with near-uniform class priors.

    Class means are standard-normal draws; examples sit at mean + spread * noise,
    so spread -> 0 collapses each class onto its own point. Group keys (when
    requested) are assigned round-robin, independent of class.
    """
    if classes < 1 or dims < 1 or examples < 1:
        raise ValueError("classes, dims and examples must all be >= 1")
    if cluster_spread < 0:
        raise ValueError(f"cluster_spread must be >= 0, got {cluster_spread}")
    means = rng.normal(size=(classes, dims))
    labels = rng.permutation(np.arange(examples) % classes)
    features = means[labels] + cluster_spread * rng.normal(size=(examples, dims))
    group_keys = np.arange(examples) % groups if groups else None
    return Dataset(features, labels, group_keys)


def split_indices(
    n: int,
    val_fraction: float,
    rehearsal_fraction: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random (train, validation, rehearsal) index split of range(n)."""
    if val_fraction < 0 or rehearsal_fraction < 0 or val_fraction + rehearsal_fraction >= 1:
        raise ValueError("eval fractions must be >= 0 and sum to < 1")
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    n_reh = int(round(n * rehearsal_fraction))
    val = perm[:n_val]
    rehearsal = perm[n_val : n_val + n_reh]
    train = perm[n_val + n_reh :]
    return train, val, rehearsal


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


def partition_indices(
    dataset: Dataset, spec: PartitionSpec, rng: np.random.Generator
) -> list[np.ndarray]:
    """Index lists per client; disjoint and exhaustive over the dataset."""
    n = len(dataset)
    if spec.kind == "iid":
        if n < spec.clients:
            raise ValueError(
                f"cannot split {n} examples into {spec.clients} non-empty parts"
            )
        return [np.sort(p) for p in np.array_split(rng.permutation(n), spec.clients)]

    if spec.kind == "label_skew":
        k = spec.clients
        parts: list[list[np.ndarray]] = [[] for _ in range(k)]
        for c in np.unique(dataset.labels):
            idx = rng.permutation(np.flatnonzero(dataset.labels == c))
            props = rng.dirichlet(np.full(k, spec.concentration))
            cuts = np.floor(np.cumsum(props) * len(idx)).astype(int)[:-1]
            for client, chunk in enumerate(np.split(idx, cuts)):
                parts[client].append(chunk)
        return [
            np.sort(np.concatenate(p)) if p else np.empty(0, dtype=np.int64) for p in parts
        ]

    if dataset.groups is None:
        raise ValueError(f"partition kind {spec.kind!r} needs a dataset with group keys")
    keys = np.unique(dataset.groups)

    if spec.kind == "grouped":
        return [np.flatnonzero(dataset.groups == key) for key in keys]

    # grouped_iid: whole groups shuffled into K bins, never splitting a group
    if len(keys) < spec.clients:
        raise ValueError(
            f"{len(keys)} groups cannot fill {spec.clients} clients with >= 1 group each"
        )
    shuffled = rng.permutation(keys)
    bins = np.array_split(shuffled, spec.clients)
    return [
        np.sort(np.flatnonzero(np.isin(dataset.groups, bin_keys))) for bin_keys in bins
    ]


def partition(
    dataset: Dataset, spec: PartitionSpec, rng: np.random.Generator
) -> list[Dataset]:
    return [dataset.take(idx) for idx in partition_indices(dataset, spec, rng)]


def inject_label_noise(
    parts: list[Dataset],
    noise: NoiseSpec,
    rng: np.random.Generator,
    num_classes: int | None = None,
) -> tuple[list[Dataset], list[int]]:
    """Flip labels on a random subset of clients; features are never touched.

    Returns the new client datasets plus the noisy client ids (ground truth
    for evaluation only; never exposed to weighting strategies).
    """
    if noise.noisy_client_fraction == 0.0 or noise.label_flip_prob == 0.0:
        return parts, []
    if num_classes is None:
        num_classes = max((p.n_classes for p in parts if len(p)), default=0)
    if num_classes < 2:
        raise ValueError("label noise needs at least 2 classes")
    n_noisy = math.ceil(noise.noisy_client_fraction * len(parts))
    noisy_ids = sorted(rng.choice(len(parts), size=n_noisy, replace=False).tolist())
    out = list(parts)
    for cid in noisy_ids:
        ds = parts[cid]
        if len(ds) == 0:
            continue
        labels = ds.labels.copy()
        flip = rng.random(len(ds)) < noise.label_flip_prob
        # uniform draw over the other classes: shift draws at/after the old label
        draws = rng.integers(0, num_classes - 1, size=int(flip.sum()))
        old = labels[flip]
        labels[flip] = draws + (draws >= old)
        out[cid] = Dataset(ds.features, labels, ds.groups)
    return out, noisy_ids


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def load_csv(path: str | Path) -> Dataset:
    """Header row with a required "label" column, optional "group", numeric features."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise ValueError(f"{path}: missing required column 'label'")
        label_col = header.index("label")
        group_col = header.index("group") if "group" in header else None
        feature_cols = [
            i for i in range(len(header)) if i != label_col and i != group_col
        ]
        features, labels, groups = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                labels.append(int(row[label_col]))
                features.append([float(row[i]) for i in feature_cols])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
            if group_col is not None:
                groups.append(row[group_col])
    if not features:
        raise ValueError(f"{path}: no data rows")
    return Dataset(
        np.asarray(features),
        np.asarray(labels),
        np.asarray(groups) if groups else None,
    )


def _read_idx(path: Path, expect_dims: int) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated header")
    zero1, zero2, dtype, ndims = struct.unpack(">4B", data[:4])
    if zero1 != 0 or zero2 != 0:
        raise ValueError(f"{path}: bad magic bytes {data[:2]!r} at offset 0")
    if dtype != 0x08:
        raise ValueError(f"{path}: unsupported dtype 0x{dtype:02x} (only unsigned byte)")
    if ndims != expect_dims:
        raise ValueError(f"{path}: expected {expect_dims} dimensions, got {ndims}")
    header_len = 4 + 4 * ndims
    if len(data) < header_len:
        raise ValueError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndims}I", data[4:header_len])
    count = int(np.prod(dims))
    if len(data) != header_len + count:
        raise ValueError(
            f"{path}: payload is {len(data) - header_len} bytes, expected {count}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Big-endian idx image/label file pair; pixels scaled to [0, 1]."""
    images = _read_idx(Path(images_path), expect_dims=3)
    labels = _read_idx(Path(labels_path), expect_dims=1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64))


def load_dataset(
    path: str | Path, fmt: str, labels_path: str | Path | None = None
) -> Dataset:
    if fmt == "csv":
        return load_csv(path)
    if fmt == "idx":
        if labels_path is None:
            raise ValueError("idx format needs a labels_path")
        return load_idx(path, labels_path)
    raise ValueError(f"unknown dataset format {fmt!r}")
