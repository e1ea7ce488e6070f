"""Synthetic datasets, file loaders, and non-IID client partitioners.

Partitioners only ever look at labels; every plan is a list of disjoint
index arrays into the source dataset and is reproducible from its seed.
"""

from __future__ import annotations

import csv as _csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import as_rng


@dataclass
class Dataset:
    """Feature matrix, integer labels, and an optional label->superclass map."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    superclass_map: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.n_classes = int(self.n_classes)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be (N, d) and labels (N,)")
        if len(self.inputs) != len(self.labels):
            raise ValueError(
                f"inputs have {len(self.inputs)} rows but labels have {len(self.labels)}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.superclass_map is not None:
            self.superclass_map = np.asarray(self.superclass_map, dtype=np.int64)
            if self.superclass_map.shape != (self.n_classes,):
                raise ValueError("superclass_map must assign a superclass to every label")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, self.superclass_map)


@dataclass
class PartitionPlan:
    """Per-client index lists into one dataset; disjoint, each nonempty."""

    client_indices: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]
        seen: set[int] = set()
        for cid, ix in enumerate(self.client_indices):
            if len(ix) == 0:
                raise ValueError(f"client {cid} received no data")
            as_set = set(int(i) for i in ix)
            if seen & as_set:
                raise ValueError("client index lists overlap")
            seen |= as_set

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def to_json(self) -> dict:
        return {"clients": [ix.tolist() for ix in self.client_indices]}

    @classmethod
    def from_json(cls, obj: dict) -> "PartitionPlan":
        return cls([np.asarray(ix, dtype=np.int64) for ix in obj["clients"]])


def split_dataset(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffled train/test split keeping at least one example per side."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = as_rng(seed)
    order = rng.permutation(len(dataset))
    n_test = min(max(int(round(test_fraction * len(dataset))), 1), len(dataset) - 1)
    return dataset.subset(order[n_test:]), dataset.subset(order[:n_test])


# ---------------------------------------------------------------------------
# Generators

def _spread_means(rng: np.random.Generator, n: int, dim: int, min_distance: float) -> np.ndarray:
    """Gaussian-drawn centers rescaled so the closest pair sits at min_distance."""
    means = rng.standard_normal((n, dim))
    if n == 1:
        return means
    dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    closest = dists[~np.eye(n, dtype=bool)].min()
    if closest <= 0:
        raise ValueError("degenerate centers; use a different seed")
    return means * (min_distance / closest)


def synth_blobs(
    n_classes: int, n_per_class: int, dim: int, separation: float, seed: int
) -> Dataset:
    """Unit-variance Gaussian clusters with class means >= separation apart."""
    if min(n_classes, n_per_class, dim) < 1 or separation <= 0:
        raise ValueError("all blob parameters must be positive")
    rng = as_rng(seed)
    means = _spread_means(rng, n_classes, dim, separation)
    inputs = np.concatenate(
        [means[c] + rng.standard_normal((n_per_class, dim)) for c in range(n_classes)]
    )
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(inputs, labels, n_classes)


def synth_superclass(
    n_super: int, n_sub_per_super: int, n_per_sub: int, dim: int, seed: int
) -> Dataset:
    """Hierarchical blobs: subclass clusters grouped around superclass centers.

    Labels are subclass ids; the dataset carries the map to superclasses.
    Superclass centers sit far apart (distance 10) relative to subclass
    offsets (distance 3) and unit cluster noise.
    """
    if min(n_super, n_sub_per_super, n_per_sub, dim) < 1:
        raise ValueError("all parameters must be positive")
    rng = as_rng(seed)
    super_means = _spread_means(rng, n_super, dim, 10.0)
    inputs, labels = [], []
    for s in range(n_super):
        offsets = rng.standard_normal((n_sub_per_super, dim))
        offsets *= 3.0 / np.maximum(np.linalg.norm(offsets, axis=1, keepdims=True), 1e-12)
        for j in range(n_sub_per_super):
            center = super_means[s] + offsets[j]
            inputs.append(center + rng.standard_normal((n_per_sub, dim)))
            labels.append(np.full(n_per_sub, s * n_sub_per_super + j))
    n_sub_total = n_super * n_sub_per_super
    superclass_map = np.repeat(np.arange(n_super), n_sub_per_super)
    return Dataset(np.concatenate(inputs), np.concatenate(labels), n_sub_total, superclass_map)


def relabel_to_superclass(dataset: Dataset) -> Dataset:
    """Same inputs with labels replaced by their superclasses."""
    if dataset.superclass_map is None:
        raise ValueError("dataset has no superclass map")
    labels = dataset.superclass_map[dataset.labels]
    return Dataset(dataset.inputs, labels, int(dataset.superclass_map.max()) + 1)


def ood_inputs(
    dataset: Dataset, n_samples: int, seed: int, margin: float = 3.0, spread: float = 0.8
) -> np.ndarray:
    """Points inside the data's span but far from every class cluster.

    Samples a Gaussian around the data centroid (scaled to ``spread``
    of the data radius) and rejects anything closer than ``margin`` to
    a class center, in units of the unit cluster noise.  Staying inside
    the span matters: an MLP extrapolates far-away rays with saturated
    confidence, which would invert entropy-based detection.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = as_rng(seed)
    inputs = dataset.inputs
    centers = np.stack(
        [inputs[dataset.labels == c].mean(axis=0) for c in range(dataset.n_classes)]
    )
    centroid = inputs.mean(axis=0)
    radius = float(np.linalg.norm(inputs - centroid, axis=1).max())
    scale = spread * radius / np.sqrt(inputs.shape[1])
    collected: list[np.ndarray] = []
    n_found = 0
    for _ in range(200):
        cand = centroid + rng.standard_normal((4 * n_samples, inputs.shape[1])) * scale
        dist = np.linalg.norm(cand[:, None, :] - centers[None, :, :], axis=-1).min(axis=1)
        keep = cand[dist >= margin][: n_samples - n_found]
        collected.append(keep)
        n_found += len(keep)
        if n_found >= n_samples:
            return np.concatenate(collected)
        scale *= 1.1  # widen when the rejection region starves the sampler
    raise ValueError("could not place enough points away from every cluster")


# ---------------------------------------------------------------------------
# File loaders (IDX big-endian standard; CSV with the label column first)

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path: str | Path) -> np.ndarray:
    """Read one array from an IDX file, validating magic and byte length."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: too short to hold an IDX header")
    zero0, zero1, type_code, ndim = raw[0], raw[1], raw[2], raw[3]
    if zero0 != 0 or zero1 != 0:
        raise ValueError(f"{path}: bad IDX magic {raw[:4]!r}")
    if type_code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX type code 0x{type_code:02x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[type_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header_end != expected:
        raise ValueError(
            f"{path}: payload holds {len(raw) - header_end} bytes but dims {dims} need {expected}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


_IDX_CODES = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B,
              np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write an array in IDX format (inverse of read_idx)."""
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    with open(path, "wb") as f:
        f.write(bytes([0, 0, code, array.ndim]))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.astype(array.dtype.newbyteorder(">")).tobytes())


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Pair an IDX image file with an IDX label file.

    Images are flattened to (N, d); unsigned byte data is scaled to [0, 1].
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: label file must be 1-D, got shape {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype.kind == "u":
        flat /= 255.0
    labels = labels.astype(np.int64)
    return Dataset(flat, labels, int(labels.max()) + 1)


def load_csv(path: str | Path) -> Dataset:
    """CSV with the integer label in the first column, features after.

    A non-numeric first row is treated as a header and skipped.
    """
    rows: list[list[str]] = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in _csv.reader(f):
            if row:
                rows.append(row)
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
        if not rows:
            raise ValueError(f"{path}: CSV holds only a header")
    width = len(rows[0])
    if width < 2:
        raise ValueError(f"{path}: need a label column plus at least one feature")
    labels = np.empty(len(rows), dtype=np.int64)
    inputs = np.empty((len(rows), width - 1), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: row {i} has {len(row)} fields, expected {width}")
        label = float(row[0])
        if label != int(label) or label < 0:
            raise ValueError(f"{path}: row {i} label {row[0]!r} is not a nonnegative integer")
        labels[i] = int(label)
        inputs[i] = [float(v) for v in row[1:]]
    return Dataset(inputs, labels, int(labels.max()) + 1)


def write_csv(path: str | Path, dataset: Dataset) -> None:
    """Write label-first CSV that load_csv reads back bit-exactly."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = _csv.writer(f)
        for label, row in zip(dataset.labels, dataset.inputs):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Partitioners

def shard_partition(
    dataset: Dataset, n_clients: int, shards_per_client: int, seed: int
) -> PartitionPlan:
    """Label-sorted shards dealt randomly to clients (class-imbalanced split).

    Indices are sorted by label, cut into n_clients * shards_per_client
    equal shards (any remainder is left unassigned), and each client
    receives shards_per_client shards.
    """
    if n_clients < 1 or shards_per_client < 1:
        raise ValueError("n_clients and shards_per_client must be positive")
    n_shards = n_clients * shards_per_client
    shard_size = len(dataset) // n_shards
    if shard_size < 1:
        raise ValueError(f"dataset of {len(dataset)} examples cannot fill {n_shards} shards")
    rng = as_rng(seed)
    order = np.argsort(dataset.labels, kind="stable")
    shards = [order[i * shard_size : (i + 1) * shard_size] for i in range(n_shards)]
    dealt = rng.permutation(n_shards)
    client_indices = [
        np.concatenate([shards[s] for s in dealt[c * shards_per_client : (c + 1) * shards_per_client]])
        for c in range(n_clients)
    ]
    return PartitionPlan(client_indices)


def _uniform_slices(rng: np.random.Generator, n_items: int, n_parts: int) -> list[np.ndarray]:
    """Split range(n_items) into n_parts contiguous slices at uniform cut points."""
    cuts = np.sort(rng.integers(0, n_items + 1, size=n_parts - 1)) if n_parts > 1 else np.array([], dtype=int)
    bounds = np.concatenate([[0], cuts, [n_items]])
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(n_parts)]


def class_skew_partition(
    dataset: Dataset,
    n_clients: int,
    classes_per_client: int,
    seed: int,
    min_client_size: int = 2,
) -> tuple[PartitionPlan, list[np.ndarray]]:
    """Each client draws data from a random subset of classes.

    Clients sharing a class split its pool at uniformly sampled slice
    indices, which also produces quantity disparity.  Returns the plan
    together with each client's class subset (used to build matched
    test splits).
    """
    if not 1 <= classes_per_client <= dataset.n_classes:
        raise ValueError("classes_per_client must lie in [1, n_classes]")
    if n_clients < 1:
        raise ValueError("n_clients must be positive")
    if n_clients * min_client_size > len(dataset):
        raise ValueError("not enough data to give every client the minimum size")
    rng = as_rng(seed)
    class_sets = [
        np.sort(rng.choice(dataset.n_classes, size=classes_per_client, replace=False))
        for _ in range(n_clients)
    ]
    pools = {c: np.flatnonzero(dataset.labels == c) for c in range(dataset.n_classes)}
    for attempt in range(100):
        client_indices: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for c in range(dataset.n_classes):
            holders = [k for k in range(n_clients) if c in class_sets[k]]
            if not holders:
                continue
            pool = rng.permutation(pools[c])
            slices = _uniform_slices(rng, len(pool), len(holders))
            for k, sl in zip(rng.permutation(holders), slices):
                client_indices[k].append(pool[sl])
        merged = [np.sort(np.concatenate(parts)) if parts else np.array([], dtype=np.int64)
                  for parts in client_indices]
        if all(len(ix) >= min_client_size for ix in merged):
            return PartitionPlan(merged), class_sets
    raise ValueError("could not give every client the minimum data size; add data or clients' classes")


def concept_drift_partition(
    dataset: Dataset, n_clients: int, seed: int, min_client_size: int = 2
) -> tuple[PartitionPlan, list[np.ndarray]]:
    """One subclass per superclass per client; labels stay subclass ids.

    Use relabel_to_superclass to train on the superclass prediction
    task.  Returns the plan and each client's chosen subclass per
    superclass.
    """
    if dataset.superclass_map is None:
        raise ValueError("dataset has no superclass map")
    if n_clients < 1:
        raise ValueError("n_clients must be positive")
    rng = as_rng(seed)
    n_super = int(dataset.superclass_map.max()) + 1
    subclasses_of = [np.flatnonzero(dataset.superclass_map == s) for s in range(n_super)]
    choices = [
        np.array([rng.choice(subclasses_of[s]) for s in range(n_super)]) for _ in range(n_clients)
    ]
    pools = {c: np.flatnonzero(dataset.labels == c) for c in range(dataset.n_classes)}
    for attempt in range(100):
        client_indices: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for c in range(dataset.n_classes):
            holders = [k for k in range(n_clients) if c in choices[k]]
            if not holders:
                continue
            pool = rng.permutation(pools[c])
            slices = _uniform_slices(rng, len(pool), len(holders))
            for k, sl in zip(rng.permutation(holders), slices):
                client_indices[k].append(pool[sl])
        merged = [np.sort(np.concatenate(parts)) if parts else np.array([], dtype=np.int64)
                  for parts in client_indices]
        if all(len(ix) >= min_client_size for ix in merged):
            return PartitionPlan(merged), choices
    raise ValueError("could not give every client the minimum data size")


def matched_indices(labels: np.ndarray, allowed_labels: np.ndarray) -> np.ndarray:
    """Indices of examples whose label belongs to the allowed set."""
    return np.flatnonzero(np.isin(np.asarray(labels), np.asarray(allowed_labels)))
