"""Datasets, IDX ingestion, and deterministic labeled/unlabeled splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import ConfigError, FormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray       # (n, d) vectors or (n, C, H, W) images
    labels: np.ndarray         # int labels in [0, n_c)
    name: str
    n_c: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ConfigError(
                f"{self.name}: {len(self.features)} features vs {len(self.labels)} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_c):
            raise ConfigError(f"{self.name}: labels outside [0, {self.n_c})")

    def __len__(self):
        return len(self.features)

    @property
    def is_image(self):
        return self.features.ndim == 4


@dataclass
class SslSplit:
    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    fold_seed: int
    labels_per_class: int
    disjoint: bool = False


def make_two_moons(n, noise, seed) -> Dataset:
    """Two interleaved half-circles with Gaussian jitter, centered at the origin.

    Class 0 is the upper arc (cos t, sin t), class 1 the lower arc
    (1 - cos t, 1/2 - sin t); both are shifted by (-1/2, -1/4) so the
    geometric transforms in the augmentation pool act around the data
    center. Sample order is shuffled with the same seeded generator.
    """
    if n % 2 != 0:
        raise ConfigError(f"make_two_moons: n must be even, got {n}")
    if noise < 0:
        raise ConfigError(f"make_two_moons: noise must be >= 0, got {noise}")
    rng = seeding.derive_rng(seed, seeding.TAG_TWO_MOONS)
    half = n // 2
    t0 = rng.uniform(0.0, np.pi, half)
    t1 = rng.uniform(0.0, np.pi, half)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    pts = np.concatenate([upper, lower]) - np.array([0.5, 0.25])
    pts = pts + rng.normal(0.0, 1.0, pts.shape) * noise
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(pts[order], labels[order], name="two-moons", n_c=2)


def _read_be32(fh, path, what):
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError(f"{path}: truncated {what}")
    return struct.unpack(">i", raw)[0]


def load_idx(images_path, labels_path, name="idx") -> Dataset:
    """Read an IDX image/label file pair. Pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic = _read_be32(fh, images_path, "image header")
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: expected image magic 0x{IDX_IMAGE_MAGIC:08x}, got 0x{magic:08x}"
            )
        count = _read_be32(fh, images_path, "image count")
        rows = _read_be32(fh, images_path, "row count")
        cols = _read_be32(fh, images_path, "column count")
        payload = fh.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise FormatError(f"{images_path}: truncated image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)
    with open(labels_path, "rb") as fh:
        magic = _read_be32(fh, labels_path, "label header")
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: expected label magic 0x{IDX_LABEL_MAGIC:08x}, got 0x{magic:08x}"
            )
        lcount = _read_be32(fh, labels_path, "label count")
        raw = fh.read(lcount)
        if len(raw) != lcount:
            raise FormatError(f"{labels_path}: truncated label payload")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if lcount != count:
        raise FormatError(f"{labels_path}: {lcount} labels for {count} images")
    n_c = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images.astype(np.float64) / 255.0, labels, name=name, n_c=n_c)


def split_ssl(ds: Dataset, labels_per_class, fold_seed, disjoint=False) -> SslSplit:
    """Pick labels_per_class samples of each class as the labeled set.

    By default the unlabeled pool is the full training set with labels
    dropped; ``disjoint=True`` restricts it to the complement of the
    labeled picks.
    """
    rng = seeding.derive_rng(fold_seed, seeding.TAG_SPLIT)
    labeled = []
    for cls in range(ds.n_c):
        pool = np.flatnonzero(ds.labels == cls)
        if len(pool) < labels_per_class:
            raise ConfigError(
                f"class {cls} has {len(pool)} samples, needs {labels_per_class}"
            )
        picks = rng.permutation(pool)[:labels_per_class]
        labeled.append(picks)
    labeled = np.sort(np.concatenate(labeled))
    if disjoint:
        unlabeled = np.setdiff1d(np.arange(len(ds)), labeled)
    else:
        unlabeled = np.arange(len(ds))
    return SslSplit(labeled, unlabeled, fold_seed=fold_seed,
                    labels_per_class=labels_per_class, disjoint=disjoint)


class _IndexStream:
    """Reshuffled-every-epoch index stream with carry-over batching.

    Every index is emitted exactly once per epoch; batches may straddle
    an epoch boundary, so each emitted index carries its own epoch.
    """

    def __init__(self, indices, batch_size, seed, tag):
        self.indices = np.asarray(indices)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.tag = tag
        self.epoch = 0
        self.pos = 0
        self._queue = self._permutation(0)

    def _permutation(self, epoch):
        rng = seeding.derive_rng(self.seed, self.tag, epoch)
        return self.indices[rng.permutation(len(self.indices))]

    def take(self):
        out_idx = np.empty(self.batch_size, dtype=np.int64)
        out_epoch = np.empty(self.batch_size, dtype=np.int64)
        filled = 0
        while filled < self.batch_size:
            available = len(self._queue) - self.pos
            take = min(available, self.batch_size - filled)
            out_idx[filled:filled + take] = self._queue[self.pos:self.pos + take]
            out_epoch[filled:filled + take] = self.epoch
            self.pos += take
            filled += take
            if self.pos == len(self._queue):
                self.epoch += 1
                self._queue = self._permutation(self.epoch)
                self.pos = 0
        return out_idx, out_epoch

    def state(self):
        return {"epoch": self.epoch, "pos": self.pos}

    def restore(self, state):
        self.epoch = int(state["epoch"])
        self.pos = int(state["pos"])
        self._queue = self._permutation(self.epoch)


@dataclass
class Batch:
    labeled_idx: np.ndarray
    labeled_epochs: np.ndarray
    unlabeled_idx: np.ndarray
    unlabeled_epochs: np.ndarray


class BatchIterator:
    """Pairs a labeled batch with an unlabeled batch each step.

    Deterministic under (split, batch sizes, seed); both streams reshuffle
    independently at their own epoch boundaries. With B_u = 0 the iterator
    degenerates to supervised-only batching.
    """

    def __init__(self, split: SslSplit, b_l, b_u, seed):
        if b_l <= 0:
            raise ConfigError(f"labeled batch size must be positive, got {b_l}")
        if b_l > len(split.labeled_indices):
            raise ConfigError(
                f"labeled batch {b_l} exceeds labeled pool {len(split.labeled_indices)}"
            )
        if b_u < 0:
            raise ConfigError(f"unlabeled batch size must be >= 0, got {b_u}")
        if b_u > 0 and len(split.unlabeled_indices) == 0:
            raise ConfigError("unlabeled batch requested but the unlabeled pool is empty")
        self.b_l, self.b_u = int(b_l), int(b_u)
        self._labeled = _IndexStream(split.labeled_indices, b_l, seed,
                                     seeding.TAG_LABELED_SHUFFLE)
        self._unlabeled = (_IndexStream(split.unlabeled_indices, b_u, seed,
                                        seeding.TAG_UNLABELED_SHUFFLE)
                           if b_u > 0 else None)

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        li, le = self._labeled.take()
        if self._unlabeled is not None:
            ui, ue = self._unlabeled.take()
        else:
            ui = np.empty(0, dtype=np.int64)
            ue = np.empty(0, dtype=np.int64)
        return Batch(li, le, ui, ue)

    def state(self):
        return {
            "labeled": self._labeled.state(),
            "unlabeled": self._unlabeled.state() if self._unlabeled else None,
        }

    def restore(self, state):
        self._labeled.restore(state["labeled"])
        if self._unlabeled is not None and state["unlabeled"] is not None:
            self._unlabeled.restore(state["unlabeled"])
