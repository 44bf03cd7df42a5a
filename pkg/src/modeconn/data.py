"""Labeled feature-vector datasets: synthetic generators, splits, CSV I/O.

Synthetic families are chosen so connectivity phenomena show up at small
widths: blobs (linearly separable), moons (two interleaved arcs), and
3-class spirals (non-convex decision regions).
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .rng import substream

SPLIT_TAGS = ("train", "validation", "alignment")


@dataclass
class Dataset:
    """Features, integer class labels, and per-sample split tags.

    Samples tagged "alignment" are a subset of the training data: they are
    used for training and additionally reserved for computing alignments.
    """

    features: np.ndarray
    labels: np.ndarray
    split_tags: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.split_tags = np.asarray(self.split_tags)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.split_tags.shape != (n,):
            raise ValueError("features, labels and split_tags must agree in length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        bad = set(self.split_tags.tolist()) - set(SPLIT_TAGS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    @property
    def n_features(self):
        return self.features.shape[1]

    def _mask(self, tags):
        return np.isin(self.split_tags, tags)

    def train_arrays(self):
        m = self._mask(["train", "alignment"])
        return self.features[m], self.labels[m]

    def validation_arrays(self):
        m = self._mask(["validation"])
        return self.features[m], self.labels[m]

    def alignment_arrays(self):
        m = self._mask(["alignment"])
        return self.features[m], self.labels[m]

    def feature_range(self):
        return float(self.features.max() - self.features.min())


def assign_splits(n, seed, val_fraction=0.3, alignment_fraction=0.2):
    """Deterministic split tags: val_fraction held out, and
    alignment_fraction of the remaining training samples double-tagged
    for alignment."""
    rng = substream(seed, "splits")
    tags = np.full(n, "train", dtype="<U10")
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    tags[order[:n_val]] = "validation"
    train_idx = order[n_val:]
    n_align = int(round(len(train_idx) * alignment_fraction))
    tags[train_idx[:n_align]] = "alignment"
    return tags


def make_blobs(n=1000, noise=0.5, seed=0, val_fraction=0.3, alignment_fraction=0.2):
    """Two Gaussian blobs at (-2, 0) and (2, 0); linearly separable for
    small noise."""
    rng = substream(seed, "data")
    y = rng.integers(0, 2, size=n)
    centers = np.array([[-2.0, 0.0], [2.0, 0.0]])
    X = centers[y] + noise * rng.standard_normal((n, 2))
    return Dataset(X, y, assign_splits(n, seed, val_fraction, alignment_fraction), 2)


def make_moons(n=1000, noise=0.1, seed=0, val_fraction=0.3, alignment_fraction=0.2):
    """Two interleaving half circles."""
    rng = substream(seed, "data")
    y = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, np.pi, size=n)
    X = np.where(
        (y == 0)[:, None],
        np.stack([np.cos(t), np.sin(t)], axis=1),
        np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
    )
    X = X + noise * rng.standard_normal((n, 2))
    return Dataset(X, y, assign_splits(n, seed, val_fraction, alignment_fraction), 2)


def make_spirals(n=1500, noise=0.08, seed=0, n_classes=3, turns=1.25,
                 val_fraction=0.3, alignment_fraction=0.2):
    """Interleaved Archimedean spirals, one arm per class."""
    rng = substream(seed, "data")
    y = rng.integers(0, n_classes, size=n)
    r = rng.uniform(0.15, 1.0, size=n)
    theta = 2.0 * np.pi * (turns * r + y / n_classes)
    X = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    X = X + noise * rng.standard_normal((n, 2))
    return Dataset(X, y, assign_splits(n, seed, val_fraction, alignment_fraction), n_classes)


GENERATORS = {"blobs": make_blobs, "moons": make_moons, "spirals": make_spirals}


def generate(kind, **kwargs):
    if kind not in GENERATORS:
        raise ValueError(f"unknown synthetic dataset {kind!r}; choose from {sorted(GENERATORS)}")
    return GENERATORS[kind](**kwargs)


# ---------------------------------------------------------------------------
# CSV format: header `label,f0,f1,...`, UTF-8, LF line endings


def to_csv_text(dataset: Dataset) -> str:
    buf = io.StringIO()
    cols = ["label"] + [f"f{i}" for i in range(dataset.n_features)]
    buf.write(",".join(cols) + "\n")
    for i in range(len(dataset.labels)):
        row = [str(int(dataset.labels[i]))] + [repr(float(v)) for v in dataset.features[i]]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def save_csv(dataset: Dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(to_csv_text(dataset))


def load_csv(path, seed=0, val_fraction=0.3, alignment_fraction=0.2, n_classes=None):
    """Load a dataset CSV; split tags are re-derived from ``seed``."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: expected header starting with 'label'")
        rows = list(reader)
    labels = np.array([int(r[0]) for r in rows], dtype=int)
    feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    tags = assign_splits(len(rows), seed, val_fraction, alignment_fraction)
    return Dataset(feats, labels, tags, k)
