"""Small synthetic classification problems and a numeric-table loader.

All features are min-max normalized into [0, 1] so attack clipping is always
feasible.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class DatasetConfigError(ValueError):
    pass


class TableParseError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass
class DataSplit:
    train: Dataset
    test: Dataset

    @property
    def n_classes(self) -> int:
        return self.train.n_classes

    @property
    def dim(self) -> int:
        return self.train.dim


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Per-column min-max scaling; a constant column maps to all zeros."""
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    out = (x - lo) / safe
    out[:, span == 0] = 0.0
    return np.clip(out, 0.0, 1.0)


def stratified_split(data: Dataset, test_fraction: float = 0.2, seed: int = 0) -> DataSplit:
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.y == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return DataSplit(
        Dataset(data.x[tr], data.y[tr], data.n_classes, "train", dict(data.meta)),
        Dataset(data.x[te], data.y[te], data.n_classes, "test", dict(data.meta)),
    )


def blob_centers(n_classes: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """Centers on a circle in the first two coordinates, or simplex vertices when C <= d."""
    if n_classes <= dim and dim > 2:
        return np.eye(dim)[:n_classes] * radius
    centers = np.zeros((n_classes, dim))
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def gen_blobs(n_classes: int = 4, dim: int = 2, n_per_class: int = 500, spread: float = 0.03,
              seed: int = 0, radius: float = 0.15, test_fraction: float = 0.2) -> DataSplit:
    """Isotropic Gaussian clusters, ``spread`` being the per-coordinate std.

    Centers sit on a circle of the given radius (simplex vertices scaled by
    the radius when C <= d and d > 2). Geometry is rejected when two centers
    are closer than six standard deviations.
    """
    if n_classes < 2 or dim < 2:
        raise DatasetConfigError("blobs need n_classes >= 2 and dim >= 2")
    if spread < 0:
        raise DatasetConfigError("spread must be non-negative")
    centers = blob_centers(n_classes, dim, radius)
    gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    min_gap = gaps[~np.eye(n_classes, dtype=bool)].min()
    if min_gap < 6 * spread or min_gap <= 0:
        raise DatasetConfigError(
            f"{n_classes} centers in dim {dim}: closest pair {min_gap:.4f} apart, need >= 6*spread = {6 * spread:.4f}"
        )
    rng = np.random.default_rng(seed)
    x = np.concatenate([c + spread * rng.standard_normal((n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(n_classes), n_per_class)
    meta = {"generator": "blobs", "n_classes": n_classes, "dim": dim, "n_per_class": n_per_class,
            "spread": spread, "radius": radius, "seed": seed}
    data = Dataset(minmax_normalize(x), y, n_classes, meta=meta)
    return stratified_split(data, test_fraction, seed)


def gen_rings(n_per_class: int = 500, noise: float = 0.02, seed: int = 0,
              radii: tuple = (0.5, 1.0), test_fraction: float = 0.2) -> DataSplit:
    """Two concentric annuli (class 0 inner) with Gaussian radial noise."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c, r in enumerate(radii):
        theta = rng.uniform(0, 2 * np.pi, n_per_class)
        rad = r + noise * rng.standard_normal(n_per_class)
        xs.append(np.stack([rad * np.cos(theta), rad * np.sin(theta)], axis=1))
        ys.append(np.full(n_per_class, c))
    meta = {"generator": "rings", "n_classes": 2, "n_per_class": n_per_class, "noise": noise, "seed": seed}
    data = Dataset(minmax_normalize(np.concatenate(xs)), np.concatenate(ys), 2, meta=meta)
    return stratified_split(data, test_fraction, seed)


def load_table(path, label_column: str, normalize: bool = True) -> Dataset:
    """Read a comma-separated table with a header row.

    Labels must be integers forming 0..C-1 with no gaps. Rows with non-finite
    features are rejected, and every problem is reported with its line number.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TableParseError(f"{path}: empty file") from None
        if label_column not in header:
            raise TableParseError(f"{path}: no column named {label_column!r} in header {header}")
        li = header.index(label_column)
        feats, labels, bad = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise TableParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise TableParseError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            lab = vals.pop(li)
            if not math.isfinite(lab) or lab != int(lab):
                raise TableParseError(f"{path}:{lineno}: label {row[li]!r} is not an integer")
            if not all(math.isfinite(v) for v in vals):
                bad.append(lineno)
                continue
            feats.append(vals)
            labels.append(int(lab))
    if bad:
        raise TableParseError(f"{path}: non-finite feature values on lines {bad}")
    if not labels:
        raise TableParseError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.intp)
    present = np.unique(y)
    n_classes = int(present.max()) + 1
    if present.min() < 0 or len(present) != n_classes:
        missing = sorted(set(range(n_classes)) - set(present.tolist()))
        raise TableParseError(f"{path}: labels must cover 0..{n_classes - 1}; missing {missing}")
    x = np.asarray(feats, dtype=np.float64)
    if normalize:
        x = minmax_normalize(x)
    feature_names = [h for i, h in enumerate(header) if i != li]
    return Dataset(x, y, n_classes, meta={"generator": "table", "path": str(path),
                                         "label_column": label_column, "features": feature_names})


def save_table(data: Dataset, path, label_column: str = "label", feature_names: Optional[list] = None) -> None:
    names = feature_names or [f"x{i}" for i in range(data.dim)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, label_column])
        for row, lab in zip(data.x, data.y):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
