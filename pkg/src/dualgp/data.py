"""Dataset ingestion, synthetic task generation, and fold splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

__all__ = ["Dataset", "load_csv", "gen_sinc_classification", "kfold", "choose_inducing"]

REGRESSION = "regression"
CLASSIFICATION = "binary-classification"

SINC_X_RANGE = (-3.0 * np.pi, 3.0 * np.pi)
SINC_NOISE_STD = 0.1


@dataclass(frozen=True)
class Dataset:
    """Normalized inputs/targets plus the record needed to undo it."""

    X: np.ndarray
    y: np.ndarray
    task: str
    name: str
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0
    columns: tuple = field(default=())

    def __post_init__(self):
        if np.any(~np.isfinite(self.X)) or np.any(~np.isfinite(self.y)):
            raise ValueError("dataset contains NaN/Inf after ingestion")
        if self.task == CLASSIFICATION and not np.all(np.isin(self.y, (0.0, 1.0))):
            raise ValueError("classification labels must be in {0, 1}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def denormalize_X(self) -> np.ndarray:
        return self.X * self.x_std + self.x_mean

    def denormalize_y(self) -> np.ndarray:
        return self.y * self.y_std + self.y_mean

    def subset(self, idx: np.ndarray, suffix: str = "") -> "Dataset":
        return Dataset(
            self.X[idx], self.y[idx], self.task, self.name + suffix,
            self.x_mean, self.x_std, self.y_mean, self.y_std, self.columns,
        )


def load_csv(path: str, task: str) -> Dataset:
    """Parse a headered numeric CSV whose last column is the target.

    Inputs are standardized per column; for regression the target is
    standardized too. Non-numeric cells are reported by row and column.
    """
    if task not in (REGRESSION, CLASSIFICATION):
        raise ValueError(f"unknown task {task!r}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty file: {path}") from None
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            parsed = []
            for colname, cell in zip(header, row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"non-numeric value {cell!r} at row {rownum}, column {colname!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise ValueError(f"no data rows in {path}")
    arr = np.asarray(rows, dtype=float)
    X_raw, y_raw = arr[:, :-1], arr[:, -1]

    x_mean = X_raw.mean(axis=0)
    x_std = X_raw.std(axis=0)
    x_std[x_std == 0.0] = 1.0
    X = (X_raw - x_mean) / x_std

    if task == REGRESSION:
        y_mean = float(y_raw.mean())
        y_std = float(y_raw.std()) or 1.0
        y = (y_raw - y_mean) / y_std
    else:
        if not np.all(np.isin(y_raw, (0.0, 1.0))):
            bad = y_raw[~np.isin(y_raw, (0.0, 1.0))][0]
            raise ValueError(f"classification label {bad!r} outside {{0, 1}}")
        y_mean, y_std = 0.0, 1.0
        y = y_raw

    import os

    return Dataset(
        X, y, task, os.path.splitext(os.path.basename(path))[0],
        x_mean, x_std, y_mean, y_std, tuple(header),
    )


def gen_sinc_classification(n: int, seed: int) -> Dataset:
    """Binary labels from thresholding a noisy sinc on [-3 pi, 3 pi].

    y = 1 if sin(x)/x + eps > 0 with eps ~ N(0, 0.1^2); deterministic per seed.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    lo, hi = SINC_X_RANGE
    x = rng.uniform(lo, hi, size=n)
    f = np.sinc(x / np.pi)  # sin(x)/x with the x=0 limit handled
    y = (f + SINC_NOISE_STD * rng.standard_normal(n) > 0).astype(float)
    return Dataset(
        x[:, None], y, CLASSIFICATION, f"sinc-n{n}-seed{seed}",
        np.zeros(1), np.ones(1), 0.0, 1.0, ("x", "label"),
    )


def kfold(n: int, k: int, seed: int):
    """Seeded disjoint covering folds with sizes differing by at most one."""
    if k < 2:
        raise ValueError("need k >= 2")
    if k > n:
        raise ValueError("k exceeds the number of datapoints")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    splits = []
    for test in np.array_split(perm, k):
        train = np.setdiff1d(perm, test)
        splits.append((np.sort(train), np.sort(test)))
    return splits


def choose_inducing(X: np.ndarray, m: int, seed: int, method: str = "kmeans") -> np.ndarray:
    """Inducing locations: k-means centroids (default) or an equally spaced 1-D grid."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if m >= X.shape[0]:
        return X.copy()
    if method == "grid":
        if X.shape[1] != 1:
            raise ValueError("grid placement only supports 1-D inputs")
        return np.linspace(X.min(), X.max(), m)[:, None]
    centroids, _ = kmeans2(X, m, minit="++", seed=seed)
    # k-means can return coincident centroids on tiny data; nudge duplicates
    for i in range(1, m):
        while np.any(np.linalg.norm(centroids[:i] - centroids[i], axis=1) <= 1e-10):
            centroids[i] += 1e-6 * (1.0 + np.abs(centroids[i]))
    return centroids
