"""Per-identity shape-code centers with neutral-frontal weighting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import extract_euler


@dataclass(frozen=True, eq=False)
class CenterTable:
    """Class centers ``centers[j]`` for dense class ids ``0..K-1``.

    ``counts[j]`` is the number of samples seen for class ``j`` and
    ``weight_sums[j]`` the accumulated neutral-frontal confidence.
    Updates return a new table; the arrays of a table are read-only.
    """

    centers: np.ndarray
    learning_rate: float = 0.5
    lam: float = 1.0
    counts: np.ndarray = field(default=None)
    weight_sums: np.ndarray = field(default=None)

    def __post_init__(self):
        C = np.array(self.centers, dtype=float)
        if C.ndim != 2:
            raise ValueError("centers must be a (num_classes, m_id) matrix")
        if not np.all(np.isfinite(C)):
            raise ValueError("centers must be finite")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        counts = np.zeros(len(C), dtype=np.int64) if self.counts is None else np.array(self.counts, dtype=np.int64)
        wsum = np.zeros(len(C)) if self.weight_sums is None else np.array(self.weight_sums, dtype=float)
        for a in (C, counts, wsum):
            a.setflags(write=False)
        object.__setattr__(self, "centers", C)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "weight_sums", wsum)

    @property
    def num_classes(self):
        return self.centers.shape[0]

    @property
    def dim(self):
        return self.centers.shape[1]

    def __getitem__(self, j):
        return self.centers[j]


def init_centers(num_classes, m_id, strategy="zero", samples=None, **table_kwargs):
    """New table with zero centers, or each class's first sample when ``strategy="first"``.

    ``samples`` is an iterable of ``(code, class_id)`` pairs; classes without a
    sample keep a zero center.
    """
    C = np.zeros((num_classes, m_id))
    if strategy == "first":
        seen = set()
        for code, label in samples or ():
            if label not in seen:
                C[label] = code
                seen.add(label)
    elif strategy != "zero":
        raise ValueError(f"unknown init strategy {strategy!r}")
    return CenterTable(C, **table_kwargs)


def neutral_confidence(pose, expr, lam=1.0):
    """Closeness to a neutral frontal face in [0, 1].

    ``(1/8)(cos a + 1)(cos b + 1)(cos g + 1) * exp(-lam * ||expr||)`` with
    (a, b, g) the ZYX Euler angles of the pose.
    """
    a, b, g = extract_euler(pose)
    e = float(np.linalg.norm(np.asarray(expr, dtype=float)))
    return (math.cos(a) + 1) * (math.cos(b) + 1) * (math.cos(g) + 1) / 8.0 * math.exp(-lam * e)


def center_deltas(table, codes, labels, confidences):
    """Per-class update ``sum_i f_i (c_j - x_i) / (1 + n_j)`` and the set of touched classes.

    ``n_j`` counts class-j samples in the batch; with a common ``f`` in a class
    this is the unweighted center-loss step scaled by ``f``.
    """
    X = np.asarray(codes, dtype=float).reshape(len(labels), -1)
    y = np.asarray(labels, dtype=np.int64)
    f = np.asarray(confidences, dtype=float)
    K = table.num_classes
    if y.size and (y.min() < 0 or y.max() >= K):
        bad = y[(y < 0) | (y >= K)][0]
        raise ValueError(f"unknown class id {bad}")
    num = np.zeros_like(table.centers)
    n = np.zeros(K)
    fsum = np.zeros(K)
    for xi, yi, fi in zip(X, y, f):
        num[yi] += fi * (table.centers[yi] - xi)
        n[yi] += 1
        fsum[yi] += fi
    return num / (1.0 + n)[:, None], n, fsum


def update_centers(table, batch):
    """Apply one weighted center step for a batch of ``(code, class_id, confidence)``.

    Classes with no sample, or whose samples all have zero confidence, are
    left bit-identical.
    """
    batch = list(batch)
    if not batch:
        return table
    codes = np.array([np.asarray(b[0], dtype=float) for b in batch])
    labels = [int(b[1]) for b in batch]
    confs = [float(b[2]) for b in batch]
    delta, n, fsum = center_deltas(table, codes, labels, confs)
    C = table.centers.copy()
    moved = fsum > 0
    C[moved] = C[moved] - table.learning_rate * delta[moved]
    return replace(
        table,
        centers=C,
        counts=table.counts + n.astype(np.int64),
        weight_sums=table.weight_sums + fsum,
    )
