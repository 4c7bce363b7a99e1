"""Parameter-space versus geometry-space distances and the Gaussian code prior."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import Mesh, synthesize_vector

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class DistanceReport:
    """Mean-squared parameter distance ``e``, geometric distance ``E`` and ``E*n/(e*m)``."""

    e: float
    E: float
    ratio: float

    CSV_HEADER = "e,E,ratio"

    def to_csv_row(self):
        return f"{self.e!r},{self.E!r},{self.ratio!r}"


def _vec(x):
    return np.asarray(x, dtype=float).ravel()


def param_distance(x, y):
    """``(1/m) * ||x - y||^2``."""
    x, y = _vec(x), _vec(y)
    if x.shape != y.shape:
        raise ValueError(f"code lengths differ: {x.size} vs {y.size}")
    d = x - y
    return float(d @ d) / x.size


def geometry_distance(X, Y):
    """``(1/n) * ||X - Y||^2`` over the flattened vertex coordinates of two meshes."""
    X = X.vertices if isinstance(X, Mesh) else np.asarray(X, dtype=float).reshape(-1, 3)
    Y = Y.vertices if isinstance(Y, Mesh) else np.asarray(Y, dtype=float).reshape(-1, 3)
    if X.shape != Y.shape:
        raise ValueError(f"vertex counts differ: {len(X)} vs {len(Y)}")
    d = (X - Y).ravel()
    return float(d @ d) / len(X)


def verify_proportionality(model, x, y):
    """Evaluate both sides of ``E = (m/n) e`` for two identity codes.

    With an orthonormal shape basis the ratio is 1; any other basis gives
    ``||A(x-y)||^2 / ||x-y||^2``.  Coincident codes report ratio 1.
    """
    X = synthesize_vector(model, x)
    Y = synthesize_vector(model, y)
    e = param_distance(x, y)
    E = geometry_distance(X, Y)
    if e == 0.0:
        return DistanceReport(e, E, 1.0)
    return DistanceReport(e, E, E * model.n_vertices / (e * model.m_id))


def _eigen(eigenvalues):
    s = _vec(eigenvalues)
    if np.any(s <= 0):
        raise ValueError("eigenvalues must be strictly positive")
    return s


def gaussian_prior_energy(shape, eigenvalues):
    """Negative log of the unnormalised prior, ``0.5 * sum((alpha / sigma)^2)``."""
    z = _vec(shape) / _eigen(eigenvalues)
    return 0.5 * float(z @ z)


def gaussian_prior_energy_grad(shape, eigenvalues):
    s = _eigen(eigenvalues)
    return _vec(shape) / s**2


class KLStats(NamedTuple):
    value: float
    mean: np.ndarray
    var: np.ndarray
    floored: np.ndarray  # per-dimension flag: variance hit VARIANCE_FLOOR


def kl_stats(batch, eigenvalues):
    """Moment-matched KL of ``alpha / sigma`` against N(0, 1), averaged over dimensions.

    Per dimension the batch is fitted by a Gaussian with the batch mean and
    (population, ddof=0) variance, and the closed-form
    ``0.5 * (s^2 + mu^2 - 1 - ln s^2)`` is taken.
    """
    B = np.asarray(batch, dtype=float)
    if B.ndim != 2 or B.shape[0] < 2:
        raise ValueError("KL needs a batch of at least 2 codes")
    Z = B / _eigen(eigenvalues)
    mu = Z.mean(axis=0)
    raw = ((Z - mu) ** 2).mean(axis=0)
    floored = raw < VARIANCE_FLOOR
    var = np.where(floored, VARIANCE_FLOOR, raw)
    kl = 0.5 * (var + mu**2 - 1.0 - np.log(var))
    return KLStats(float(kl.mean()), mu, var, floored)


def kl_to_standard_normal(batch, eigenvalues):
    return kl_stats(batch, eigenvalues).value


def kl_to_standard_normal_grad(batch, eigenvalues):
    """Gradient of ``kl_to_standard_normal`` with respect to every code in the batch.

    Floored dimensions contribute only through the mean term.
    """
    B = np.asarray(batch, dtype=float)
    s = _eigen(eigenvalues)
    st = kl_stats(B, s)
    n, m = B.shape
    Z = B / s
    dvar = np.where(st.floored, 0.0, 1.0 - 1.0 / st.var)
    dZ = ((Z - st.mean) * dvar + st.mean) / n
    return dZ / s / m
