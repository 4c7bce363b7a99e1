"""Verification by code distance, similarity ICP, point-to-plane RMSE and CED curves."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .model import Mesh

METRICS = ("euclidean", "cosine")


# ------------------------------------------------------------- verification

@dataclass(frozen=True)
class VerificationPair:
    code_a: np.ndarray
    code_b: np.ndarray
    same_identity: bool

    def __post_init__(self):
        if np.shape(self.code_a) != np.shape(self.code_b):
            raise ValueError("pair codes must have equal lengths")


@dataclass(frozen=True, eq=False)
class VerificationResult:
    accuracy: float
    threshold: float
    roc: np.ndarray  # rows of (threshold, false positive rate, true positive rate)
    distances: np.ndarray
    same: np.ndarray

    def roc_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, fp, tp in self.roc.tolist():
            w.writerow([repr(t), repr(fp), repr(tp)])
        return buf.getvalue()

    def __iter__(self):
        return iter((self.accuracy, self.threshold, self.roc))


def pair_distances(a, b, metric="euclidean"):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if metric == "euclidean":
        return np.linalg.norm(a - b, axis=1)
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        return 1.0 - np.sum(a * b, axis=1) / (na * nb)
    raise ValueError(f"metric must be one of {METRICS}")


def verification_accuracy(pairs, metric="euclidean"):
    """Best-threshold verification accuracy over a labelled pair set.

    A pair is called "same" when its distance is at most the threshold.  Every
    observed distance is tried as a cut (plus one below all of them); the
    reported threshold is the midpoint between the best cut and the next
    larger distance.  The threshold is tuned on the evaluated pairs, so the
    accuracy is an optimistic estimate.
    """
    pairs = list(pairs)
    same = np.array([bool(p.same_identity) for p in pairs])
    if same.all() or not same.any():
        raise ValueError("pair set must contain both same and different pairs")
    d = pair_distances([p.code_a for p in pairs], [p.code_b for p in pairs], metric)
    order = np.argsort(d, kind="stable")
    ds, ss = d[order], same[order]
    n_pos, n_neg = int(same.sum()), int((~same).sum())
    # cut k: the k smallest distances are called "same"
    tp = np.concatenate([[0], np.cumsum(ss)])
    fp = np.concatenate([[0], np.cumsum(~ss)])
    # ties cannot be split by a threshold; only cuts at the end of a tie run are valid
    valid = np.ones(len(d) + 1, bool)
    valid[1:-1] = ds[1:] > ds[:-1]
    correct = tp + (n_neg - fp)
    correct = np.where(valid, correct, -1)
    k = int(np.argmax(correct))
    if k == 0:
        threshold = ds[0] - 1.0 if ds[0] > 0 else -1.0
    elif k == len(d):
        threshold = float(ds[-1])
    else:
        threshold = 0.5 * (ds[k - 1] + ds[k])
    cuts = np.concatenate([[-np.inf], ds])[valid]
    roc = np.column_stack([cuts, fp[valid] / n_neg, tp[valid] / n_pos])
    return VerificationResult(correct[k] / len(d), float(threshold), roc, d, same)


def make_pairs(codes, labels, rng, num_negative=None):
    """All same-identity pairs plus an equal number (by default) of random different pairs."""
    codes = np.asarray(codes, dtype=float)
    labels = np.asarray(labels)
    n = len(labels)
    iu, ju = np.triu_indices(n, 1)
    same = labels[iu] == labels[ju]
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    k = len(pos) if num_negative is None else num_negative
    neg = rng.choice(neg, size=min(k, len(neg)), replace=False)
    idx = np.sort(np.concatenate([pos, neg]))
    return [VerificationPair(codes[iu[t]], codes[ju[t]], bool(same[t])) for t in idx]


# ------------------------------------------------------------- similarity fit

@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, points):
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation


def umeyama_similarity(src, dst):
    """Least-squares rotation, translation and isotropic scale taking ``src`` onto ``dst``."""
    X = np.asarray(src, dtype=float).reshape(-1, 3)
    Y = np.asarray(dst, dtype=float).reshape(-1, 3)
    if X.shape != Y.shape:
        raise ValueError("src and dst must have the same number of points")
    if len(X) < 3:
        raise ValueError("need at least 3 correspondences")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise ValueError("degenerate correspondences (coincident or collinear points)")
    n = len(X)
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = np.sum(Xc * Xc) / n
    s = float(np.sum(D * np.diag(S)) / var_x)
    return SimilarityTransform(R, my - s * R @ mx, s)


# ------------------------------------------------------------- ICP

def vertex_normals(mesh):
    """Unit per-vertex normals from area-weighted incident face normals."""
    V, F = mesh.vertices, mesh.faces
    fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    N = np.zeros_like(V)
    for k in range(3):
        np.add.at(N, F[:, k], fn)
    norm = np.linalg.norm(N, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("mesh has vertices without a defined normal")
    return N / norm


def _crop_mask(mesh, center_index, radius):
    if center_index is None or radius is None:
        return np.ones(mesh.n_vertices, bool)
    c = mesh.vertices[center_index]
    return np.linalg.norm(mesh.vertices - c, axis=1) <= radius


def point_to_plane_distances(source, target, normals=None, mask=None, tree=None):
    """Distance from each source point to the tangent plane of its nearest target vertex."""
    P = source.vertices if isinstance(source, Mesh) else np.asarray(source, dtype=float).reshape(-1, 3)
    if len(P) == 0 or target.n_vertices == 0:
        raise ValueError("point-to-plane distance needs non-empty inputs")
    N = vertex_normals(target) if normals is None else normals
    idx_map = np.arange(target.n_vertices) if mask is None else np.flatnonzero(mask)
    Q = target.vertices[idx_map]
    tree = cKDTree(Q) if tree is None else tree
    _, nn = tree.query(P)
    nn = idx_map[nn]
    return np.abs(np.sum((P - target.vertices[nn]) * N[nn], axis=1))


def point_to_plane_rmse(source, target, **kwargs):
    d = point_to_plane_distances(source, target, **kwargs)
    return float(np.sqrt(np.mean(d * d)))


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    rmse_point_to_plane: float
    iterations: int
    converged: bool
    history: tuple = ()  # point-to-point RMSE after each accepted iteration
    errors: np.ndarray | None = None  # per-source-vertex point-to-plane distance

    @property
    def transform(self):
        return SimilarityTransform(self.rotation, self.translation, self.scale)

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
            "rmse_point_to_plane": self.rmse_point_to_plane,
            "iterations": self.iterations,
            "converged": self.converged,
            "history": list(self.history),
        }


def _radius(X, c):
    return np.sqrt(np.mean(np.sum((X - c) ** 2, axis=1)))


def _initial_guesses(P, Q, init):
    """Starting transforms: centroids and RMS radii matched, rotation per ``init``."""
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    rp = _radius(P, mp)
    s = float(_radius(Q, mq) / rp) if rp > 0 else 1.0
    if init == "identity":
        return [SimilarityTransform()]
    rotations = [np.eye(3)]
    if init == "pca":
        # principal axes of source onto target, over the four proper sign choices
        Vp = np.linalg.svd(P - mp, full_matrices=False)[2]
        Vq = np.linalg.svd(Q - mq, full_matrices=False)[2]
        for signs in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]):
            R = Vq.T @ np.diag(signs) @ Vp
            if np.linalg.det(R) < 0:
                R = Vq.T @ np.diag(signs) @ np.diag([1, 1, -1]) @ Vp
            rotations.append(R)
    elif init != "centroid":
        raise ValueError("init must be 'pca', 'centroid' or 'identity'")
    return [SimilarityTransform(R, mq - s * R @ mp, s) for R in rotations]


def _icp_run(P, Q, tree, T, max_iters, tol):
    def match(T):
        d, nn = tree.query(T.apply(P))
        return float(np.sqrt(np.mean(d * d))), nn

    rmse, nn = match(T)
    history = [rmse]
    converged = False
    it = 0
    while not converged and it < max_iters:
        it += 1
        T_new = umeyama_similarity(P, Q[nn])
        rmse_new, nn_new = match(T_new)
        if rmse_new > rmse:
            converged = True
            break
        improvement = rmse - rmse_new
        T, rmse, nn = T_new, rmse_new, nn_new
        history.append(rmse)
        if improvement < tol or rmse == 0.0:
            converged = True
    return T, it, converged, history


def icp_align(source, target, max_iters=100, tol=1e-12, init="pca",
              crop_center=None, crop_radius=None, symmetric=False):
    """Align ``source`` to ``target`` with a similarity transform.

    Correspondences are nearest target vertices; each step refits the full
    transform in closed form (point-to-point).  The reported error is the
    point-to-plane RMSE against target vertex normals.

    Every start matches centroids and RMS radii.  ``init="centroid"`` keeps the
    identity rotation, ``init="pca"`` additionally tries the four proper
    principal-axis alignments and keeps the run with the lowest final
    point-to-point RMSE, ``init="identity"`` starts from the identity
    transform.  A run stops when the RMSE improves by less than ``tol``; a
    step that would increase it is rejected, so ``history`` never increases.
    ``crop_center``/``crop_radius`` restrict the target to vertices within
    ``crop_radius`` of that vertex.
    """
    P = source.vertices
    if len(P) == 0 or target.n_vertices == 0:
        raise ValueError("ICP needs non-empty meshes")
    mask = _crop_mask(target, crop_center, crop_radius)
    idx_map = np.flatnonzero(mask)
    if idx_map.size < 3:
        raise ValueError("fewer than 3 target vertices inside the crop")
    Q = target.vertices[idx_map]
    tree = cKDTree(Q)

    runs = [_icp_run(P, Q, tree, T0, max_iters, tol) for T0 in _initial_guesses(P, Q, init)]
    T, it, converged, history = min(runs, key=lambda r: r[3][-1])

    aligned = T.apply(P)
    normals = vertex_normals(target)
    errors = point_to_plane_distances(aligned, target, normals, mask, tree)
    sq = errors * errors
    if symmetric:
        moved = Mesh(aligned, source.faces)
        back = point_to_plane_distances(Q, moved)
        sq = np.concatenate([sq, back * back])
    return AlignmentResult(T.rotation, T.translation, float(T.scale), float(np.sqrt(np.mean(sq))),
                           it, converged, tuple(history), errors)


# ------------------------------------------------------------- CED

@dataclass(frozen=True, eq=False)
class CEDCurve:
    values: np.ndarray
    fractions: np.ndarray

    def fraction_below(self, x):
        """Fraction of errors that are <= x."""
        return float(np.searchsorted(self.values, x, side="right")) / len(self.values)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["error", "fraction"])
        for v, f in zip(self.values.tolist(), self.fractions.tolist()):
            w.writerow([repr(v), repr(f)])
        return buf.getvalue()


def ced_curve(errors):
    """Empirical CDF: sorted errors with fraction ``k / N`` at the k-th value."""
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise ValueError("CED of an empty error list")
    return CEDCurve(e, np.arange(1, e.size + 1) / e.size)
