"""Linear 3D morphable model: shape synthesis, rigid pose and weak projection.

Vertex vectors are interleaved ``(x1, y1, z1, x2, ...)`` so that
``vector.reshape(-1, 3)`` gives the ``(n, 3)`` vertex grid.  Rotations are
stored as unit quaternions ``(w, x, y, z)``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHONORMAL_TOL = 1e-8
QUATERNION_TOL = 1e-10
GIMBAL_TOL = 1e-6

# weak-perspective truncation: keep x and y
PROJECTION = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

MODEL_FORMAT = "sirface-morphable-model"
MODEL_FORMAT_VERSION = 1


class OrthonormalityWarning(UserWarning):
    pass


class GimbalLockWarning(UserWarning):
    pass


def orthonormality_error(basis):
    """Max-abs deviation of ``basis.T @ basis`` from the identity."""
    basis = np.asarray(basis, dtype=float)
    if basis.shape[1] == 0:
        return 0.0
    gram = basis.T @ basis
    return float(np.max(np.abs(gram - np.eye(gram.shape[0]))))


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Mean shape plus linear identity and expression bases.

    Eigenvalues are per-component standard deviations (not variances), so the
    prior on a code is ``alpha_i / eigenvalue_i ~ N(0, 1)``.

    With ``strict=True`` a shape basis that is not orthonormal to
    ``ORTHONORMAL_TOL`` raises; otherwise an ``OrthonormalityWarning`` is
    issued and ``is_orthonormal`` is False.
    """

    mean_shape: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    shape_eigenvalues: np.ndarray
    expr_eigenvalues: np.ndarray
    topology: np.ndarray
    landmark_indices: np.ndarray
    strict: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=float).ravel()
        if mean.size % 3:
            raise ValueError(f"mean_shape length {mean.size} is not a multiple of 3")
        n3 = mean.size
        A_id = np.asarray(self.shape_basis, dtype=float).reshape(n3, -1)
        A_exp = np.asarray(self.expr_basis, dtype=float).reshape(n3, -1)
        s_id = np.asarray(self.shape_eigenvalues, dtype=float).ravel()
        s_exp = np.asarray(self.expr_eigenvalues, dtype=float).ravel()
        tri = np.asarray(self.topology, dtype=np.int64).reshape(-1, 3)
        lms = np.asarray(self.landmark_indices, dtype=np.int64).ravel()

        if s_id.size != A_id.shape[1]:
            raise ValueError("shape_eigenvalues length must equal shape_basis width")
        if s_exp.size != A_exp.shape[1]:
            raise ValueError("expr_eigenvalues length must equal expr_basis width")
        if np.any(s_id <= 0) or np.any(s_exp <= 0):
            raise ValueError("eigenvalues must be strictly positive")
        n = n3 // 3
        if lms.size and (lms.min() < 0 or lms.max() >= n):
            raise ValueError("landmark index out of range")
        _check_faces(tri, n)

        err = orthonormality_error(A_id)
        ok = err <= ORTHONORMAL_TOL
        if not ok:
            msg = f"shape basis is not orthonormal (max |A^T A - I| = {err:.3e})"
            if self.strict:
                raise ValueError(msg)
            warnings.warn(msg, OrthonormalityWarning, stacklevel=3)

        for name, value in [
            ("mean_shape", mean), ("shape_basis", A_id), ("expr_basis", A_exp),
            ("shape_eigenvalues", s_id), ("expr_eigenvalues", s_exp),
            ("topology", tri), ("landmark_indices", lms),
        ]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "meta", dict(self.meta))
        object.__setattr__(self, "orthonormality_error", err)
        object.__setattr__(self, "is_orthonormal", ok)

    @property
    def n_vertices(self):
        return self.mean_shape.size // 3

    @property
    def m_id(self):
        return self.shape_basis.shape[1]

    @property
    def m_exp(self):
        return self.expr_basis.shape[1]

    @property
    def n_landmarks(self):
        return self.landmark_indices.size

    def zero_shape(self):
        return np.zeros(self.m_id)

    def zero_expr(self):
        return np.zeros(self.m_exp)


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        _check_faces(f, len(v))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return len(self.vertices)


def _check_faces(faces, n):
    if faces.size == 0:
        return
    if faces.min() < 0 or faces.max() >= n:
        raise ValueError("face index out of range")
    a, b, c = faces.T
    if np.any((a == b) | (b == c) | (a == c)):
        raise ValueError("degenerate triangle with repeated vertex index")


@dataclass(frozen=True)
class Pose:
    """Camera pose: rotation quaternion ``(w, x, y, z)``, 3D/2D translations, focal scale."""

    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation3d: tuple = (0.0, 0.0, 0.0)
    translation2d: tuple = (0.0, 0.0)
    focal: float = 1.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).ravel()
        if q.size != 4:
            raise ValueError("rotation must be a 4-vector quaternion")
        if abs(np.linalg.norm(q) - 1.0) > QUATERNION_TOL:
            raise ValueError(f"quaternion is not unit length (|q| = {np.linalg.norm(q)!r})")
        t3 = np.asarray(self.translation3d, dtype=float).ravel()
        t2 = np.asarray(self.translation2d, dtype=float).ravel()
        if t3.size != 3 or t2.size != 2:
            raise ValueError("translation3d must have 3 entries and translation2d 2")
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        object.__setattr__(self, "rotation", tuple(float(x) for x in q))
        object.__setattr__(self, "translation3d", tuple(float(x) for x in t3))
        object.__setattr__(self, "translation2d", tuple(float(x) for x in t2))
        object.__setattr__(self, "focal", float(self.focal))

    @property
    def matrix(self):
        return quaternion_to_matrix(self.rotation)

    @classmethod
    def from_euler(cls, yaw, pitch, roll, **kwargs):
        return cls(rotation=tuple(euler_to_quaternion(yaw, pitch, roll)), **kwargs)


def normalize_quaternion(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quaternion_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quaternion_matrix_jacobian(q):
    """``dR/dq`` for the quadratic form in ``quaternion_to_matrix``; shape (4, 3, 3)."""
    w, x, y, z = np.asarray(q, dtype=float)
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]])
    return np.stack([dw, dx, dy, dz]).astype(float)


def euler_to_matrix(yaw, pitch, roll):
    """ZYX intrinsic: ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def euler_to_quaternion(yaw, pitch, roll):
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    q = np.array([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ])
    return q / np.linalg.norm(q)


def extract_euler(pose):
    """ZYX (yaw, pitch, roll) angles in radians of a pose's rotation.

    Near gimbal lock (|pitch| within ``GIMBAL_TOL`` of pi/2) a
    ``GimbalLockWarning`` is issued and the branch with roll = 0 is returned.
    """
    q = pose.rotation if isinstance(pose, Pose) else pose
    R = quaternion_to_matrix(q)
    sp = float(np.clip(-R[2, 0], -1.0, 1.0))
    pitch = math.asin(sp)
    if abs(abs(pitch) - math.pi / 2) < GIMBAL_TOL:
        warnings.warn("pose is within the gimbal-lock region", GimbalLockWarning, stacklevel=2)
        yaw = math.atan2(-R[0, 1], R[1, 1])
        return yaw, pitch, 0.0
    yaw = math.atan2(R[1, 0], R[0, 0])
    roll = math.atan2(R[2, 1], R[2, 2])
    return yaw, pitch, roll


def _code(values, width, what):
    a = np.asarray(values, dtype=float).ravel()
    if a.size != width:
        raise ValueError(f"{what} has length {a.size}, model expects {width}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} has non-finite entries")
    return a


def synthesize_vector(model, shape, expr=None):
    """Flat length-3n shape ``mean + A_id @ shape + A_exp @ expr``."""
    a_id = _code(shape, model.m_id, "shape code")
    out = model.mean_shape + model.shape_basis @ a_id
    if expr is not None:
        out = out + model.expr_basis @ _code(expr, model.m_exp, "expression code")
    return out


def synthesize(model, shape, expr=None):
    return Mesh(synthesize_vector(model, shape, expr).reshape(-1, 3), model.topology)


def _vertices(mesh):
    if isinstance(mesh, Mesh):
        return mesh.vertices
    return np.asarray(mesh, dtype=float).reshape(-1, 3)


def transform_to_camera(mesh, pose):
    """Rigid transform ``v -> R v + t3d`` of every vertex."""
    V = _vertices(mesh) @ pose.matrix.T + np.asarray(pose.translation3d)
    if isinstance(mesh, Mesh):
        return Mesh(V, mesh.faces)
    return V


def project(mesh, pose, landmark_indices=None):
    """Weak-perspective projection ``f * Pr @ R @ v + t2d``.

    ``t3d`` does not enter.  Returns an ``(N, 2)`` array, restricted to
    ``landmark_indices`` when given.
    """
    V = _vertices(mesh)
    if landmark_indices is not None:
        V = V[np.asarray(landmark_indices, dtype=np.int64)]
    M = pose.focal * (PROJECTION @ pose.matrix)
    return V @ M.T + np.asarray(pose.translation2d)


def project_landmarks(model, shape, expr, pose):
    """Sparse 2D landmarks of the posed model instance."""
    V = synthesize_vector(model, shape, expr).reshape(-1, 3)
    return project(V, pose, model.landmark_indices)


def save_model(model, path):
    """Write the JSON model container.

    Header keys ``n``, ``m_id``, ``m_exp``, ``n_landmarks`` followed by flat
    row-major arrays.  Floats are written with ``repr`` precision, so reloading
    is bit-exact.
    """
    doc = model_to_dict(model)
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def model_to_dict(model):
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "n": model.n_vertices,
        "m_id": model.m_id,
        "m_exp": model.m_exp,
        "n_landmarks": model.n_landmarks,
        "n_faces": len(model.topology),
        "mean_shape": model.mean_shape.tolist(),
        "shape_basis": model.shape_basis.ravel().tolist(),
        "expr_basis": model.expr_basis.ravel().tolist(),
        "shape_eigenvalues": model.shape_eigenvalues.tolist(),
        "expr_eigenvalues": model.expr_eigenvalues.tolist(),
        "topology": model.topology.ravel().tolist(),
        "landmark_indices": model.landmark_indices.tolist(),
        "meta": model.meta,
    }


def load_model(path, strict=True):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
    n3 = 3 * doc["n"]
    return MorphableModel(
        mean_shape=np.array(doc["mean_shape"], dtype=float),
        shape_basis=np.array(doc["shape_basis"], dtype=float).reshape(n3, doc["m_id"]),
        expr_basis=np.array(doc["expr_basis"], dtype=float).reshape(n3, doc["m_exp"]),
        shape_eigenvalues=np.array(doc["shape_eigenvalues"], dtype=float),
        expr_eigenvalues=np.array(doc["expr_eigenvalues"], dtype=float),
        topology=np.array(doc["topology"], dtype=np.int64).reshape(-1, 3),
        landmark_indices=np.array(doc["landmark_indices"], dtype=np.int64),
        strict=strict,
        meta=doc.get("meta", {}),
    )
