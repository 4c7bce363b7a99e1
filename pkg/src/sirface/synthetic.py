"""Desk-scale stand-ins for scanned faces and labelled image datasets.

``make_face_like_meshes`` produces smooth ellipsoidal face patches on a fixed
grid topology, ``build_model_via_pca`` turns them into a morphable model, and
``generate_identities`` draws identities from the model prior together with
poses, expressions and linear "image features" for the regressor.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import MorphableModel, Pose, euler_to_quaternion, project_landmarks

RANK_TOL = 1e-10


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_vertices: int = 400
    m_id: int = 10
    m_exp: int = 5
    num_identities: int = 20
    samples_per_identity: int = 30
    noise_scale: float = 0.05
    seed: int = 0
    # below: generator knobs with no counterpart in the published setup
    num_scans: int = 60
    num_expression_scans: int = 40
    num_recon: int = 300
    feature_noise: float = 0.1
    feature_dim: int = 0  # 0 -> twice the number of latent parameters
    holdout_fraction: float = 0.2
    landmark_grid: int = 6
    expression_scale: float = 0.5
    max_yaw_deg: float = 40.0
    max_pitch_deg: float = 20.0
    max_roll_deg: float = 15.0

    def __post_init__(self):
        for name in ("n_vertices", "m_id", "num_identities", "samples_per_identity", "num_scans"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.m_exp < 0 or self.num_recon < 0:
            raise ValueError("m_exp and num_recon must be non-negative")
        if self.m_id >= 3 * self.n_vertices:
            raise ValueError("m_id must be smaller than 3 * n_vertices")
        if self.noise_scale < 0 or self.feature_noise < 0:
            raise ValueError("noise levels must be non-negative")
        grid_shape(self.n_vertices)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def grid_shape(n):
    """Most square ``rows x cols == n`` factorisation with both sides >= 3."""
    for rows in range(int(math.isqrt(n)), 2, -1):
        if n % rows == 0 and n // rows >= 3:
            return rows, n // rows
    raise ValueError(f"n_vertices={n} cannot be laid out as a grid with both sides >= 3")


def grid_topology(rows, cols):
    idx = np.arange(rows * cols).reshape(rows, cols)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    return np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)]).astype(np.int64)


def nose_tip_index(rows, cols):
    return (rows // 2) * cols + cols // 2


def landmark_layout(rows, cols, k):
    """Vertex indices of a ``k x k`` lattice spread over the face interior."""
    r = np.unique(np.round(np.linspace(0.15, 0.85, k) * (rows - 1)).astype(int))
    c = np.unique(np.round(np.linspace(0.15, 0.85, k) * (cols - 1)).astype(int))
    return (r[:, None] * cols + c[None, :]).ravel().astype(np.int64)


def _uv(rows, cols):
    v, u = np.meshgrid(np.linspace(-1, 1, rows), np.linspace(-1, 1, cols), indexing="ij")
    return u.ravel(), v.ravel()


def _bump(u, v, cu, cv, wu, wv):
    return np.exp(-0.5 * (((u - cu) / wu) ** 2 + ((v - cv) / wv) ** 2))


def _face(u, v, rng):
    sx, sy, sz = 1 + 0.08 * rng.standard_normal(3)
    x = 70.0 * sx * u
    y = 90.0 * sy * v
    z = 60.0 * sz * np.sqrt(np.clip(1 - 0.6 * (u**2 + v**2), 0, None))
    # jaw width varies below the mouth line
    x = x * (1 + 0.15 * rng.standard_normal() * np.clip(-v, 0, None) ** 2)
    z = z + (25 + 5 * rng.standard_normal()) * _bump(u, v, 0, 0.05, 0.12 + 0.02 * rng.random(), 0.25)
    for _ in range(6):
        cu, cv = rng.uniform(-0.8, 0.8, 2)
        z = z + 4.0 * rng.standard_normal() * _bump(u, v, cu, cv, *rng.uniform(0.2, 0.4, 2))
    return np.stack([x, y, z], axis=1)


def _expression_field(u, v, rng):
    """Smooth displacement mixing mouth, cheek and brow motions."""
    D = np.zeros((u.size, 3))
    mouth = _bump(u, v, 0, -0.45, 0.35, 0.15)
    corners = _bump(np.abs(u), v, 0.3, -0.4, 0.12, 0.12)
    brows = _bump(np.abs(u), v, 0.35, 0.45, 0.25, 0.1)
    cheeks = _bump(np.abs(u), v, 0.45, -0.1, 0.2, 0.2)
    c = rng.standard_normal(6)
    D[:, 1] += 8 * c[0] * mouth * (v < -0.45) - 3 * c[1] * corners
    D[:, 0] += 3 * c[1] * corners * np.sign(u)
    D[:, 1] += 4 * c[2] * brows
    D[:, 2] += 3 * c[3] * cheeks + 2 * c[4] * mouth
    D[:, 0] += 2 * c[5] * brows * u
    return D


def make_face_like_meshes(spec, count=None, seed=None):
    """``count`` flat vertex vectors (length ``3 * n_vertices``) on the shared grid topology."""
    rows, cols = grid_shape(spec.n_vertices)
    u, v = _uv(rows, cols)
    count = spec.num_scans if count is None else count
    seed = spec.seed if seed is None else seed
    out = []
    for k in range(count):
        rng = np.random.default_rng([seed, 0, k])
        out.append(_face(u, v, rng).ravel())
    return out


def make_expression_displacements(spec, count=None, seed=None):
    rows, cols = grid_shape(spec.n_vertices)
    u, v = _uv(rows, cols)
    count = spec.num_expression_scans if count is None else count
    seed = spec.seed if seed is None else seed
    return [_expression_field(u, v, np.random.default_rng([seed, 1, k])).ravel() for k in range(count)]


def _pca(X, m, center=True):
    """Top-``m`` principal directions of the rows of ``X`` and their score std (ddof=1).

    Returns ``(mean, basis, stds, rank)``; ``basis`` has ``min(m, rank)`` columns.
    """
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0) if center else np.zeros(X.shape[1])
    Xc = X - mean
    cov = Xc.T @ Xc / (len(X) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    top = vals[0] if vals.size else 0.0
    rank = int(np.sum(vals > max(top, 0.0) * RANK_TOL)) if top > 0 else 0
    k = min(m, rank)
    basis = vecs[:, :k]
    # deterministic sign: largest-magnitude entry of each column positive
    pivot = np.abs(basis).argmax(axis=0)
    basis = basis * np.sign(basis[pivot, np.arange(k)])
    return mean, basis, np.sqrt(vals[:k]), rank


def build_model_via_pca(samples, m_id, *, topology, landmark_indices,
                        expr_samples=None, m_exp=0, meta=None):
    """Fit a morphable model to neutral scans (and optional expression displacements).

    Eigenvalues are the standard deviations of the component scores.  If the
    centred scans have rank below ``m_id`` (always the case with ``m_id`` or
    fewer scans) a ``RankDeficiencyWarning`` is issued and a smaller basis is
    returned; ``meta["rank_deficient"]`` records it.
    """
    X = np.asarray(samples, dtype=float)
    if len(X) < 2:
        raise ValueError("PCA needs at least 2 samples")
    mean, A, s, rank = _pca(X, m_id)
    meta = dict(meta or {})
    meta.update(requested_m_id=m_id, rank_deficient=A.shape[1] < m_id)
    if A.shape[1] < m_id:
        warnings.warn(f"scan rank {rank} is below m_id={m_id}; returning {A.shape[1]} components",
                      RankDeficiencyWarning, stacklevel=2)
    if expr_samples is not None and m_exp > 0:
        _, B, s_exp, _ = _pca(expr_samples, m_exp, center=False)
    else:
        B, s_exp = np.zeros((X.shape[1], 0)), np.zeros(0)
    return MorphableModel(
        mean_shape=mean, shape_basis=A, expr_basis=B,
        shape_eigenvalues=s, expr_eigenvalues=s_exp,
        topology=topology, landmark_indices=landmark_indices, meta=meta,
    )


def build_synthetic_model(spec):
    rows, cols = grid_shape(spec.n_vertices)
    return build_model_via_pca(
        make_face_like_meshes(spec), spec.m_id,
        topology=grid_topology(rows, cols),
        landmark_indices=landmark_layout(rows, cols, spec.landmark_grid),
        expr_samples=make_expression_displacements(spec) if spec.m_exp else None,
        m_exp=spec.m_exp,
        meta={"nose_tip": nose_tip_index(rows, cols), "grid": [rows, cols]},
    )


POSE_DIM = 7  # quaternion (4), focal (1), 2D translation (2)


def pose_vector(pose):
    return np.concatenate([pose.rotation, [pose.focal], pose.translation2d])


def pose_from_vector(p):
    q = np.asarray(p[:4], dtype=float)
    return Pose(rotation=tuple(q / np.linalg.norm(q)), focal=float(p[4]), translation2d=tuple(p[5:7]))


@dataclass(eq=False)
class SyntheticDataset:
    """Per-sample ground truth and features.

    ``labels`` is -1 for landmark-only (reconstruction) samples.  ``split`` is
    ``"train"`` or ``"test"`` for identity samples and ``"recon"`` otherwise.
    ``poses`` rows are ``pose_vector`` layouts.
    """

    spec: SyntheticSpec
    identity_codes: np.ndarray
    mixing: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    codes: np.ndarray
    exprs: np.ndarray
    poses: np.ndarray
    landmarks: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def pose(self, i):
        return pose_from_vector(self.poses[i])

    def indices(self, split):
        return np.flatnonzero(self.split == split)


def latent_vector(model, code, expr, pose_vec):
    """Normalised latent parameters that the linear features are mixed from."""
    p = np.asarray(pose_vec, dtype=float)
    return np.concatenate([
        np.asarray(code) / model.shape_eigenvalues,
        np.asarray(expr) / model.expr_eigenvalues if model.m_exp else np.zeros(0),
        p[:4], [(p[4] - 1.0) * 10.0], p[5:7] / 5.0,
    ])


def _draw_pose(rng, spec):
    yaw, pitch, roll = np.deg2rad([
        rng.uniform(-spec.max_yaw_deg, spec.max_yaw_deg),
        rng.uniform(-spec.max_pitch_deg, spec.max_pitch_deg),
        rng.uniform(-spec.max_roll_deg, spec.max_roll_deg),
    ])
    q = euler_to_quaternion(yaw, pitch, roll)
    return np.concatenate([q, [rng.uniform(0.9, 1.1)], 5.0 * rng.standard_normal(2)])


def generate_identities(model, spec):
    """Draw identities from the model prior and render them as labelled samples.

    Identity codes follow ``N(0, diag(sigma^2))``; each sample perturbs its
    identity code by ``noise_scale * sigma * N(0, 1)`` and draws its own pose
    and expression.  ``spec.num_recon`` extra single-sample identities carry
    landmark labels only.
    """
    ss = np.random.SeedSequence([spec.seed, 2])
    r_ids, r_samples, r_recon, r_mix = (np.random.default_rng(s) for s in ss.spawn(4))
    s_id, s_exp = model.shape_eigenvalues, model.expr_eigenvalues
    m_id, m_exp = model.m_id, model.m_exp
    K, S = spec.num_identities, spec.samples_per_identity

    identity_codes = s_id * r_ids.standard_normal((K, m_id))
    n_test = int(round(spec.holdout_fraction * S))

    codes, exprs, poses, labels, split = [], [], [], [], []

    def add(code, rng, label, part):
        codes.append(code)
        exprs.append(spec.expression_scale * s_exp * rng.standard_normal(m_exp))
        poses.append(_draw_pose(rng, spec))
        labels.append(label)
        split.append(part)

    for j in range(K):
        for k in range(S):
            code = identity_codes[j] + spec.noise_scale * s_id * r_samples.standard_normal(m_id)
            add(code, r_samples, j, "test" if k >= S - n_test else "train")
    for _ in range(spec.num_recon):
        add(s_id * r_recon.standard_normal(m_id), r_recon, -1, "recon")

    codes, exprs, poses = np.array(codes), np.array(exprs).reshape(-1, m_exp), np.array(poses)
    latent = np.array([latent_vector(model, c, e, p) for c, e, p in zip(codes, exprs, poses)])
    k = latent.shape[1]
    d = spec.feature_dim or 2 * k
    mixing = r_mix.standard_normal((d, k)) / math.sqrt(k)
    features = latent @ mixing.T + spec.feature_noise * r_mix.standard_normal((len(latent), d))
    landmarks = np.array([
        project_landmarks(model, c, e, pose_from_vector(p)) for c, e, p in zip(codes, exprs, poses)
    ])
    return SyntheticDataset(
        spec=spec, identity_codes=identity_codes, mixing=mixing, features=features,
        labels=np.array(labels, dtype=np.int64), split=np.array(split),
        codes=codes, exprs=exprs, poses=poses, landmarks=landmarks,
    )


# ---------------------------------------------------------------- storage

def _columns(ds):
    d, m_id, m_exp = ds.features.shape[1], ds.codes.shape[1], ds.exprs.shape[1]
    L = ds.landmarks.shape[1]
    return (["index", "split", "label"] + [f"x{i}" for i in range(d)]
            + [f"id{i}" for i in range(m_id)] + [f"exp{i}" for i in range(m_exp)]
            + ["qw", "qx", "qy", "qz", "focal", "tx", "ty"]
            + [f"lm{i}{a}" for i in range(L) for a in "xy"])


def dataset_to_csv(ds):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_columns(ds))
    for i in range(len(ds)):
        nums = np.concatenate([ds.features[i], ds.codes[i], ds.exprs[i], ds.poses[i], ds.landmarks[i].ravel()])
        w.writerow([i, ds.split[i], int(ds.labels[i])] + [repr(float(x)) for x in nums])
    return buf.getvalue()


def dataset_meta(ds):
    return {
        "format": "sirface-dataset",
        "version": 1,
        "spec": asdict(ds.spec),
        "identity_codes": ds.identity_codes.tolist(),
        "mixing": ds.mixing.tolist(),
        "n_samples": len(ds),
        "n_landmarks": int(ds.landmarks.shape[1]),
    }


def save_dataset(ds, csv_path, meta_path):
    """Write the sample table (CSV, one row per sample) and its JSON sidecar."""
    Path(csv_path).write_text(dataset_to_csv(ds))
    Path(meta_path).write_text(json.dumps(dataset_meta(ds), separators=(",", ":")) + "\n")


def load_dataset(csv_path, meta_path):
    meta = json.loads(Path(meta_path).read_text())
    spec = SyntheticSpec(**meta["spec"])
    mixing = np.array(meta["mixing"], dtype=float)
    ident = np.array(meta["identity_codes"], dtype=float)
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(h.startswith("x") for h in header)
    m_id = sum(h.startswith("id") for h in header)
    m_exp = sum(h.startswith("exp") for h in header)
    L = meta["n_landmarks"]
    num = np.array([[float(x) for x in r[3:]] for r in body], dtype=float).reshape(len(body), -1)
    o = np.cumsum([0, d, m_id, m_exp, 7, 2 * L])
    return SyntheticDataset(
        spec=spec, identity_codes=ident, mixing=mixing,
        features=num[:, o[0]:o[1]], labels=np.array([int(r[2]) for r in body], dtype=np.int64),
        split=np.array([r[1] for r in body]), codes=num[:, o[1]:o[2]],
        exprs=num[:, o[2]:o[3]], poses=num[:, o[3]:o[4]],
        landmarks=num[:, o[4]:o[5]].reshape(len(body), L, 2),
    )
