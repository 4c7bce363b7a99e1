"""Mixed-dataset SGD training of a linear parameter regressor.

A linear map from feature vectors to normalised model parameters stands in
for the image network.  Reconstruction samples are supervised by projected
landmarks, identity samples by the identity-aware terms, and class centers
are updated with neutral-frontal weights after every batch.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .centers import CenterTable, neutral_confidence, update_centers
from .geometry import kl_to_standard_normal
from .losses import (LossWeights, center_loss, check_anchors, cosface_loss, make_anchors,
                     sir_batch_loss)
from .model import PROJECTION, quaternion_matrix_jacobian, quaternion_to_matrix
from .synthetic import (POSE_DIM, SyntheticSpec, build_synthetic_model, generate_identities,
                        pose_from_vector)

TERMS = ("landmark", "sir", "reg")
POOLS = ("recon", "mixed")
SCHEMA_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TrainSample:
    """One input with exactly one of an identity label or a landmark target."""

    features: np.ndarray
    label: int | None = None
    landmarks: np.ndarray | None = None
    pose: object = None
    expr: np.ndarray | None = None

    def __post_init__(self):
        if (self.label is None) == (self.landmarks is None):
            raise ValueError("a training sample carries exactly one of label or landmarks")

    @property
    def kind(self):
        return "identity" if self.label is not None else "recon"


@dataclass(eq=False)
class MixedDataset:
    recon_samples: list
    recog_samples: list

    @property
    def n_recon(self):
        return len(self.recon_samples)

    @property
    def n_recog(self):
        return len(self.recog_samples)

    @property
    def num_classes(self):
        return 1 + max((s.label for s in self.recog_samples), default=-1)

    @classmethod
    def from_synthetic(cls, ds, split="train"):
        recon, recog = [], []
        for i in range(len(ds)):
            if ds.split[i] == "recon":
                recon.append(TrainSample(ds.features[i], landmarks=ds.landmarks[i]))
            elif ds.split[i] == split:
                recog.append(TrainSample(ds.features[i], label=int(ds.labels[i]),
                                         pose=ds.pose(i), expr=ds.exprs[i]))
        return cls(recon, recog)


def sampling_probability(ds):
    """Probability of drawing a recognition sample, ``N_recon / (N_recog + N_recon)``.

    Written as printed in the method description: the smaller reconstruction
    pool sets the recognition draw rate.
    """
    total = ds.n_recog + ds.n_recon
    if total <= 0:
        raise ValueError("dataset is empty")
    return ds.n_recon / total


def draw_batch(ds, P, rng, batch_size):
    """Each slot is a recognition sample with probability ``P``, drawn uniformly from its pool."""
    kinds = rng.random(batch_size) < P
    n_id = int(kinds.sum())
    if n_id and not ds.recog_samples:
        raise ValueError("recognition pool is empty but P > 0")
    if n_id < batch_size and not ds.recon_samples:
        raise ValueError("reconstruction pool is empty but P < 1")
    id_idx = rng.integers(0, max(ds.n_recog, 1), size=batch_size)
    rc_idx = rng.integers(0, max(ds.n_recon, 1), size=batch_size)
    return [ds.recog_samples[i] if k else ds.recon_samples[j]
            for k, i, j in zip(kinds, id_idx, rc_idx)]


# ------------------------------------------------------------- regressor

@dataclass(eq=False)
class LinearRegressor:
    """``out = W @ x + b`` split into normalised shape/expression codes and raw pose.

    Shape and expression outputs are in prior-normalised units; multiply by the
    eigenvalues to get model codes.  Pose outputs are an unnormalised
    quaternion, a focal scale and a 2D translation.
    """

    weight: np.ndarray
    bias: np.ndarray
    m_id: int
    m_exp: int

    @classmethod
    def init(cls, d, m_id, m_exp, rng, scale=None):
        """Gaussian weights with std ``scale`` (default ``1/sqrt(d)``), neutral pose bias."""
        scale = 1.0 / math.sqrt(d) if scale is None else scale
        out = m_id + m_exp + POSE_DIM
        b = np.zeros(out)
        b[m_id + m_exp] = 1.0  # identity rotation
        b[m_id + m_exp + 4] = 1.0  # unit focal
        return cls(scale * rng.standard_normal((out, d)), b, m_id, m_exp)

    def copy(self):
        return LinearRegressor(self.weight.copy(), self.bias.copy(), self.m_id, self.m_exp)

    def __call__(self, X):
        return np.asarray(X, dtype=float) @ self.weight.T + self.bias

    def split(self, out):
        a, b = self.m_id, self.m_id + self.m_exp
        return out[..., :a], out[..., a:b], out[..., b:]

    def predict_codes(self, model, X):
        z_id, z_exp, _ = self.split(self(X))
        return z_id * model.shape_eigenvalues, z_exp * model.expr_eigenvalues

    def predict_poses(self, X):
        return [pose_from_vector(p) for p in self.split(self(X))[2]]


# ------------------------------------------------------------- config

@dataclass(frozen=True)
class StageConfig:
    name: str
    epochs: int
    terms: tuple = TERMS
    weights: LossWeights = LossWeights()
    pool: str = "mixed"
    steps_per_epoch: int = 0  # 0 -> one pass over the pool
    learning_rate: float | None = None  # None -> TrainConfig.learning_rate

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"stage {self.name!r}: epochs must be >= 0")
        bad = set(self.terms) - set(TERMS)
        if bad:
            raise ValueError(f"stage {self.name!r}: unknown term(s) {sorted(bad)}")
        if self.pool not in POOLS:
            raise ValueError(f"stage {self.name!r}: pool must be one of {POOLS}")


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple
    seed: int = 0
    learning_rate: float = 0.05
    batch_size: int = 32
    center_lr: float = 0.5
    center_lambda: float = 1.0
    anchor_lr: float | None = None
    lr_decay: float = 1.0  # per-epoch factor, restarted at each stage
    init_scale: float | None = None  # None -> 1/sqrt(feature dim)
    pix_on_identity: bool = True
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not self.stages:
            raise ValueError("stages: at least one stage is required")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"schema_version: unsupported value {version!r}")
        d.pop("synthetic", None)
        if "stages" not in d:
            raise ValueError("stages: field is required")
        stages = []
        for k, s in enumerate(d.pop("stages")):
            s = dict(s)
            try:
                w = LossWeights.from_dict(s.pop("weights", {}))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"stages[{k}].weights: {exc}") from None
            unknown = set(s) - set(StageConfig.__dataclass_fields__)
            if unknown:
                raise ValueError(f"stages[{k}]: unknown field(s) {', '.join(sorted(unknown))}")
            if "terms" in s:
                s["terms"] = tuple(s["terms"])
            s.setdefault("name", f"stage{k + 1}")
            try:
                stages.append(StageConfig(weights=w, **s))
            except TypeError as exc:
                raise ValueError(f"stages[{k}]: {exc}") from None
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown field(s): {', '.join(sorted(unknown))}")
        return cls(stages=tuple(stages), **d)


def two_stage_config(epochs=(10, 30), weights=LossWeights(), sir=True, **kwargs):
    """Landmark-only warm-up on the reconstruction pool, then the mixed pool with SIR."""
    stage2_terms = ("landmark", "sir", "reg") if sir else ("landmark", "reg")
    return TrainConfig(stages=(
        StageConfig("warmup", epochs[0], ("landmark", "reg"), weights, "recon"),
        StageConfig("mixed", epochs[1], stage2_terms, weights, "mixed"),
    ), **kwargs)


# Center-loss weight and confidence decay matched to millimetre-scale codes
# of the default synthetic model (|alpha_exp| ~ 20).
DESK_WEIGHTS = LossWeights(eps_c=1e-4)
DESK_SETTINGS = dict(learning_rate=0.05, batch_size=32, center_lambda=0.05, lr_decay=0.95)


def desk_config(sir=True, seed=0, epochs=(10, 30), **overrides):
    """Two-stage schedule tuned for the default ``SyntheticSpec``."""
    weights = overrides.pop("weights", DESK_WEIGHTS)
    return two_stage_config(epochs, weights, sir=sir, seed=seed, **{**DESK_SETTINGS, **overrides})


def config_to_dict(config):
    d = {"schema_version": config.schema_version}
    for k in TrainConfig.__dataclass_fields__:
        if k not in ("stages", "schema_version"):
            d[k] = getattr(config, k)
    d["stages"] = [
        {"name": s.name, "epochs": s.epochs, "terms": list(s.terms), "pool": s.pool,
         "steps_per_epoch": s.steps_per_epoch, "learning_rate": s.learning_rate,
         "weights": s.weights.to_dict()}
        for s in config.stages
    ]
    return d


# ------------------------------------------------------------- batch loss

class _LandmarkGeometry:
    """Model rows restricted to the landmark vertices."""

    def __init__(self, model):
        L = model.landmark_indices
        rows = (3 * L[:, None] + np.arange(3)).ravel()
        n = len(L)
        self.mean = model.mean_shape[rows].reshape(n, 3)
        self.A = model.shape_basis[rows].reshape(n, 3, -1)
        self.B = model.expr_basis[rows].reshape(n, 3, -1)
        self.s_id = model.shape_eigenvalues
        self.s_exp = model.expr_eigenvalues


def _landmark_term(geo, out_id, out_exp, out_pose, targets, want_grad):
    """Per-sample ``(1/N) sqrt(sum ||v - v_hat||^2)`` and its gradient w.r.t. the raw outputs."""
    alpha = out_id * geo.s_id
    beta = out_exp * geo.s_exp
    V = geo.mean + np.einsum("lcm,bm->blc", geo.A, alpha) + np.einsum("lcm,bm->blc", geo.B, beta)
    q = out_pose[:, :4]
    qn = np.linalg.norm(q, axis=1)
    qh = q / qn[:, None]
    R = np.stack([quaternion_to_matrix(x) for x in qh])
    f = out_pose[:, 4]
    t = out_pose[:, 5:7]
    RV = np.einsum("bij,blj->bli", R, V)
    P = f[:, None, None] * RV[..., :2] + t[:, None, :]
    D = P - targets
    N = D.shape[1]
    norm = np.sqrt(np.sum(D * D, axis=(1, 2)))
    values = norm / N
    if not want_grad:
        return values, None
    with np.errstate(invalid="ignore", divide="ignore"):
        gP = np.where(norm[:, None, None] > 0, D / (N * norm[:, None, None]), 0.0)
    g_t = gP.sum(axis=1)
    g_f = np.sum(gP * RV[..., :2], axis=(1, 2))
    gRV = np.concatenate([gP * f[:, None, None], np.zeros(gP.shape[:2] + (1,))], axis=2)
    g_R = np.einsum("bli,blj->bij", gRV, V)
    g_V = np.einsum("bli,bij->blj", gRV, R)
    g_qh = np.stack([np.einsum("ij,kij->k", g, quaternion_matrix_jacobian(x)) for g, x in zip(g_R, qh)])
    g_q = (g_qh - qh * np.sum(qh * g_qh, axis=1, keepdims=True)) / qn[:, None]
    g_id = np.einsum("blc,lcm->bm", g_V, geo.A) * geo.s_id
    g_exp = np.einsum("blc,lcm->bm", g_V, geo.B) * geo.s_exp
    g_pose = np.concatenate([g_q, g_f[:, None], g_t], axis=1)
    return values, np.concatenate([g_id, g_exp, g_pose], axis=1)


def batch_loss(reg, model, batch, stage, centers, anchors, pix_on_identity=True,
               return_grad=False, _geo=None):
    """Mean routed loss over a batch and its gradient w.r.t. weight, bias and anchors.

    Matches the per-sample ``losses.total_loss`` averaged over the batch, with
    the KL term estimated from the batch's identity samples (needs at least
    two of them; otherwise it is skipped).
    """
    w = stage.weights
    terms = set(stage.terms)
    geo = _geo or _LandmarkGeometry(model)
    X = np.array([s.features for s in batch], dtype=float)
    out = reg(X)
    B = len(batch)
    m_id, m_exp = reg.m_id, reg.m_exp
    g_out = np.zeros_like(out)
    g_anchors = np.zeros_like(anchors)
    parts = {}

    is_id = np.array([s.label is not None for s in batch])
    rc = np.flatnonzero(~is_id)
    ids = np.flatnonzero(is_id)

    if "landmark" in terms and rc.size:
        z_id, z_exp, z_pose = reg.split(out[rc])
        T = np.array([batch[i].landmarks for i in rc], dtype=float)
        vals, g = _landmark_term(geo, z_id, z_exp, z_pose, T, return_grad)
        parts["landmark"] = w.eps_l * float(vals.sum()) / B
        if return_grad:
            g_out[rc] += w.eps_l * g / B

    if "reg" in terms:
        use = np.ones(B, bool) if pix_on_identity else ~is_id
        z_id, z_exp, _ = reg.split(out[use])
        val = w.eps_id * np.sum(z_id**2) + w.eps_exp * np.sum(z_exp**2)
        parts["reg"] = w.eps_reg * float(val) / B
        if return_grad:
            g_out[use, :m_id] += 2 * w.eps_reg * w.eps_id * z_id / B
            g_out[use, m_id:m_id + m_exp] += 2 * w.eps_reg * w.eps_exp * z_exp / B

    if "sir" in terms and ids.size:
        codes = out[ids, :m_id] * geo.s_id
        labels = [batch[i].label for i in ids]
        ww = w if ids.size >= 2 else w.replace(eps_kl=0.0)
        val, g = sir_batch_loss(codes, labels, centers, anchors, geo.s_id, ww, return_grad=True)
        scale = w.eps_s * ids.size / B
        parts["sir"] = scale * val
        parts["cosface"] = float(np.mean([
            cosface_loss(c, y, anchors, w.cosface_scale, w.cosface_margin) for c, y in zip(codes, labels)]))
        parts["center"] = float(np.mean([center_loss(c, y, centers) for c, y in zip(codes, labels)]))
        parts["kl"] = kl_to_standard_normal(codes, geo.s_id) if ids.size >= 2 else float("nan")
        if return_grad:
            g_out[ids, :m_id] += scale * g["codes"] * geo.s_id
            g_anchors += scale * g["anchors"]

    total = sum(v for k, v in parts.items() if k in ("landmark", "reg", "sir"))
    parts["total"] = total
    if not return_grad:
        return total, parts
    grads = {"weight": g_out.T @ X, "bias": g_out.sum(axis=0), "anchors": g_anchors}
    return total, parts, grads


# ------------------------------------------------------------- metrics

def class_spread(codes, labels):
    """Mean distance to own class mean, mean distance between class means, and their ratio."""
    codes = np.asarray(codes, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    means = np.array([codes[labels == c].mean(axis=0) for c in classes])
    idx = np.searchsorted(classes, labels)
    intra = float(np.mean(np.linalg.norm(codes - means[idx], axis=1)))
    diff = means[:, None, :] - means[None, :, :]
    iu = np.triu_indices(len(classes), 1)
    inter = float(np.mean(np.linalg.norm(diff, axis=2)[iu])) if len(classes) > 1 else 0.0
    ratio = inter / intra if intra > 0 else math.inf
    return intra, inter, ratio


def evaluate_codes(reg, model, samples):
    X = np.array([s.features for s in samples], dtype=float)
    codes, _ = reg.predict_codes(model, X)
    labels = np.array([s.label for s in samples])
    intra, inter, ratio = class_spread(codes, labels)
    z = codes / model.shape_eigenvalues
    return {
        "intra": intra,
        "inter": inter,
        "ratio": ratio,
        "kl_codes": kl_to_standard_normal(codes, model.shape_eigenvalues),
        "norm_sq": float(np.mean(np.sum(z * z, axis=1)) / model.m_id),
    }


HISTORY_FIELDS = ("epoch", "stage", "landmark", "reg", "sir", "cosface", "center", "kl", "total",
                  "intra", "inter", "ratio", "kl_codes", "norm_sq")


def history_to_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow(["" if row.get(k) is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                    for k in HISTORY_FIELDS])
    return buf.getvalue()


# ------------------------------------------------------------- training

@dataclass(eq=False)
class TrainResult:
    regressor: LinearRegressor
    centers: CenterTable
    anchors: np.ndarray
    history: list = field(default_factory=list)
    initial: LinearRegressor | None = None

    def __iter__(self):
        return iter((self.regressor, self.centers, self.history))


def _confidence(sample, out_exp, out_pose, lam):
    if sample.pose is not None and sample.expr is not None:
        return neutral_confidence(sample.pose, sample.expr, lam)
    return neutral_confidence(pose_from_vector(out_pose), out_exp, lam)


def train(ds, config, model, log=None):
    """Run every stage of ``config``; returns regressor, centers and per-epoch history.

    Raises ``DivergenceError`` when a batch loss becomes non-finite.
    """
    rng = np.random.default_rng(config.seed)
    d = len((ds.recon_samples or ds.recog_samples)[0].features)
    reg = LinearRegressor.init(d, model.m_id, model.m_exp, rng, config.init_scale)
    initial = reg.copy()
    K = max(ds.num_classes, 1)
    anchors = make_anchors(K, model.m_id, rng)
    centers = CenterTable(np.zeros((K, model.m_id)), config.center_lr, config.center_lambda)
    geo = _LandmarkGeometry(model)

    history = []
    if ds.recog_samples:
        history.append({"epoch": 0, "stage": "init", **evaluate_codes(reg, model, ds.recog_samples)})

    epoch = 0
    for stage in config.stages:
        if stage.pool == "recon":
            pool = MixedDataset(ds.recon_samples, [])
            P = 0.0
        else:
            pool = ds
            P = sampling_probability(ds)
        steps = stage.steps_per_epoch or math.ceil((pool.n_recon + pool.n_recog) / config.batch_size)
        base_lr = config.learning_rate if stage.learning_rate is None else stage.learning_rate
        for k in range(stage.epochs):
            epoch += 1
            lr = base_lr * config.lr_decay**k
            anchor_lr = lr if config.anchor_lr is None else config.anchor_lr * config.lr_decay**k
            sums = {}
            for _ in range(steps):
                batch = draw_batch(pool, P, rng, config.batch_size)
                total, parts, grads = batch_loss(reg, model, batch, stage, centers, anchors,
                                                 config.pix_on_identity, True, geo)
                if not math.isfinite(total):
                    raise DivergenceError(f"non-finite loss at epoch {epoch} ({stage.name})")
                for name, v in parts.items():
                    sums[name] = sums.get(name, 0.0) + v
                id_rows = [s for s in batch if s.label is not None]
                if "sir" in stage.terms and id_rows:
                    out = reg(np.array([s.features for s in id_rows]))
                    z_id, z_exp, z_pose = reg.split(out)
                    trip = [(z * geo.s_id, s.label, _confidence(s, e * geo.s_exp, p, centers.lam))
                            for z, e, p, s in zip(z_id, z_exp, z_pose, id_rows)]
                    centers = update_centers(centers, trip)
                reg.weight -= lr * grads["weight"]
                reg.bias -= lr * grads["bias"]
                if "sir" in stage.terms:
                    anchors = anchors - anchor_lr * grads["anchors"]
                    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
            row = {"epoch": epoch, "stage": stage.name}
            row.update({k: v / steps for k, v in sums.items()})
            if ds.recog_samples:
                row.update(evaluate_codes(reg, model, ds.recog_samples))
            history.append(row)
            if log:
                log(row)
    check_anchors(anchors)
    return TrainResult(reg, centers, anchors, history, initial)


# ------------------------------------------------------------- gradient check

def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _tiny_problem(seed):
    spec = SyntheticSpec(n_vertices=36, m_id=4, m_exp=2, num_identities=3, samples_per_identity=4,
                         num_scans=12, num_expression_scans=8, num_recon=6, landmark_grid=3,
                         holdout_fraction=0.0, seed=seed)
    model = build_synthetic_model(spec)
    ds = MixedDataset.from_synthetic(generate_identities(model, spec))
    return model, ds


def gradient_check(config=None, seed=0, step=1e-5):
    """Max relative error of analytic vs central-difference gradients of the batch loss.

    Checked with respect to regressor weight, bias and class anchors on a tiny
    synthetic problem, for the landmark-only, SIR-only and all-terms routings.
    """
    w = config.stages[-1].weights if config is not None else LossWeights()
    model, ds = _tiny_problem(seed)
    rng = np.random.default_rng(seed)
    reg = LinearRegressor.init(len(ds.recog_samples[0].features), model.m_id, model.m_exp, rng, 0.3)
    K = ds.num_classes
    anchors = make_anchors(K, model.m_id, rng)
    centers = CenterTable(0.5 * model.shape_eigenvalues * rng.standard_normal((K, model.m_id)))
    batch = ds.recog_samples + ds.recon_samples

    report = {}
    for name, terms in [("landmark", ("landmark",)), ("sir", ("sir",)), ("all", TERMS)]:
        stage = StageConfig(name, 1, terms, w)

        def f(Wf, bf, Af):
            r = LinearRegressor(Wf, bf, reg.m_id, reg.m_exp)
            return batch_loss(r, model, batch, stage, centers, Af)[0]

        _, _, g = batch_loss(reg, model, batch, stage, centers, anchors, return_grad=True)
        params = [reg.weight, reg.bias, anchors]
        worst = 0.0
        for k, key in enumerate(("weight", "bias", "anchors")):
            num = np.zeros_like(params[k])
            for idx in np.ndindex(params[k].shape):
                plus = [p.copy() for p in params]
                minus = [p.copy() for p in params]
                plus[k][idx] += step
                minus[k][idx] -= step
                num[idx] = (f(*plus) - f(*minus)) / (2 * step)
            if np.any(num) or np.any(g[key]):
                worst = max(worst, relative_error(g[key], num))
        report[name] = worst
    return report
