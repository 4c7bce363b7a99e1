"""Training losses with analytic gradients.

Every loss takes plain numpy arrays.  Functions that support it accept
``return_grad=True`` and then return ``(value, grad)`` or
``(value, dict_of_grads)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .geometry import kl_to_standard_normal, kl_to_standard_normal_grad

SQRT2 = math.sqrt(2.0)
LOG_SQRT2 = 0.5 * math.log(2.0)
LOG_SQRT2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    """Loss weights.  The defaults are working values, none come from published numbers."""

    eps_l: float = 1.0
    eps_s: float = 1.0
    eps_reg: float = 1e-3
    eps_rega: float = 1.0
    eps_id: float = 1.0
    eps_exp: float = 1.0
    eps_uv: float = 1e-4
    eps_kl: float = 1.0
    eps_c: float = 1.0
    cosface_scale: float = 30.0
    cosface_margin: float = 0.35

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
            if f.name.startswith("eps_") and v < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.cosface_scale <= 0:
            raise ValueError("cosface_scale must be positive")
        if not 0 <= self.cosface_margin < 1:
            raise ValueError("cosface_margin must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss weight(s): {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(load_config_file(path))

    def replace(self, **changes):
        return type(self)(**{**asdict(self), **changes})

    def to_dict(self):
        return asdict(self)


def load_config_file(path):
    """Read a JSON or TOML mapping, chosen by file extension."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    return json.loads(path.read_text())


def _image(x, what):
    a = np.asarray(x, dtype=float)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"{what} must be H x W or H x W x C with C in (1, 3)")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} has non-finite values")
    return a


def _confidence(x, shape, what="confidence map"):
    s = np.asarray(x, dtype=float)
    if s.shape != shape:
        raise ValueError(f"{what} shape {s.shape} does not match {shape}")
    if not np.all(s > 0):
        raise ValueError(f"{what} must be strictly positive")
    return s


# ---------------------------------------------------------------- landmarks

def landmark_loss(pred, truth, return_grad=False):
    """``(1/N) * sqrt(sum ||v - v_hat||^2)`` over N landmarks.

    The gradient at zero distance is taken as zero.
    """
    P = np.asarray(pred, dtype=float).reshape(-1, 2)
    T = np.asarray(truth, dtype=float).reshape(-1, 2)
    if P.shape != T.shape:
        raise ValueError(f"landmark counts differ: {len(P)} vs {len(T)}")
    N = len(P)
    D = P - T
    norm = math.sqrt(float(np.sum(D * D)))
    value = norm / N
    if not return_grad:
        return value
    grad = np.zeros_like(P) if norm == 0.0 else D / (N * norm)
    return value, grad


# ------------------------------------------------------------- photometric

def pixel_loss(recon, input, conf, return_grad=False):
    """Laplacian negative log-likelihood of the per-pixel L1 error.

    ``mean_uv[ ln(sqrt(2) sigma) + sqrt(2) l1 / sigma ]`` where ``l1`` is the
    absolute difference averaged over channels.  Gradients are returned for
    ``recon`` and ``conf``.
    """
    R = _image(recon, "recon")
    I = _image(input, "input")
    if R.shape != I.shape:
        raise ValueError(f"image shapes differ: {R.shape} vs {I.shape}")
    S = _confidence(conf, R.shape[:2])
    diff = R - I
    l1 = np.abs(diff).mean(axis=2)
    omega = l1.size
    value = float(np.sum(np.log(SQRT2 * S) + SQRT2 * l1 / S)) / omega
    if not return_grad:
        return value
    C = R.shape[2]
    g_recon = (SQRT2 / S)[..., None] * np.sign(diff) / (C * omega)
    g_conf = (1.0 / S - SQRT2 * l1 / S**2) / omega
    return value, {"recon": g_recon.reshape(np.shape(recon)), "conf": g_conf}


class AvgPoolPyramid:
    """Deterministic feature encoder: one average-pooled copy of the image per factor.

    Factor 1 is the identity.  Image height and width must be divisible by
    every factor.  Implements ``vjp`` so perceptual gradients reach the image.
    """

    def __init__(self, factors=(1, 2)):
        self.factors = tuple(int(f) for f in factors)
        if not self.factors or min(self.factors) < 1:
            raise ValueError("pool factors must be positive integers")

    def layer_shapes(self, image_shape):
        H, W = image_shape[:2]
        C = image_shape[2] if len(image_shape) == 3 else 1
        for f in self.factors:
            if H % f or W % f:
                raise ValueError(f"image {H}x{W} not divisible by pool factor {f}")
        return [(H // f, W // f, C) for f in self.factors]

    def __call__(self, image):
        X = _image(image, "image")
        self.layer_shapes(X.shape)
        H, W, C = X.shape
        return [X.reshape(H // f, f, W // f, f, C).mean(axis=(1, 3)) for f in self.factors]

    def vjp(self, image, cotangents):
        X = _image(image, "image")
        out = np.zeros_like(X)
        for f, g in zip(self.factors, cotangents):
            out += np.repeat(np.repeat(g, f, axis=0), f, axis=1) / (f * f)
        return out


def perceptual_loss(recon, input, encoder, confs, return_grad=False):
    """Gaussian negative log-likelihood of feature-space errors, summed over layers.

    Per layer: ``mean_uv[ ln(sqrt(2 pi) sigma) + l^2 / (2 sigma^2) ]`` with ``l``
    the absolute feature difference averaged over channels.  The recon
    gradient requires the encoder to provide ``vjp``.
    """
    R = _image(recon, "recon")
    I = _image(input, "input")
    if R.shape != I.shape:
        raise ValueError(f"image shapes differ: {R.shape} vs {I.shape}")
    fr, fi = encoder(R), encoder(I)
    if len(confs) != len(fr):
        raise ValueError(f"encoder yields {len(fr)} layers but {len(confs)} confidence maps given")
    value = 0.0
    g_feats, g_confs = [], []
    for er, ei, sk in zip(fr, fi, confs):
        S = _confidence(sk, er.shape[:2], "perceptual confidence map")
        diff = er - ei
        ell = np.abs(diff).mean(axis=2)
        omega = ell.size
        value += float(np.sum(LOG_SQRT2PI + np.log(S) + ell**2 / (2 * S**2))) / omega
        if return_grad:
            g_feats.append((ell / (S**2 * omega))[..., None] * np.sign(diff) / er.shape[2])
            g_confs.append((1.0 / S - ell**2 / S**3) / omega)
    if not return_grad:
        return value
    g_recon = encoder.vjp(R, g_feats).reshape(np.shape(recon))
    return value, {"recon": g_recon, "confs": g_confs}


# ---------------------------------------------------------- regularisers

def _eigenvalues(model):
    return np.asarray(model.shape_eigenvalues), np.asarray(model.expr_eigenvalues)


def param_regularizer(shape, expr, model, w=LossWeights(), return_grad=False):
    """``eps_id ||a_id / s_id||^2 + eps_exp ||a_exp / s_exp||^2``."""
    s_id, s_exp = _eigenvalues(model)
    a = np.asarray(shape, dtype=float)
    b = np.asarray(expr, dtype=float)
    if a.shape != s_id.shape or b.shape != s_exp.shape:
        raise ValueError("code lengths do not match the model eigenvalues")
    za, zb = a / s_id, b / s_exp
    value = w.eps_id * float(za @ za) + w.eps_exp * float(zb @ zb)
    if not return_grad:
        return value
    return value, {"shape": 2 * w.eps_id * za / s_id, "expr": 2 * w.eps_exp * zb / s_exp}


def _neighbour_sum(A):
    """Sum and count of the 4-neighbours of every pixel (borders use fewer)."""
    H, W = A.shape[:2]
    total = np.zeros_like(A)
    count = np.zeros((H, W))
    total[1:] += A[:-1]
    count[1:] += 1
    total[:-1] += A[1:]
    count[:-1] += 1
    total[:, 1:] += A[:, :-1]
    count[:, 1:] += 1
    total[:, :-1] += A[:, 1:]
    count[:, :-1] += 1
    return total, count


def albedo_regularizer(uv, w=LossWeights(), return_grad=False):
    """Smoothness plus magnitude penalty on a UV albedo map.

    ``sum_i ||A_i - mean_{j in N(i)} A_j||_2 + eps_uv ||A||^2`` with N(i) the
    in-bounds 4-neighbourhood.  The grid must hold at least two pixels.
    """
    A = np.asarray(uv, dtype=float)
    if A.ndim == 2:
        A = A[..., None]
    if A.ndim != 3 or A.shape[0] * A.shape[1] < 2:
        raise ValueError("albedo grid must be H x W x C with at least two pixels")
    if not np.all(np.isfinite(A)):
        raise ValueError("albedo grid has non-finite values")
    total, count = _neighbour_sum(A)
    resid = A - total / count[..., None]
    norms = np.sqrt(np.sum(resid * resid, axis=2))
    value = float(norms.sum()) + w.eps_uv * float(np.sum(A * A))
    if not return_grad:
        return value
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(norms[..., None] > 0, resid / norms[..., None], 0.0)
    # transpose of resid = A - D^-1 Adj A
    back, _ = _neighbour_sum(u / count[..., None])
    grad = u - back + 2 * w.eps_uv * A
    return value, grad.reshape(np.shape(uv))


# ---------------------------------------------------------- identity terms

def make_anchors(num_classes, dim, rng):
    """Random unit-norm class weight vectors, one row per class."""
    W = rng.standard_normal((num_classes, dim))
    return W / np.linalg.norm(W, axis=1, keepdims=True)


def check_anchors(anchors, tol=1e-9):
    W = np.asarray(anchors, dtype=float)
    if W.ndim != 2 or not np.all(np.abs(np.linalg.norm(W, axis=1) - 1) <= tol):
        raise ValueError("class anchors must be a matrix of unit-norm rows")
    return W


def cosface_loss(shape, label, anchors, scale=30.0, margin=0.35, return_grad=False):
    """Large-margin cosine loss of a code against per-class anchors.

    ``cos_j`` is the cosine between the code and anchor ``j``.  The loss is the
    softmax cross-entropy of ``scale * (cos_j - margin * [j == label])``.
    Gradients are returned for ``shape`` and ``anchors``.
    """
    a = np.asarray(shape, dtype=float).ravel()
    W = np.asarray(anchors, dtype=float)
    if W.ndim != 2 or W.shape[1] != a.size:
        raise ValueError("anchors must be (num_classes, code length)")
    if not 0 <= label < W.shape[0]:
        raise ValueError(f"label {label} outside 0..{W.shape[0] - 1}")
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        raise ValueError("cosine loss is undefined for a zero-norm code")
    u = a / norm
    cos = W @ u
    logits = scale * cos
    logits[label] -= scale * margin
    shift = logits.max()
    ex = np.exp(logits - shift)
    lse = shift + math.log(ex.sum())
    value = float(lse - logits[label])
    if not return_grad:
        return value
    p = ex / ex.sum()
    p[label] -= 1.0
    g_cos = scale * p
    g_u = W.T @ g_cos
    g_shape = (g_u - u * (u @ g_u)) / norm
    return value, {"shape": g_shape, "anchors": np.outer(g_cos, u)}


def _centers_array(centers):
    return np.asarray(getattr(centers, "centers", centers), dtype=float)


def center_loss(shape, label, centers, return_grad=False):
    """``0.5 * ||alpha - c_label||^2``."""
    c = _centers_array(centers)[label]
    d = np.asarray(shape, dtype=float) - c
    value = 0.5 * float(d @ d)
    if return_grad:
        return value, d
    return value


def sir_loss(shape, label, centers, anchors, eigenvalues, batch, w=LossWeights()):
    """Identity-aware regularisation of one code within its batch.

    ``L_cos + eps_c * L_center + eps_kl * KL(batch)``.  The KL term is shared by
    every sample of the batch.
    """
    value = cosface_loss(shape, label, anchors, w.cosface_scale, w.cosface_margin)
    value += w.eps_c * center_loss(shape, label, centers)
    if w.eps_kl:
        value += w.eps_kl * kl_to_standard_normal(batch, eigenvalues)
    return value


def sir_batch_loss(codes, labels, centers, anchors, eigenvalues, w=LossWeights(), return_grad=False):
    """Mean of ``sir_loss`` over a batch, with gradients for every code and the anchors.

    Equals ``mean_i [L_cos_i + eps_c L_center_i] + eps_kl * KL(codes)``.
    """
    X = np.asarray(codes, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(X)
    C = _centers_array(centers)
    value = 0.0
    g_codes = np.zeros_like(X)
    g_anchors = np.zeros_like(np.asarray(anchors, dtype=float))
    for i in range(n):
        v, g = cosface_loss(X[i], labels[i], anchors, w.cosface_scale, w.cosface_margin, True)
        d = X[i] - C[labels[i]]
        value += v + w.eps_c * 0.5 * float(d @ d)
        g_codes[i] = g["shape"] + w.eps_c * d
        g_anchors += g["anchors"]
    value /= n
    g_codes /= n
    g_anchors /= n
    if w.eps_kl:
        value += w.eps_kl * kl_to_standard_normal(X, eigenvalues)
        g_codes += w.eps_kl * kl_to_standard_normal_grad(X, eigenvalues)
    if return_grad:
        return value, {"codes": g_codes, "anchors": g_anchors}
    return value


# ------------------------------------------------------------- routing

@dataclass
class Outputs:
    """Everything a network-like predictor produced for one sample.

    Only ``shape`` and ``expr`` are required; photometric and albedo terms are
    skipped when their inputs are absent.
    """

    shape: np.ndarray
    expr: np.ndarray
    landmarks: np.ndarray | None = None
    recon_image: np.ndarray | None = None
    input_image: np.ndarray | None = None
    confidence: np.ndarray | None = None
    encoder: object = None
    perceptual_confs: list | None = None
    albedo_uv: np.ndarray | None = None


@dataclass
class SIRContext:
    centers: object
    anchors: np.ndarray
    eigenvalues: np.ndarray
    batch: np.ndarray


def sample_kind(sample):
    """``"recon"`` for landmark-labelled samples, ``"identity"`` for identity-labelled ones."""
    has_lm = getattr(sample, "landmarks", None) is not None
    has_id = getattr(sample, "label", None) is not None
    if has_lm == has_id:
        raise ValueError("sample must carry exactly one of a landmark target or an identity label")
    return "recon" if has_lm else "identity"


def loss_terms(sample, outputs, w=LossWeights(), *, model, sir=None, pix_on_identity=True):
    """Per-term breakdown of the routed loss for one sample.

    Reconstruction samples get ``eps_l * L_land + L_pix``; identity samples get
    ``eps_s * L_SIR + L_pix`` (``L_pix`` dropped when ``pix_on_identity`` is
    False).  ``L_pix = L_recon + eps_reg * (L_regp + eps_rega * L_rega)``.
    """
    kind = sample_kind(sample)
    terms = {}
    if kind == "recon":
        if outputs.landmarks is None:
            raise ValueError("reconstruction sample needs predicted landmarks")
        terms["landmark"] = w.eps_l * landmark_loss(outputs.landmarks, sample.landmarks)
    else:
        if sir is None:
            raise ValueError("identity sample needs an SIRContext")
        terms["sir"] = w.eps_s * sir_loss(
            outputs.shape, sample.label, sir.centers, sir.anchors, sir.eigenvalues, sir.batch, w)

    if kind == "recon" or pix_on_identity:
        o = outputs
        if o.recon_image is not None:
            terms["pixel"] = pixel_loss(o.recon_image, o.input_image, o.confidence)
            if o.encoder is not None:
                terms["perceptual"] = perceptual_loss(
                    o.recon_image, o.input_image, o.encoder, o.perceptual_confs)
        reg = param_regularizer(o.shape, o.expr, model, w)
        if o.albedo_uv is not None:
            reg += w.eps_rega * albedo_regularizer(o.albedo_uv, w)
        terms["reg"] = w.eps_reg * reg
    return terms


def total_loss(sample, outputs, w=LossWeights(), *, model, sir=None, pix_on_identity=True):
    terms = loss_terms(sample, outputs, w, model=model, sir=sir, pix_on_identity=pix_on_identity)
    return float(sum(terms.values()))
