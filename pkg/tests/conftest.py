import numpy as np
import pytest

from sirface.model import MorphableModel
from sirface.synthetic import SyntheticSpec, build_synthetic_model, generate_identities


def random_model(n=100, m_id=16, m_exp=4, seed=0, strict=True, n_landmarks=10):
    """Model with a random orthonormal shape basis and a flat strip topology."""
    rng = np.random.default_rng(seed)
    A, _ = np.linalg.qr(rng.standard_normal((3 * n, m_id)))
    B, _ = np.linalg.qr(rng.standard_normal((3 * n, m_exp)))
    faces = np.array([[i, i + 1, i + 2] for i in range(n - 2)])
    return MorphableModel(
        mean_shape=rng.standard_normal(3 * n),
        shape_basis=A,
        expr_basis=B,
        shape_eigenvalues=rng.uniform(0.5, 3.0, m_id),
        expr_eigenvalues=rng.uniform(0.5, 3.0, m_exp),
        topology=faces,
        landmark_indices=np.arange(n_landmarks),
        strict=strict,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_model():
    return random_model()


@pytest.fixture(scope="session")
def face_spec():
    return SyntheticSpec(n_vertices=100, m_id=6, m_exp=3, num_identities=5, samples_per_identity=8,
                         num_scans=20, num_expression_scans=10, num_recon=40, landmark_grid=4)


@pytest.fixture(scope="session")
def face_model(face_spec):
    return build_synthetic_model(face_spec)


@pytest.fixture(scope="session")
def face_data(face_model, face_spec):
    return generate_identities(face_model, face_spec)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        p, m = x.copy(), x.copy()
        p[idx] += h
        m[idx] -= h
        g[idx] = (f(p) - f(m)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
