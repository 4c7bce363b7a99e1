"""Align a scaled, rotated copy of a face with ICP and report point-to-plane error."""
import numpy as np

from sirface import SyntheticSpec, build_synthetic_model, synthesize
from sirface.evaluation import ced_curve, icp_align
from sirface.model import Mesh, euler_to_matrix

model = build_synthetic_model(SyntheticSpec())
rng = np.random.default_rng(3)
mesh = synthesize(model, model.shape_eigenvalues * rng.standard_normal(model.m_id))

R = euler_to_matrix(np.radians(20), np.radians(10), np.radians(-5))
noisy = 1.5 * mesh.vertices @ R.T + np.array([5.0, -3.0, 40.0])
noisy = noisy + rng.normal(0, 0.2, noisy.shape)
res = icp_align(mesh, Mesh(noisy, mesh.faces))
print(f"scale {res.scale:.4f}, {res.iterations} iterations, RMSE {res.rmse_point_to_plane:.4f}")

ced = ced_curve(res.errors)
for x in (0.1, 0.2, 0.4):
    print(f"fraction of vertices within {x}: {ced.fraction_below(x):.3f}")
