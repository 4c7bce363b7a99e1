"""Build a small morphable model, synthesize a face and project its landmarks."""
import numpy as np

from sirface import SyntheticSpec, build_synthetic_model, synthesize, project_landmarks
from sirface.model import Pose, extract_euler

spec = SyntheticSpec()
model = build_synthetic_model(spec)
print(f"{model.n_vertices} vertices, {model.m_id} identity and {model.m_exp} expression components")

rng = np.random.default_rng(0)
alpha = model.shape_eigenvalues * rng.standard_normal(model.m_id)
beta = 0.5 * model.expr_eigenvalues * rng.standard_normal(model.m_exp)
mesh = synthesize(model, alpha, beta)
print("mesh extent per axis:", np.ptp(mesh.vertices, axis=0).round(2))

# yaw 15 deg, slight pitch; t3d only matters for camera-space coordinates
pose = Pose.from_euler(np.radians(15), np.radians(-5), 0.0, translation2d=(120.0, 96.0), focal=1.5)
uv = project_landmarks(model, alpha, beta, pose)
print("first landmarks in image coordinates:\n", uv[:4].round(2))
print("recovered euler angles (deg):", np.degrees(extract_euler(pose)).round(6))
