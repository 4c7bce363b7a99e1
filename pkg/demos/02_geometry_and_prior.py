"""Parameter distance tracks geometry distance; the prior and KL terms."""
import numpy as np

from sirface import SyntheticSpec, build_synthetic_model
from sirface.geometry import (gaussian_prior_energy, kl_to_standard_normal, param_distance,
                              geometry_distance, verify_proportionality)
from sirface.model import synthesize

model = build_synthetic_model(SyntheticSpec())
rng = np.random.default_rng(1)
s = model.shape_eigenvalues

x, y = s * rng.standard_normal(model.m_id), s * rng.standard_normal(model.m_id)
r = verify_proportionality(model, x, y)
print(f"E = {r.E:.6g}, e = {r.e:.6g}, E n / (e m) = {r.ratio:.15f}")
# the ratio is the same for any pair, since the basis is orthonormal
for _ in range(3):
    x, y = s * rng.standard_normal(model.m_id), s * rng.standard_normal(model.m_id)
    X, Y = synthesize(model, x).vertices, synthesize(model, y).vertices
    print(f"  param {param_distance(x, y):10.4f}  geometry {geometry_distance(X, Y):10.4f}")

print("prior energy of a typical code:", round(gaussian_prior_energy(x, s), 3), "(about m/2 =", model.m_id / 2, ")")

batch = s * rng.standard_normal((256, model.m_id))
print("KL of a well-spread batch:", round(kl_to_standard_normal(batch, s), 4))
print("KL of a collapsed batch:  ", round(kl_to_standard_normal(0.1 * batch, s), 4))
