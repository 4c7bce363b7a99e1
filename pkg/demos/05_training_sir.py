"""Two-stage training with and without the identity terms on synthetic faces."""
import numpy as np

from sirface import SyntheticSpec, build_synthetic_model, generate_identities
from sirface.evaluation import make_pairs, verification_accuracy
from sirface.trainer import MixedDataset, class_spread, desk_config, sampling_probability, train

spec = SyntheticSpec()
model = build_synthetic_model(spec)
data = generate_identities(model, spec)
mixed = MixedDataset.from_synthetic(data)
print(f"recognition draw probability: {sampling_probability(mixed):.4f}")

test = data.indices("test")
for sir in (True, False):
    res = train(mixed, desk_config(sir=sir, seed=spec.seed), model)
    codes, _ = res.regressor.predict_codes(model, data.features[test])
    intra, inter, ratio = class_spread(codes, data.labels[test])
    acc = verification_accuracy(make_pairs(codes, data.labels[test], np.random.default_rng(0))).accuracy
    last = res.history[-1]
    print(f"sir={sir!s:5}  accuracy {acc:.3f}  inter/intra {ratio:.2f}  norm_sq {last['norm_sq']:.3f}")
