"""Acceptance criteria, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the
terminal output) or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from sirface import cli
from sirface.centers import CenterTable, update_centers
from sirface.evaluation import icp_align, make_pairs, verification_accuracy
from sirface.geometry import (gaussian_prior_energy, gaussian_prior_energy_grad, kl_to_standard_normal,
                              kl_to_standard_normal_grad, verify_proportionality)
from sirface.losses import (AvgPoolPyramid, LossWeights, albedo_regularizer, center_loss, cosface_loss,
                            landmark_loss, make_anchors, param_regularizer, perceptual_loss, pixel_loss,
                            sir_batch_loss)
from sirface.model import Mesh, MorphableModel, synthesize
from sirface.synthetic import SyntheticSpec, build_synthetic_model, generate_identities
from sirface.trainer import (LinearRegressor, MixedDataset, class_spread, desk_config, draw_batch,
                             sampling_probability, train)

sys.path.insert(0, str(Path(__file__).parent))
from conftest import numeric_grad, rel_err, random_model  # noqa: E402

def report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    print(line, flush=True)
    return ok


# ---------------------------------------------------------------- 1

def criterion_1():
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(100):
        model = random_model(n=100, m_id=16, seed=k)
        rng = np.random.default_rng(1000 + k)
        r = verify_proportionality(model, rng.standard_normal(16), rng.standard_normal(16))
        worst = max(worst, abs(r.ratio - 1))
    dt = time.perf_counter() - t0
    return report(1, worst <= 1e-9 and dt < 1.0,
                  f"proportionality max |E n/(e m) - 1| = {worst:.2e} (<= 1e-9) over 100 instances in {dt:.2f}s (< 1s)")


# ---------------------------------------------------------------- 2

def _gradient_cases(rng):
    """Each entry: (name, analytic gradient list, functions of each argument)."""
    w = LossWeights(eps_id=0.7, eps_exp=1.3, eps_uv=0.01, eps_c=0.3, eps_kl=0.7)
    model = random_model(n=20, m_id=5, m_exp=3, seed=int(rng.integers(1 << 30)))
    cases = []

    P, T = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    cases.append(("landmark", [landmark_loss(P, T, True)[1]], [(lambda x: landmark_loss(x, T), P)]))

    R, I = rng.uniform(0.05, 0.95, (4, 4, 3)), rng.uniform(0.05, 0.95, (4, 4, 3))
    S = rng.uniform(0.3, 2, (4, 4))
    g = pixel_loss(R, I, S, True)[1]
    cases.append(("pixel", [g["recon"], g["conf"]],
                  [(lambda x: pixel_loss(x, I, S), R), (lambda x: pixel_loss(R, I, x), S)]))

    enc = AvgPoolPyramid((1, 2))
    confs = [rng.uniform(0.3, 2, (4, 4)), rng.uniform(0.3, 2, (2, 2))]
    g = perceptual_loss(R, I, enc, confs, True)[1]
    cases.append(("perceptual", [g["recon"], g["confs"][0], g["confs"][1]],
                  [(lambda x: perceptual_loss(x, I, enc, confs), R),
                   (lambda x: perceptual_loss(R, I, enc, [x, confs[1]]), confs[0]),
                   (lambda x: perceptual_loss(R, I, enc, [confs[0], x]), confs[1])]))

    a, b = rng.standard_normal(5), rng.standard_normal(3)
    g = param_regularizer(a, b, model, w, True)[1]
    cases.append(("param_regularizer", [g["shape"], g["expr"]],
                  [(lambda x: param_regularizer(x, b, model, w), a),
                   (lambda x: param_regularizer(a, x, model, w), b)]))

    A = rng.uniform(0, 1, (3, 4, 3))
    cases.append(("albedo_regularizer", [albedo_regularizer(A, w, True)[1]],
                  [(lambda x: albedo_regularizer(x, w), A)]))

    W = make_anchors(4, 5, rng)
    y = int(rng.integers(4))
    g = cosface_loss(a, y, W, 8.0, 0.35, True)[1]
    cases.append(("cosface", [g["shape"], g["anchors"]],
                  [(lambda x: cosface_loss(x, y, W, 8.0, 0.35), a),
                   (lambda x: cosface_loss(a, y, x, 8.0, 0.35), W)]))

    C = rng.standard_normal((4, 5))
    cases.append(("center", [center_loss(a, y, C, True)[1]], [(lambda x: center_loss(x, y, C), a)]))

    s = model.shape_eigenvalues
    cases.append(("gaussian_prior", [gaussian_prior_energy_grad(a, s)],
                  [(lambda x: gaussian_prior_energy(x, s), a)]))

    X = rng.standard_normal((6, 5)) * s
    cases.append(("kl", [kl_to_standard_normal_grad(X, s)], [(lambda x: kl_to_standard_normal(x, s), X)]))

    labels = rng.integers(0, 4, 6)
    ws = w.replace(cosface_scale=8.0)
    g = sir_batch_loss(X, labels, C, W, s, ws, True)[1]
    cases.append(("sir", [g["codes"], g["anchors"]],
                  [(lambda x: sir_batch_loss(x, labels, C, W, s, ws), X),
                   (lambda x: sir_batch_loss(X, labels, C, x, s, ws), W)]))
    return cases


def criterion_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = {}
    for _ in range(50):
        for name, grads, fns in _gradient_cases(rng):
            for g, (f, x) in zip(grads, fns):
                worst[name] = max(worst.get(name, 0.0), rel_err(g, numeric_grad(f, x, 1e-5)))
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(v <= 1e-4 for v in worst.values()) and dt < 30
    return report(2, ok, f"finite differences on {len(worst)} losses x 50 instances: max rel err "
                         f"{worst[top]:.2e} ({top}) (<= 1e-4) in {dt:.1f}s (< 30s)")


# ---------------------------------------------------------------- 3

def criterion_3():
    rng = np.random.default_rng(3)
    W = make_anchors(6, 8, rng)
    dev = 0.0
    for _ in range(20):
        a, y = rng.standard_normal(8), int(rng.integers(6))
        base = cosface_loss(a, y, W)
        for c in (0.1, 10.0):
            dev = max(dev, abs(cosface_loss(c * a, y, W) - base))
    Z = rng.standard_normal((64, 8))
    Z = (Z - Z.mean(0)) / Z.std(0)
    s = rng.uniform(0.5, 2, 8)
    kl1, kl01 = kl_to_standard_normal(Z * s, s), kl_to_standard_normal(0.1 * Z * s, s)
    ok = dev <= 1e-9 and kl01 > kl1
    return report(3, ok, f"cosface scale deviation {dev:.1e} (<= 1e-9); KL(0.1 batch) = {kl01:.3f} > "
                         f"KL(unit batch) = {kl1:.1e}")


# ---------------------------------------------------------------- 4

def criterion_4():
    rng = np.random.default_rng(4)
    c, x, lr = rng.standard_normal(5), rng.standard_normal(5), 0.5
    table = CenterTable(c[None, :], learning_rate=lr)
    new = update_centers(table, [(x, 0, 1.0)])
    hand = c - lr * (c - x) / 2
    err_hand = float(np.max(np.abs(new.centers[0] - hand)))
    zero = update_centers(table, [(x, 0, 0.0)])
    untouched = zero.centers[0].tobytes() == table.centers[0].tobytes()
    gap0 = np.linalg.norm(c - x)
    err_conv = 0.0
    t = table
    for k in range(1, 21):
        t = update_centers(t, [(x, 0, 1.0)])
        expected = gap0 * (1 - lr / 2) ** k
        err_conv = max(err_conv, abs(np.linalg.norm(t.centers[0] - x) - expected) / expected)
    ok = err_hand <= 1e-12 and untouched and err_conv <= 1e-9
    return report(4, ok, f"f=1 step vs hand delta {err_hand:.1e} (<= 1e-12); f=0 center bit-identical: "
                         f"{untouched}; factor (1 - lr/2) over 20 steps rel err {err_conv:.1e} (<= 1e-9)")


# ---------------------------------------------------------------- 5 and 6

_desk = {}


def desk_runs():
    """SIR and no-SIR runs on the default synthetic identities (shared by criteria 5 and 6)."""
    if not _desk:
        t0 = time.perf_counter()
        spec = SyntheticSpec()
        model = build_synthetic_model(spec)
        data = generate_identities(model, spec)
        mixed = MixedDataset.from_synthetic(data)
        test = data.indices("test")
        out = {}
        for name, sir in (("sir", True), ("ablation", False)):
            res = train(mixed, desk_config(sir=sir, seed=spec.seed), model)
            codes, _ = res.regressor.predict_codes(model, data.features[test])
            labels = data.labels[test]
            pairs = make_pairs(codes, labels, np.random.default_rng(spec.seed))
            out[name] = dict(result=res, accuracy=verification_accuracy(pairs).accuracy,
                             spread=class_spread(codes, labels))
        out["seconds"] = time.perf_counter() - t0
        out["spec"] = spec
        _desk.update(out)
    return _desk


def criterion_5():
    d = desk_runs()
    acc = d["sir"]["accuracy"]
    r_sir, r_abl = d["sir"]["spread"][2], d["ablation"]["spread"][2]
    ok = acc >= 0.95 and r_sir > r_abl and d["seconds"] < 120
    spec = d["spec"]
    return report(5, ok, f"{spec.num_identities} identities x {spec.samples_per_identity} samples: held-out "
                         f"accuracy {acc:.3f} (>= 0.95); inter/intra ratio SIR {r_sir:.2f} > no-SIR {r_abl:.2f} "
                         f"(no-SIR accuracy {d['ablation']['accuracy']:.3f}); both runs {d['seconds']:.1f}s (< 120s)")


def criterion_6():
    d = desk_runs()
    v = d["sir"]["result"].history[-1]["norm_sq"]
    return report(6, 0.5 <= v <= 2.0, f"final-epoch mean ||alpha/sigma||^2 / m_id = {v:.3f} in [0.5, 2.0]")


# ---------------------------------------------------------------- 7

def criterion_7():
    rng = np.random.default_rng(7)
    model = build_synthetic_model(SyntheticSpec())
    mesh = synthesize(model, model.shape_eigenvalues * rng.standard_normal(model.m_id))
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    th = math.radians(20)
    R = np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * K @ K
    t = rng.normal(0, 50, 3)
    target = Mesh(2.0 * mesh.vertices @ R.T + t, mesh.faces)
    res = icp_align(mesh, target)
    monotone = all(b <= a for a, b in zip(res.history, res.history[1:]))
    ok = res.rmse_point_to_plane <= 1e-6 and monotone
    return report(7, ok, f"ICP on scale 2, 20 deg, random translation: point-to-plane RMSE "
                         f"{res.rmse_point_to_plane:.1e} (<= 1e-6), scale {res.scale:.9f}, "
                         f"{res.iterations} iterations, history monotone: {monotone}")


# ---------------------------------------------------------------- 8

def criterion_8():
    n_recog, n_recon = 3_310_000, 61_255
    ds = MixedDataset([None] * n_recon, [None] * n_recog)
    P = sampling_probability(ds)
    err = abs(P - n_recon / (n_recog + n_recon))
    small = MixedDataset(list(range(10)), list(range(10, 20)))
    n = 100_000
    draws = draw_batch(small, P, np.random.default_rng(8), n)
    k = sum(x >= 10 for x in draws)
    z = abs(k - n * P) / math.sqrt(n * P * (1 - P))
    ok = err <= 1e-9 and abs(P - 0.018170) < 5e-7 and z <= 3
    return report(8, ok, f"P = {P:.9f} (formula error {err:.1e}); {k} recognition draws of {n}, "
                         f"|z| = {z:.2f} (<= 3)")


# ---------------------------------------------------------------- 9

def criterion_9():
    rng = np.random.default_rng(9)
    K, S = 20, 10
    centers = rng.normal(0, 3, (K, 8))
    codes = np.repeat(centers, S, axis=0) + rng.normal(0, 0.05, (K * S, 8))
    labels = np.repeat(np.arange(K), S)
    sep = verification_accuracy(make_pairs(codes, labels, rng)).accuracy
    shuffled = make_pairs(codes, rng.permutation(labels), rng)
    chance = verification_accuracy(shuffled).accuracy
    sigma = math.sqrt(0.25 / len(shuffled))
    pairs = make_pairs(rng.standard_normal((60, 4)), np.repeat(np.arange(12), 5), rng)
    base = verification_accuracy(pairs).accuracy
    invariant = all(
        verification_accuracy([type(p)(c * p.code_a, c * p.code_b, p.same_identity) for p in pairs]).accuracy == base
        for c in (1e-3, 0.5, 7.0, 1e4))
    ok = sep == 1.0 and abs(chance - 0.5) <= 3 * sigma and invariant
    return report(9, ok, f"separable accuracy {sep:.3f} (= 1); shuffled {chance:.3f} within 0.5 +/- "
                         f"{3 * sigma:.3f}; euclidean accuracy scale-invariant: {invariant}")


# ---------------------------------------------------------------- 10

def criterion_10(tmp):
    tmp = Path(tmp)
    digests = []
    for run in ("a", "b"):
        d = tmp / run
        cli.main(["gen", "--out", str(d / "gen"), "--seed", "3"])
        cli.main(["train", "--data", str(d / "gen"), "--out", str(d / "train")])
        digests.append({p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    same = digests[0] == digests[1] and len(digests[0]) >= 9
    return report(10, same, f"gen + train twice with seed 3: {len(digests[0])} files byte-identical: {same}")


# ---------------------------------------------------------------- pytest entry points

def test_criterion_1_proportionality(capsys):
    with capsys.disabled():
        ok = criterion_1()
    assert ok


def test_criterion_2_gradient_oracle(capsys):
    with capsys.disabled():
        ok = criterion_2()
    assert ok


def test_criterion_3_cosface_scale_and_kl(capsys):
    with capsys.disabled():
        ok = criterion_3()
    assert ok


def test_criterion_4_weighted_centers(capsys):
    with capsys.disabled():
        ok = criterion_4()
    assert ok


def test_criterion_5_end_to_end_sir(capsys):
    with capsys.disabled():
        ok = criterion_5()
    assert ok


def test_criterion_6_distribution_condition(capsys):
    with capsys.disabled():
        ok = criterion_6()
    assert ok


def test_criterion_7_icp_with_scale(capsys):
    with capsys.disabled():
        ok = criterion_7()
    assert ok


def test_criterion_8_sampler(capsys):
    with capsys.disabled():
        ok = criterion_8()
    assert ok


def test_criterion_9_verification(capsys):
    with capsys.disabled():
        ok = criterion_9()
    assert ok


def test_criterion_10_determinism(tmp_path, capsys):
    with capsys.disabled():
        ok = criterion_10(tmp_path)
    assert ok


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        results = [criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(),
                   criterion_6(), criterion_7(), criterion_8(), criterion_9(), criterion_10(tmp)]
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
