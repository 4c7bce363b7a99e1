"""Command-line entry point: ``sirface {gen,train,encode,verify,rmse,check}``.

Exit codes: 0 success, 1 usage/config/input error or failed check,
2 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import evaluation, geometry
from .losses import load_config_file
from .model import load_model, model_to_dict, synthesize
from .objio import format_obj, read_obj
from .synthetic import (SyntheticSpec, build_synthetic_model, dataset_meta, dataset_to_csv,
                        generate_identities, load_dataset)
from .trainer import (DivergenceError, LinearRegressor, MixedDataset, TrainConfig, config_to_dict,
                      desk_config, gradient_check, history_to_csv, train)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2


class UsageError(Exception):
    pass


def atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out_dir(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {p}: {exc}") from None
    if not os.access(p, os.W_OK):
        raise UsageError(f"output directory {p} is not writable")
    return p


def _in_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


# ------------------------------------------------------------- codes files

def codes_to_csv(ids, codes):
    """Vector container: header ``id,c0,c1,...`` then one record per id."""
    codes = np.atleast_2d(np.asarray(codes, dtype=float))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id"] + [f"c{i}" for i in range(codes.shape[1])])
    for i, c in zip(ids, codes.tolist()):
        w.writerow([i] + [repr(x) for x in c])
    return buf.getvalue()


def read_codes(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["id"]:
        raise UsageError(f"{path}: expected a header starting with 'id'")
    return {r[0]: np.array([float(x) for x in r[1:]]) for r in rows[1:] if r}


def read_pairs(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0][:3]] != ["id_a", "id_b", "same"]:
        raise UsageError(f"{path}: expected header 'id_a,id_b,same'")
    out = []
    for r in rows[1:]:
        if r:
            out.append((r[0], r[1], r[2].strip().lower() in ("1", "true", "yes")))
    return out


def pairs_to_csv(pairs):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id_a", "id_b", "same"])
    for a, b, s in pairs:
        w.writerow([a, b, int(s)])
    return buf.getvalue()


def regressor_to_json(reg):
    return _dump_json({"format": "sirface-regressor", "m_id": reg.m_id, "m_exp": reg.m_exp,
                       "weight": reg.weight.tolist(), "bias": reg.bias.tolist()})


def load_regressor(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "sirface-regressor":
        raise UsageError(f"{path}: not a regressor file")
    return LinearRegressor(np.array(doc["weight"]), np.array(doc["bias"]), doc["m_id"], doc["m_exp"])


# ------------------------------------------------------------- commands

def _spec_from_args(a):
    fields = dict(n_vertices=a.n_vertices, m_id=a.m_id, m_exp=a.m_exp, num_identities=a.identities,
                  samples_per_identity=a.samples, noise_scale=a.noise, seed=a.seed,
                  num_scans=a.num_scans, num_recon=a.num_recon)
    return SyntheticSpec(**{k: v for k, v in fields.items() if v is not None})


def generate_files(spec):
    """In-memory contents of every file ``gen`` writes, keyed by file name."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = build_synthetic_model(spec)
    ds = generate_identities(model, spec)
    files = {
        "model.json": json.dumps(model_to_dict(model), separators=(",", ":")) + "\n",
        "dataset.csv": dataset_to_csv(ds),
        "dataset.meta.json": json.dumps(dataset_meta(ds), separators=(",", ":")) + "\n",
        "mean.obj": format_obj(synthesize(model, model.zero_shape())),
    }
    return model, ds, files, [str(w.message) for w in caught]


def cmd_gen(a):
    out = _out_dir(a.out)
    try:
        spec = _spec_from_args(a)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model, ds, files, notes = generate_files(spec)
    for name, text in files.items():
        atomic_write(out / name, text)
    print(f"n={model.n_vertices} m_id={model.m_id} m_exp={model.m_exp} identities={spec.num_identities} "
          f"samples={len(ds)} landmarks={model.n_landmarks}")
    if model.meta.get("rank_deficient"):
        print(f"reduced model: requested m_id={model.meta['requested_m_id']}, got {model.m_id}")
    for n in notes:
        print(f"note: {n}")
    return EXIT_OK


def _load_data(data_dir):
    d = Path(data_dir)
    model = load_model(_in_file(d / "model.json", "model file"))
    ds = load_dataset(_in_file(d / "dataset.csv", "dataset"), _in_file(d / "dataset.meta.json", "dataset metadata"))
    return model, ds


def train_files(raw_config, model, sd):
    """Train and return ``(exit_code, files)`` with every output as text."""
    config = TrainConfig.from_dict(raw_config)
    mixed = MixedDataset.from_synthetic(sd)
    files = {}
    try:
        res = train(mixed, config, model)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED, files
    files["regressor.json"] = regressor_to_json(res.regressor)
    files["centers.csv"] = codes_to_csv(range(res.centers.num_classes), res.centers.centers)
    files["anchors.csv"] = codes_to_csv(range(len(res.anchors)), res.anchors)
    files["metrics.csv"] = history_to_csv(res.history)
    files["config.json"] = _dump_json(config_to_dict(config))
    return EXIT_OK, files


def cmd_train(a):
    out = _out_dir(a.out)
    if a.config:
        try:
            raw = load_config_file(_in_file(a.config, "config"))
        except (ValueError, OSError) as exc:
            raise UsageError(f"{a.config}: {exc}") from None
    else:
        raw = config_to_dict(desk_config())
    if a.data:
        model, sd = _load_data(a.data)
    else:
        try:
            spec = SyntheticSpec.from_dict(raw.get("synthetic", {}))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"synthetic: {exc}") from None
        model = build_synthetic_model(spec)
        sd = generate_identities(model, spec)
    try:
        code, files = train_files(raw, model, sd)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from None
    for name, text in files.items():
        atomic_write(out / name, text)
    if code == EXIT_OK:
        last = files["metrics.csv"].splitlines()[-1]
        print(f"trained; final metrics: {last}")
    return code


def cmd_encode(a):
    out = _out_dir(a.out)
    model, sd = _load_data(a.data)
    reg = load_regressor(_in_file(a.regressor, "regressor"))
    idx = sd.indices(a.split)
    if idx.size == 0:
        raise UsageError(f"split {a.split!r} has no samples")
    codes, _ = reg.predict_codes(model, sd.features[idx])
    ids = [f"s{i}" for i in idx]
    rng = np.random.default_rng(a.seed)
    labels = sd.labels[idx]
    iu, ju = np.triu_indices(len(idx), 1)
    same = labels[iu] == labels[ju]
    neg = np.flatnonzero(~same)
    neg = rng.choice(neg, size=min(int(same.sum()), neg.size), replace=False)
    sel = np.sort(np.concatenate([np.flatnonzero(same), neg]))
    atomic_write(out / "codes.csv", codes_to_csv(ids, codes))
    atomic_write(out / "pairs.csv", pairs_to_csv((ids[iu[t]], ids[ju[t]], same[t]) for t in sel))
    print(f"encoded {len(idx)} samples, {len(sel)} pairs")
    return EXIT_OK


def verify_report(pairs, codes, metric):
    missing = sorted({i for a, b, _ in pairs for i in (a, b)} - set(codes))
    if missing:
        raise UsageError(f"ids missing from codes file: {', '.join(missing[:5])}")
    vp = [evaluation.VerificationPair(codes[a], codes[b], s) for a, b, s in pairs]
    try:
        res = evaluation.verification_accuracy(vp, metric)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = {"metric": metric, "accuracy": float(res.accuracy), "threshold": res.threshold,
              "num_pairs": len(vp), "num_same": int(res.same.sum())}
    return res, report


def cmd_verify(a):
    out = _out_dir(a.out)
    pairs = read_pairs(_in_file(a.pairs, "pairs file"))
    codes = read_codes(_in_file(a.codes, "codes file"))
    res, report = verify_report(pairs, codes, a.metric)
    atomic_write(out / "report.json", _dump_json(report))
    atomic_write(out / "roc.csv", res.roc_csv())
    print(f"accuracy={float(res.accuracy)!r} threshold={res.threshold!r} metric={a.metric}")
    return EXIT_OK


def _read_mesh(path):
    try:
        return read_obj(_in_file(path, "mesh"))
    except (ValueError, OSError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def cmd_rmse(a):
    out = _out_dir(a.out)
    src, tgt = _read_mesh(a.source), _read_mesh(a.target)
    res = evaluation.icp_align(src, tgt, max_iters=a.max_iters, tol=a.tol, init=a.init,
                               crop_center=a.crop_center, crop_radius=a.crop_radius,
                               symmetric=a.symmetric)
    atomic_write(out / "alignment.json", _dump_json(res.to_dict()))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vertex", "error"])
    for i, e in enumerate(res.errors.tolist()):
        w.writerow([i, repr(e)])
    atomic_write(out / "errors.csv", buf.getvalue())
    atomic_write(out / "ced.csv", evaluation.ced_curve(res.errors).to_csv())
    print(f"rmse_point_to_plane={res.rmse_point_to_plane!r} scale={res.scale!r} "
          f"iterations={res.iterations} converged={res.converged}")
    return EXIT_OK


def run_checks(model=None, seed=0, grad_tol=1e-4, ratio_tol=1e-9):
    """Named self-checks: gradients, distance proportionality, KL identity."""
    rng = np.random.default_rng(seed)
    results = []
    g = gradient_check(seed=seed)
    worst = max(g.values())
    results.append(("gradient_check", worst <= grad_tol, f"max rel err {worst:.3e} ({g})"))

    if model is None:
        model = build_synthetic_model(SyntheticSpec(seed=seed))
    dev = 0.0
    for _ in range(20):
        x = model.shape_eigenvalues * rng.standard_normal(model.m_id)
        y = model.shape_eigenvalues * rng.standard_normal(model.m_id)
        dev = max(dev, abs(geometry.verify_proportionality(model, x, y).ratio - 1))
    results.append(("proportionality", dev <= ratio_tol, f"max |ratio - 1| = {dev:.3e}"))

    Z = rng.standard_normal((64, model.m_id))
    Z = (Z - Z.mean(0)) / Z.std(0)
    kl = geometry.kl_to_standard_normal(Z * model.shape_eigenvalues, model.shape_eigenvalues)
    results.append(("kl_identity", abs(kl) <= 1e-12, f"KL at unit moments = {kl:.3e}"))
    return results


def cmd_check(a):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = load_model(_in_file(a.model, "model file"), strict=False) if a.model else None
        results = run_checks(model, a.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_USAGE


# ------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="sirface", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic morphable model and identity dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-vertices", type=int)
    g.add_argument("--m-id", type=int)
    g.add_argument("--m-exp", type=int)
    g.add_argument("--identities", type=int)
    g.add_argument("--samples", type=int, help="samples per identity")
    g.add_argument("--noise", type=float, help="per-sample code perturbation (units of sigma)")
    g.add_argument("--num-scans", type=int, help="scans used to fit the shape basis")
    g.add_argument("--num-recon", type=int, help="landmark-only samples")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="two-stage training from a JSON/TOML config")
    t.add_argument("config", nargs="?", help="config file (default: built-in desk config)")
    t.add_argument("--data", help="directory written by 'gen' (default: generate from config)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="regress shape codes for a dataset split and write pairs")
    e.add_argument("--data", required=True)
    e.add_argument("--regressor", required=True)
    e.add_argument("--split", default="test", choices=["train", "test", "recon"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    v = sub.add_parser("verify", help="pair verification accuracy from code distances")
    v.add_argument("pairs", help="CSV with header id_a,id_b,same")
    v.add_argument("codes", help="CSV with header id,c0,c1,...")
    v.add_argument("--metric", choices=evaluation.METRICS, default="euclidean")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("rmse", help="similarity ICP and point-to-plane RMSE between two OBJ meshes")
    r.add_argument("source")
    r.add_argument("target")
    r.add_argument("--out", required=True)
    r.add_argument("--max-iters", type=int, default=100)
    r.add_argument("--tol", type=float, default=1e-12)
    r.add_argument("--init", choices=["pca", "centroid", "identity"], default="pca")
    r.add_argument("--crop-center", type=int, help="target vertex index to crop around")
    r.add_argument("--crop-radius", type=float, help="crop radius in mesh units")
    r.add_argument("--symmetric", action="store_true", help="average both directions")
    r.set_defaults(func=cmd_rmse)

    c = sub.add_parser("check", help="run gradient, proportionality and KL self-checks")
    c.add_argument("--model", help="model file to check instead of a fresh synthetic one")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
