"""``gpcsd`` command-line interface.

Exit codes: 0 success, 2 invalid input (arguments, files, configuration),
3 numerical failure (fit did not converge, singular systems).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import component_spectra, phase_tensor, plv_matrix, plv_to_csv
from .baselines import KcsdConfig, kcsd_1d, tcsd
from .benchmark import TCSD_SIGN
from .dataset import LfpDataset, unit_variance_scale
from .errors import GpcsdError, NumericalError, ValidationError
from .forward import ForwardOperator
from .gp import predict
from .io import dump_json, import_csv, load_run_config, read_arrays, read_dataset, write_arrays, write_dataset
from .kernels import Hyperparameters
from .optimize import default_priors, fit_map
from .simulate import dipole_study, gen_gp_trials, load_study, paired_ttest, score

log = logging.getLogger("gpcsd")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _provenance(args, seed=None):
    return {"invocation": list(args._argv), "seed": seed, "version": __version__}


def _parse_slice(text, n):
    """``"a:b"``, ``"a:"``, ``":b"`` or a comma list of indices."""
    if text is None:
        return np.arange(n)
    if ":" in text:
        a, b = text.split(":", 1)
        idx = np.arange(n)[slice(int(a) if a else None, int(b) if b else None)]
    else:
        idx = np.array([int(v) for v in text.split(",")])
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise ValidationError(f"trial selection {text!r} is empty or out of range for {n} trials")
    return idx


def _parse_floats(text, what):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ValidationError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _parse_grid(spec, ds: LfpDataset):
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    if spec in (None, "electrodes"):
        return ds.electrodes.coords
    if spec == "interior-electrodes":
        if ds.electrodes.dim != 1:
            raise ValidationError("interior-electrodes is only defined for linear probes")
        return ds.electrodes.coords[1:-1]
    text = spec.strip()
    if text.startswith("["):
        try:
            return np.asarray(json.loads(text), dtype=float)
        except (json.JSONDecodeError, ValueError):
            raise ValidationError(f"grid {spec!r} is not a JSON coordinate list") from None
    return np.asarray(_parse_floats(text, "grid"))


def _forward(ds, cfg):
    f = cfg.get("forward", {})
    return ForwardOperator.for_electrodes(ds.electrodes, n_per_dim=f.get("n_per_dim", 100),
                                          scheme=f.get("scheme", "gauss-legendre"),
                                          margin=f.get("margin", 0.0), tau=f.get("tau"))


# -- simulate ---------------------------------------------------------------

def cmd_simulate(args):
    spec = load_study(args.study)
    if args.seed is not None:
        spec.seed = args.seed
    if args.noise is not None:
        spec.noise_var = args.noise
    if args.n_times is not None:
        spec.n_times = args.n_times
    if args.n_trials is not None:
        spec.n_train, spec.n_test = args.n_trials, 0
    out = Path(args.out)
    prov = _provenance(args, spec.seed)
    if spec.kind == "dipole":
        tmpl, ds, clean = dipole_study(spec)
        z = ds.electrodes.coords
        truth = {"total": tmpl.evaluate(z, ds.times)[None], "lfp_noiseless": clean}
        split = {"train": [0], "test": [0]}
    else:
        trials = gen_gp_trials(spec)
        ds = trials.dataset
        truth = {"total": trials.csd_electrodes, "lfp_noiseless": trials.noiseless}
        tr, te = trials.split()
        split = {"train": tr.tolist(), "test": te.tolist()}
    write_dataset(out / "data", ds, provenance=prov)
    write_arrays(out / "truth", "csd_truth", truth, ds.electrodes.coords, ds.times, provenance=prov)
    dump_json({"study": spec.to_dict(), "split": split, "provenance": prov}, out / "study.json")
    print(f"wrote {ds.n_trials} trials x {ds.n_channels} channels x {ds.n_samples} samples to {out}")
    return EXIT_OK


# -- fit ----------------------------------------------------------------------

def _build_priors(ds, cfg):
    pri = default_priors(ds)
    pc = cfg.get("priors", {})
    if pc.get("profile"):
        pri = pri.with_profile(pc["profile"])
    for name, o in pc.get("overrides", {}).items():
        pri = pri.with_quantiles(name, o["q01"], o["q99"], o.get("bounds"))
    return pri


def cmd_fit(args):
    cfg = load_run_config(args.config)
    opt = cfg.get("optimizer", {})
    restarts = args.restarts if args.restarts is not None else opt.get("restarts", 10)
    seed = args.seed if args.seed is not None else opt.get("seed", 0)
    if args.profile:
        cfg.setdefault("priors", {})["profile"] = args.profile
    ds, _ = read_dataset(args.data)
    ds = ds.subset(_parse_slice(args.trials, ds.n_trials))
    normalize = cfg.get("normalize", True) and not args.no_normalize
    scale = unit_variance_scale(ds) if normalize else 1.0
    work = ds.scaled(scale)
    fwd = _forward(work, cfg)
    fixed = {k: (v * scale**2 if "var" in k else v) for k, v in opt.get("fixed", {}).items()}
    report = fit_map(work, fwd, _build_priors(work, cfg), n_restarts=restarts, seed=seed, fixed=fixed,
                     maxiter=opt.get("maxiter", 500), ftol=opt.get("ftol", 1e-9), gtol=opt.get("gtol", 1e-5))
    theta_raw = report.theta.with_data_scale(1.0 / scale)
    doc = {
        "theta": theta_raw.to_dict(),
        "theta_normalized": report.theta.to_dict(),
        "data_scale": scale,
        "forward": cfg.get("forward", {}),
        "fit_report": report.to_dict(),
        "provenance": _provenance(args, seed),
    }
    dump_json(doc, args.out)
    for k, v in theta_raw.to_dict().items():
        print(f"{k:>12s} = {v:.6g}")
    print(f"objective = {report.objective:.10g} (restart {report.best_index} of {restarts})")
    return EXIT_OK


def _read_params(path):
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
        return Hyperparameters.from_dict(doc["theta"]), doc
    except FileNotFoundError:
        raise ValidationError(f"parameter file not found: {p}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ValidationError(f"malformed parameter file {p}: {e}") from None


# -- predict ------------------------------------------------------------------

def cmd_predict(args):
    theta, doc = _read_params(args.params)
    ds, _ = read_dataset(args.data)
    ds = ds.subset(_parse_slice(args.trials, ds.n_trials))
    cfg = {"forward": doc.get("forward", {})}
    fwd = _forward(ds, cfg)
    grid = _parse_grid(args.grid, ds)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pred = predict(theta, ds, fwd, grid)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    arrays = {"total": pred.total}
    if args.split:
        arrays.update(slow=pred.slow, fast=pred.fast, mean=pred.mean)
    write_arrays(args.out, "csd_prediction", arrays, pred.grid, pred.times,
                 provenance=_provenance(args, doc.get("provenance", {}).get("seed")),
                 data_scale=doc.get("data_scale"))
    print(f"wrote prediction {pred.total.shape} to {args.out}")
    return EXIT_OK


# -- baselines ----------------------------------------------------------------

def cmd_baseline(args):
    ds, _ = read_dataset(args.data)
    ds = ds.subset(_parse_slice(args.trials, ds.n_trials))
    prov = _provenance(args)
    if args.method == "tcsd":
        est = tcsd(ds.lfp, ds.electrodes.pitch(), sign=args.sign)
        write_arrays(args.out, "csd_prediction", {"total": est}, ds.electrodes.coords[1:-1], ds.times,
                     provenance=prov)
        print(f"wrote tCSD {est.shape} to {args.out}")
        return EXIT_OK
    if args.R is None:
        raise ValidationError("kcsd needs --R")
    cv_ds = ds
    if args.cv_data is not None:
        cv_ds, _ = read_dataset(args.cv_data)
    cfg = KcsdConfig(R=args.R, cv_trials=args.cv_trials)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = kcsd_1d(cv_ds.lfp, cv_ds.electrodes, cfg)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    grid = _parse_grid(args.grid, ds)
    est = fit.model.estimate(ds.lfp, grid)
    out = Path(args.out)
    write_arrays(out, "csd_prediction", {"total": est}, grid, ds.times, provenance=prov)
    fit.to_csv(out / "kcsd_cv.csv")
    print(f"kCSD width={fit.width:g} lambda={fit.lam:g}; wrote {est.shape} to {out}")
    return EXIT_OK


# -- compare ------------------------------------------------------------------

def _common(coords_a, coords_b):
    a = np.asarray(coords_a, dtype=float).reshape(len(coords_a), -1)
    b = np.asarray(coords_b, dtype=float).reshape(len(coords_b), -1)
    ia, ib = [], []
    for i, c in enumerate(a):
        hit = np.flatnonzero(np.all(np.abs(b - c) <= 1e-6 * np.maximum(1.0, np.abs(c)), axis=1))
        if hit.size:
            ia.append(i)
            ib.append(int(hit[0]))
    return np.array(ia, dtype=int), np.array(ib, dtype=int)


def cmd_compare(args):
    truth, tmeta = read_arrays(args.truth)
    tsel = _parse_slice(args.trials, truth["total"].shape[0])
    rows, per_trial = [], {}
    names = []
    for path in args.pred:
        arrs, meta = read_arrays(path)
        ia, it = _common(meta["coords"], tmeta["coords"])
        if ia.size == 0:
            raise ValidationError(f"{path} shares no locations with the ground truth")
        pred = arrs["total"]
        t = truth["total"][tsel]
        if pred.shape[0] != t.shape[0] or pred.shape[-1] != t.shape[-1]:
            raise ValidationError(f"{path}: {pred.shape[0]} trials x {pred.shape[-1]} samples, truth has "
                                  f"{t.shape[0]} x {t.shape[-1]}")
        s = score(pred[:, ia], t[:, it], rescale=not args.no_rescale)
        name = Path(path).name
        if name in names:
            name = f"{name}#{len(names)}"
        names.append(name)
        per_trial[name] = s.per_trial
        rows.append({"method": name, "mean_mse": s.mean, "sd_mse": s.sd, "n_locations": int(ia.size)})
    tests = {}
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = per_trial[names[i]], per_trial[names[j]]
            if a.shape == b.shape:
                t, p = paired_ttest(a, b)
                tests[f"{names[i]}_vs_{names[j]}"] = {"t": t, "p": p}
    print(f"{'method':<24s} {'mean MSE':>14s} {'sd':>14s}")
    for r in rows:
        print(f"{r['method']:<24s} {r['mean_mse']:14.6g} {r['sd_mse']:14.6g}")
    for k, v in tests.items():
        print(f"paired t-test {k}: t = {v['t']:.4g}, p = {v['p']:.4g}")
    if args.out:
        dump_json({"methods": rows, "paired_ttests": tests, "rescaled": not args.no_rescale,
                   "provenance": _provenance(args)}, args.out)
    return EXIT_OK


# -- spectra / plv --------------------------------------------------------------

def _prediction_parts(path):
    arrs, meta = read_arrays(path)
    times = np.asarray(meta["times_ms"])
    if times.size < 2:
        raise ValidationError("need at least two time samples")
    return arrs, meta, times


def cmd_spectra(args):
    from .gp import CsdPrediction

    arrs, meta, times = _prediction_parts(args.pred)
    missing = {"slow", "fast"} - set(arrs)
    if missing:
        raise ValidationError(f"{args.pred} lacks {sorted(missing)}; predict with --split")
    mean = arrs.get("mean", np.zeros(arrs["total"].shape[1:]))
    pred = CsdPrediction(np.asarray(meta["coords"]), times, arrs["total"], arrs["slow"], arrs["fast"], mean)
    spectra = component_spectra(pred, window=args.window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, sp in spectra.items():
        sp.to_csv(out / f"spectrum_{name}.csv", coords=meta["coords"], label=name)
    print(f"wrote {len(spectra)} spectra to {out}")
    return EXIT_OK


def cmd_plv(args):
    band = _parse_floats(args.band, "band")
    if len(band) != 2:
        raise ValidationError("band must be 'low,high'")
    parts, coords, times = [], [], None
    for path in args.pred:
        arrs, meta, t = _prediction_parts(path)
        if args.component not in arrs:
            raise ValidationError(f"{path} has no {args.component!r} array")
        if times is not None and not np.array_equal(times, t):
            raise ValidationError("prediction bundles have different time grids")
        times = t
        parts.append(arrs[args.component])
        coords.extend(meta["coords"])
    if len({p.shape[0] for p in parts}) != 1:
        raise ValidationError("prediction bundles have different trial counts")
    x = np.concatenate(parts, axis=1)
    fs = 1000.0 / float(np.mean(np.diff(times)))
    pt = phase_tensor(x, band, fs, args.time_index, coords=np.asarray(coords))
    m = plv_matrix(pt)
    plv_to_csv(args.out, m, pt)
    print(f"wrote {m.shape[0]}x{m.shape[1]} PLV matrix to {args.out}")
    return EXIT_OK


def cmd_import_csv(args):
    coords = _parse_floats(args.coords, "coords")
    ds = import_csv(args.csv, coords, args.sample_rate, args.t0)
    write_dataset(args.out, ds, provenance=_provenance(args))
    print(f"wrote {ds.n_trials} trials x {ds.n_channels} channels x {ds.n_samples} samples to {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gpcsd", description="Gaussian-process CSD estimation from LFP recordings.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log optimizer progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a shipped or custom simulation study")
    s.add_argument("--study", required=True, help="dipole, gp, misspec2, misspec3 or a study JSON path")
    s.add_argument("--seed", type=int)
    s.add_argument("--noise", type=float, help="noise variance override")
    s.add_argument("--n-times", type=int)
    s.add_argument("--n-trials", type=int, help="total trials (GP studies)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="MAP hyperparameter fit")
    s.add_argument("--data", required=True)
    s.add_argument("--restarts", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--profile", choices=["default", "auditory"])
    s.add_argument("--trials", help="trial selection, e.g. 0:50")
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="conditional-mean CSD")
    s.add_argument("--data", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--grid", default="electrodes",
                   help="electrodes, interior-electrodes, comma list, or JSON coordinate list")
    s.add_argument("--split", action="store_true", help="also write slow, fast and mean components")
    s.add_argument("--trials")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("baseline", help="tCSD or kCSD estimates")
    s.add_argument("method", choices=["tcsd", "kcsd"])
    s.add_argument("--data", required=True)
    s.add_argument("--trials")
    s.add_argument("--sign", type=float, default=TCSD_SIGN, help="tCSD sign convention (default matches the forward model)")
    s.add_argument("--R", type=float, help="forward radius for kCSD")
    s.add_argument("--cv-data", help="dataset used for kCSD cross-validation (default: --data)")
    s.add_argument("--cv-trials", type=int, default=5)
    s.add_argument("--grid", default="interior-electrodes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("compare", help="MSE table and paired t-tests against ground truth")
    s.add_argument("--pred", action="append", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--trials", help="truth trials matching the predictions, e.g. 50:100")
    s.add_argument("--no-rescale", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("spectra", help="trial-averaged periodograms per component")
    s.add_argument("--pred", required=True)
    s.add_argument("--window")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spectra)

    s = sub.add_parser("plv", help="phase locking value matrix")
    s.add_argument("--pred", action="append", required=True)
    s.add_argument("--band", required=True, help="low,high in Hz")
    s.add_argument("--time-index", type=int, required=True)
    s.add_argument("--component", default="total")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plv)

    s = sub.add_parser("import-csv", help="convert a wide CSV into a dataset bundle")
    s.add_argument("--csv", required=True)
    s.add_argument("--coords", required=True, help="comma-separated electrode depths in microns")
    s.add_argument("--sample-rate", type=float, required=True)
    s.add_argument("--t0", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import_csv)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (GpcsdError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
