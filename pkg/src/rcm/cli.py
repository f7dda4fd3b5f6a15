"""
Command-line interface: ``rcm {simulate,fit,icc,test-homogeneity,benchmark,cluster}``.

Every subcommand is deterministic given its arguments and seed. JSON outputs
carry ``format_version``; wall times live in a separate ``metadata`` block so
the primary output is byte-identical across reruns.

Exit codes: 0 success, 1 other package error, 2 usage or I/O error,
3 domain error, 4 matrix not positive definite, 5 input format error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import benchmark as bench
from .errors import DomainError, RcmError, SchemaError
from .estimators import fit_rcm
from .inference import FitConfig, icc, permutation_test
from .ingest import StudySet, cluster_modules, load_studies, select_top_variance, to_correlation, to_study_data
from .likelihood import StudyData
from .matrixcore import SpdMatrix
from .sampling import RcmParams, compound_symmetry, generate_rcm_dataset

FORMAT_VERSION = 1
DEFAULT_SEED = 20150101
SCENARIOS = ("scenario1", "scenario2", "timing")


def default_seed() -> int:
    env = os.environ.get("RCM_SEED")
    if env is None or env.strip() == "":
        return DEFAULT_SEED
    try:
        return int(env, 0)
    except ValueError:
        raise DomainError(f"RCM_SEED must be an integer, got {env!r}") from None


def _matrix(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"dim": int(a.shape[0]), "rows": a.tolist()}


def _read_matrix_json(obj) -> np.ndarray:
    if isinstance(obj, dict):
        rows = np.asarray(obj["rows"], dtype=float)
        if rows.shape != (int(obj["dim"]), int(obj["dim"])):
            raise SchemaError(f"matrix rows do not match dim {obj['dim']}")
        return rows
    return np.asarray(obj, dtype=float)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _inner(tag: str) -> str:
    return tag.replace("-", "_")


def _config_echo(args) -> dict:
    skip = {"func", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# ----------------------------------------------------------------- simulate


def _parse_psi(text: str, p: int | None) -> SpdMatrix:
    if text == "identity":
        if p is None:
            raise DomainError("--p is required for an identity Ψ")
        return SpdMatrix(np.eye(p))
    if text.startswith("cs:") or text.startswith("compound-symmetry:"):
        if p is None:
            raise DomainError("--p is required for a compound-symmetry Ψ")
        try:
            var, cov = (float(v) for v in text.split(":", 1)[1].split(","))
        except ValueError:
            raise DomainError(f"compound symmetry needs 'cs:VAR,COV', got {text!r}") from None
        return compound_symmetry(p, var, cov)
    path = Path(text)
    if path.suffix.lower() == ".json":
        m = _read_matrix_json(json.loads(path.read_text(encoding="utf-8")))
    else:
        m = np.loadtxt(path, delimiter="," if path.suffix.lower() == ".csv" else None, ndmin=2)
    if p is not None and m.shape[0] != p:
        raise DomainError(f"Ψ file is {m.shape[0]}-dimensional but --p is {p}")
    return SpdMatrix(m)


def _write_study_csv(path: Path, x: np.ndarray, names: Sequence[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in x:
        w.writerow([repr(float(v)) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def cmd_simulate(args) -> int:
    psi = _parse_psi(args.psi, args.p)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    params = RcmParams(psi, args.nu)
    ds = generate_rcm_dataset(args.seed, params, sizes)
    out = Path(args.out or "rcm-simulated")
    out.mkdir(parents=True, exist_ok=True)
    names = [f"V{j + 1}" for j in range(psi.dim)]
    files = []
    for i, x in enumerate(ds.studies):
        fname = f"study_{i + 1}.csv"
        _write_study_csv(out / fname, x, names)
        files.append(fname)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(args.seed),
        "nu": float(args.nu),
        "psi": _matrix(psi.entries),
        "sizes": sizes,
        "files": files,
    }
    (out / "manifest.json").write_text(_dump_json(manifest), encoding="utf-8")
    return 0


# ---------------------------------------------------------------- inputs


def _load_scatter_json(path: str) -> tuple[list[StudyData], list[str] | None]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        studies = [StudyData(_read_matrix_json(s["scatter"]), int(s["n"])) for s in obj["studies"]]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: scatter JSON needs studies[].scatter and studies[].n ({exc})") from None
    return studies, obj.get("features")


def _raw_inputs(args) -> StudySet:
    s = load_studies(args.inputs)
    if args.top is not None:
        s = select_top_variance(s, args.top)
    return s


def _fit_inputs(args) -> tuple[list[StudyData], list[str] | None]:
    if args.scatter:
        if args.inputs:
            raise DomainError("give either raw study files or --scatter, not both")
        data, features = _load_scatter_json(args.scatter)
        if args.top is not None:
            raise DomainError("--top needs raw observations")
        return data, features
    if not args.inputs:
        raise DomainError("no input: give study files or --scatter")
    s = _raw_inputs(args)
    return to_study_data(s, center=not args.no_center), list(s.features)


# --------------------------------------------------------------------- fit


def _fit_json(fit, features, args) -> dict:
    p = fit.p
    return {
        "format_version": FORMAT_VERSION,
        "features": features,
        "psi_hat": _matrix(fit.psi_hat.entries),
        "sigma_hat": _matrix(fit.sigma_hat.entries) if fit.sigma_hat is not None else None,
        "correlation": _matrix(to_correlation(fit.psi_hat.entries)),
        "nu_hat": fit.nu_hat,
        "nu_saturated": fit.nu_saturated,
        "icc": icc(fit.nu_hat, p) if fit.nu_hat > p else None,
        "loglik_trace": [float(v) for v in fit.loglik_trace],
        "iterations": fit.iterations,
        "converged": fit.converged,
        "estimator": fit.estimator,
        "seed": int(args.seed),
        "config": _config_echo(args),
        "metadata": {"wall_time": fit.wall_time},
    }


def _run_fit(args):
    data, features = _fit_inputs(args)
    fit = fit_rcm(data, eps=args.eps, max_iter=args.max_iter, inner=_inner(args.inner))
    return fit, features


def cmd_fit(args) -> int:
    fit, features = _run_fit(args)
    if args.format == "csv":
        m = fit.sigma_hat.entries if fit.sigma_hat is not None else fit.psi_hat.entries
        names = features or [f"V{j + 1}" for j in range(fit.p)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + list(names))
        for name, row in zip(names, m):
            w.writerow([name] + [repr(float(v)) for v in row])
        _emit(buf.getvalue(), args.out)
    else:
        _emit(_dump_json(_fit_json(fit, features, args)), args.out)
    return 0


# --------------------------------------------------------------------- icc


def cmd_icc(args) -> int:
    if args.fit_json:
        obj = json.loads(Path(args.fit_json).read_text(encoding="utf-8"))
        nu, p = float(obj["nu_hat"]), int(obj["psi_hat"]["dim"])
    else:
        if args.nu is None or args.p is None:
            raise DomainError("give a fit JSON or both --nu and --p")
        nu, p = args.nu, args.p
    _emit(_dump_json({"format_version": FORMAT_VERSION, "nu": nu, "p": p, "icc": icc(nu, p)}), args.out)
    return 0


# --------------------------------------------------------- test-homogeneity


def cmd_test_homogeneity(args) -> int:
    if args.scatter:
        raise DomainError(
            "the permutation test reshuffles observation rows between studies, "
            "so it needs raw study files; scatter matrices alone are not enough"
        )
    if not args.inputs:
        raise DomainError("no input: give raw study files")
    s = _raw_inputs(args)
    config = FitConfig(eps=args.eps, max_iter=args.max_iter, inner=_inner(args.inner), center=not args.no_center)
    t0 = time.perf_counter()
    res = permutation_test([st.data for st in s.studies], args.permutations, config, seed=args.seed, threads=args.threads)
    out = {
        "format_version": FORMAT_VERSION,
        "nu_obs": res.nu_obs,
        "null_nus": res.null_nus,
        "p_value": res.p_value,
        "N": res.n_permutations,
        "seed": res.seed,
        "config": _config_echo(args),
        "metadata": {"wall_time": time.perf_counter() - t0},
    }
    _emit(_dump_json(out), args.out)
    return 0


# --------------------------------------------------------------- benchmark


def cmd_benchmark(args) -> int:
    if args.reps is not None and args.reps < 1:
        raise DomainError(f"--reps must be at least 1, got {args.reps}")
    reps = args.reps if args.reps is not None else bench.DEFAULT_REPLICATIONS
    if args.scenario == "timing":
        grid = [int(v) for v in args.p_grid.split(",") if v.strip()]
        table = bench.timing_scenario(grid, args.fits_per_p if args.reps is None else reps, seed=args.seed)
        if args.format == "json":
            _emit(_dump_json({"format_version": FORMAT_VERSION, "timing": {str(k): v for k, v in table.items()}}), args.out)
        else:
            _emit(bench.timing_csv(table), args.out)
        return 0
    if args.scenario == "scenario1":
        sc = bench.scenario1(replications=reps, seed=args.seed, em_mode=args.em_mode)
    elif args.scenario == "scenario2":
        sc = bench.scenario2(replications=reps, seed=args.seed, em_mode=args.em_mode)
    else:
        d = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        d.setdefault("seed", args.seed)
        d.setdefault("em_mode", args.em_mode)
        if args.reps is not None:
            d["replications"] = reps
        sc = bench.Scenario.from_dict(d)
    res = bench.run_scenario(sc, threads=args.threads)
    if args.plot_data:
        Path(args.plot_data).write_text(_dump_json(res.plot_data()), encoding="utf-8")
    if args.format == "json":
        _emit(_dump_json(res.plot_data()), args.out)
    else:
        _emit(res.to_csv(), args.out)
    return 0


# ----------------------------------------------------------------- cluster


def _read_correlation(path: str) -> tuple[np.ndarray, list[str] | None]:
    p = Path(path)
    if p.suffix.lower() == ".json":
        obj = json.loads(p.read_text(encoding="utf-8"))
        if "correlation" in obj:
            return _read_matrix_json(obj["correlation"]), obj.get("features")
        return _read_matrix_json(obj), None
    rows = list(csv.reader(io.StringIO(p.read_text(encoding="utf-8"))))
    header = rows[0]
    labelled = header[0].strip() == ""
    names = header[1:] if labelled else header
    body = [r[1:] if labelled else r for r in rows[1:] if r]
    return np.asarray(body, dtype=float), names


def cmd_cluster(args) -> int:
    if args.correlation:
        r, features = _read_correlation(args.correlation)
    else:
        fit, features = _run_fit(args)
        r = to_correlation(fit.psi_hat.entries)
    mods = cluster_modules(r, args.modules, features)
    _emit(mods.to_csv(), args.out)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=lambda s: int(s, 0), default=None, help="64-bit seed (default: $RCM_SEED or %d)" % DEFAULT_SEED)
    common.add_argument("--eps", type=float, default=1e-6, help="convergence tolerance on the log-likelihood")
    common.add_argument("--max-iter", type=int, default=1000)
    common.add_argument("--inner", choices=("pooled", "em", "approx-mle"), default="em", help="Ψ update")
    common.add_argument("--top", type=int, default=None, help="keep the TOP features of largest pooled variance")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", default=None, help="output path (default stdout; a directory for simulate)")
    common.add_argument("--format", choices=("json", "csv"), default=None)

    data_in = argparse.ArgumentParser(add_help=False)
    data_in.add_argument("inputs", nargs="*", help="study files (CSV/TSV, header of feature names)")
    data_in.add_argument("--scatter", default=None, help="JSON of precomputed scatter matrices")
    data_in.add_argument("--no-center", action="store_true", help="do not centre each study's columns")

    ap = argparse.ArgumentParser(prog="rcm", description="Random covariance model: fit, test and benchmark.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", parents=[common], help="simulate studies from the model")
    sp.add_argument("--p", type=int, default=None)
    sp.add_argument("--nu", type=float, required=True)
    sp.add_argument("--psi", default="identity", help="identity | cs:VAR,COV | matrix file (.json or .csv)")
    sp.add_argument("--sizes", required=True, help="comma-separated study sizes, e.g. 7,7,7")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", parents=[common, data_in], help="fit Ψ and ν")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("icc", parents=[common], help="intra-class correlation 1/(ν-p)")
    sp.add_argument("fit_json", nargs="?", default=None)
    sp.add_argument("--nu", type=float, default=None)
    sp.add_argument("--p", type=int, default=None)
    sp.set_defaults(func=cmd_icc)

    sp = sub.add_parser("test-homogeneity", parents=[common, data_in], help="permutation test of ν = ∞")
    sp.add_argument("--permutations", "-N", type=int, default=500)
    sp.set_defaults(func=cmd_test_homogeneity)

    sp = sub.add_parser("benchmark", parents=[common], help="estimator comparison")
    sp.add_argument("scenario", help="scenario1 | scenario2 | timing | path to a scenario JSON")
    sp.add_argument("--reps", type=int, default=None, help="replications (default 200; 1000 for the full-size run)")
    sp.add_argument("--em-mode", choices=("full", "fixed_nu"), default="full")
    sp.add_argument("--p-grid", default="2,5,10,20,50,100", help="dimensions for the timing scenario")
    sp.add_argument("--fits-per-p", type=int, default=10)
    sp.add_argument("--plot-data", default=None, help="also write plot-data JSON here")
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("cluster", parents=[common, data_in], help="Ward modules of a correlation matrix")
    sp.add_argument("--correlation", default=None, help="fit JSON or correlation matrix CSV")
    sp.add_argument("--modules", type=int, default=5)
    sp.set_defaults(func=cmd_cluster)
    return ap


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {category.__name__}: {message}", file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "benchmark":
        known = args.scenario in SCENARIOS or Path(args.scenario).is_file()
        if not known:
            parser.error(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)} or a JSON file")
    if args.format is None:
        args.format = "csv" if args.command in ("benchmark", "cluster") else "json"
    try:
        if args.seed is None:
            args.seed = default_seed()
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _show_warning
            return args.func(args)
    except RcmError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"IoError: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"ParseError: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
