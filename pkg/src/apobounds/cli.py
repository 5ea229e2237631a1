"""Command-line surface: simulate, sensitivity, calibrate-gamma, benchmark, preprocess.

All randomness flows from a single seed (flag, config file, or the
APOBOUNDS_SEED environment variable); with --workers 1 and --no-timings the
outputs are byte-reproducible. Exit codes: 0 success, 2 validation error,
3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .analysis import (
    METHOD_SHARP,
    AnalysisConfig,
    benchmark_methods,
    preprocess_dataset,
    run_sensitivity,
)
from .core import (
    Dataset,
    KernelFamily,
    NumericError,
    ValidationError,
    tau_grid,
)
from .density import MdnConfig
from .estimators import BoundForm
from .simulation import SimConfig, calibrate_gamma, generate, hat_outlier_keep_indices, true_apo

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

SEED_ENV_VAR = "APOBOUNDS_SEED"


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise ValidationError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc


def _format_float(v: float) -> str:
    return repr(float(v))


def write_dataset_csv(path: str, data: Dataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(data.p)] + ["t", "y"])
        for i in range(data.n):
            row = [_format_float(v) for v in data.x[i]]
            row.append(_format_float(data.t[i]))
            row.append(_format_float(data.y[i]))
            writer.writerow(row)


def read_dataset_csv(path: str) -> Dataset:
    """Read the canonical ``x1..xp,t,y`` layout, reporting the offending row on failure."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[-2:] != ["t", "y"]:
            raise ValidationError(
                f"{path}: header must end with 't,y', got {','.join(header)}"
            )
        expected = [f"x{i + 1}" for i in range(len(header) - 2)]
        if header[:-2] != expected:
            raise ValidationError(
                f"{path}: covariate columns must be named x1..x{len(header) - 2}"
            )
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}: row {line_no} has {len(row)} fields, expected {len(header)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValidationError(f"{path}: row {line_no}: {exc}") from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    return Dataset(arr[:, :-2], arr[:, -2], arr[:, -1])


def read_table_csv(path: str) -> tuple[list[str], np.ndarray]:
    """Read an arbitrary numeric CSV with a header row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}: row {line_no} has {len(row)} fields, expected {len(header)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValidationError(f"{path}: row {line_no}: {exc}") from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return header, np.asarray(rows, dtype=np.float64)


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _zero_seconds(records: list[dict]) -> list[dict]:
    for rec in records:
        rec["seconds"] = {k: 0.0 for k in rec["seconds"]}
    return records


# ---- argument parsing --------------------------------------------------------


def _float_list(raw) -> tuple[float, ...]:
    if isinstance(raw, (list, tuple)):
        return tuple(float(v) for v in raw)
    try:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser(file_cfg: dict | None = None) -> argparse.ArgumentParser:
    """Build the CLI; values from a TOML config file become the defaults, flags win."""
    cfg = file_cfg or {}

    def dflt(key: str, fallback):
        value = cfg.get(key, fallback)
        if key in ("gammas", "taus") and value is not None:
            return _float_list(value)
        return value

    parser = argparse.ArgumentParser(
        prog="apobounds",
        description=(
            "Sharp bounds and bootstrap confidence intervals for the average "
            "potential outcome of a continuous treatment under a sensitivity "
            "parameter Gamma."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def _add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=dflt("seed", None),
                       help="master RNG seed (env APOBOUNDS_SEED as fallback)")
        p.add_argument("--config", type=str, default=None, help="TOML file with defaults")

    sim = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    _add_common(sim)
    sim.add_argument("--n", type=int, default=dflt("n", 1000),
                     help="rows before outlier removal")
    sim.add_argument("--output", required=True, help="CSV output path")
    sim.add_argument("--lam", type=float, default=dflt("lam", 0.5))
    sim.add_argument("--beta-u-scale", type=float, default=dflt("beta_u_scale", 1.0),
                     help="multiplier on beta_u")
    sim.add_argument("--no-trim", action="store_true", help="skip hat-value outlier removal")
    sim.add_argument("--latent-output", default=None, help="optional CSV for latent U")
    sim.add_argument("--tau-count", type=int, default=dflt("tau_count", 15))

    sens = sub.add_parser("sensitivity", help="run the (tau, Gamma) sensitivity analysis")
    _add_common(sens)
    sens.add_argument("--input", required=True, help="CSV with columns x1..xp,t,y")
    sens.add_argument("--output", required=True, help="JSON output path")
    sens.add_argument("--gammas", type=_float_list, default=dflt("gammas", (2.0,)))
    sens.add_argument("--taus", type=_float_list, default=dflt("taus", None),
                      help="comma-separated treatment values; use the "
                           "--taus=-1.5,0.5 form for negative values")
    sens.add_argument("--tau-count", type=int, default=dflt("tau_count", 5))
    sens.add_argument("--resamples", type=int, default=dflt("resamples", 100),
                      help="bootstrap resamples B")
    sens.add_argument("--alpha", type=float, default=dflt("alpha", 0.05))
    sens.add_argument("--folds", type=int, default=dflt("folds", 2))
    sens.add_argument("--nuisance", choices=["mdn", "linear"],
                      default=dflt("nuisance", "mdn"))
    sens.add_argument("--mdn-epochs", type=int, default=dflt("mdn_epochs", 200))
    sens.add_argument("--mdn-components", type=int, default=dflt("mdn_components", 10))
    sens.add_argument("--fine-tune", type=int, default=dflt("fine_tune", 0), metavar="M",
                      help="fine-tune hyperparameters over M candidates (0 = off)")
    sens.add_argument("--refit-epochs", type=int, default=dflt("refit_epochs", 20))
    sens.add_argument("--form", choices=[f.value for f in BoundForm],
                      default=dflt("form", "sign"))
    sens.add_argument("--no-stabilized", action="store_true")
    sens.add_argument("--kernel", choices=[k.value for k in KernelFamily],
                      default=dflt("kernel", "epanechnikov"))
    sens.add_argument("--baseline", action="store_true",
                      help="also run the rival grid-search method")
    sens.add_argument("--baseline-mc", type=int, default=dflt("baseline_mc", 500))
    sens.add_argument("--shared-bandwidth", action="store_true")
    sens.add_argument("--rebandwidth", action="store_true",
                      help="reselect bandwidths inside each resample (slow)")
    sens.add_argument("--workers", type=int, default=dflt("workers", None))
    sens.add_argument("--no-timings", action="store_true",
                      help="zero the wall-time fields for byte-reproducible output")

    cal = sub.add_parser("calibrate-gamma", help="calibrate Gamma on simulated data")
    _add_common(cal)
    cal.add_argument("--output", default=None, help="optional JSON output path")
    cal.add_argument("--lam", type=float, default=dflt("lam", 0.5))
    cal.add_argument("--beta-u-scale", type=float, default=dflt("beta_u_scale", 1.0))
    cal.add_argument("--p-gamma", type=float, default=dflt("p_gamma", 0.99))
    cal.add_argument("--n-cal", type=int, default=dflt("n_cal", 10_000))
    cal.add_argument("--hat-trim", type=float, default=dflt("hat_trim", 0.10))
    cal.add_argument("--at-taus", type=_float_list, default=None,
                     help="also report the conservative fixed-treatment variant at "
                          "these values")

    bench = sub.add_parser("benchmark", help="time both methods at m = 2, 3, 4")
    _add_common(bench)
    bench.add_argument("--output", required=True, help="JSON output path")
    bench.add_argument("--n", type=int, default=dflt("n", 300))
    bench.add_argument("--resamples", type=int, default=dflt("resamples", 20))
    bench.add_argument("--gammas", type=_float_list, default=dflt("gammas", (2.0,)))
    bench.add_argument("--nuisance", choices=["mdn", "linear"],
                       default=dflt("nuisance", "linear"))
    bench.add_argument("--baseline-mc", type=int, default=dflt("baseline_mc", 500))
    bench.add_argument("--workers", type=int, default=dflt("workers", 1))

    prep = sub.add_parser("preprocess", help="log/standardize/trim a raw CSV")
    _add_common(prep)
    prep.add_argument("--input", required=True)
    prep.add_argument("--output", required=True)
    prep.add_argument("--treatment-col", required=True)
    prep.add_argument("--outcome-col", required=True)
    prep.add_argument("--covariate-cols", default=dflt("covariate_cols", None),
                      help="comma-separated names; default: every remaining column")
    prep.add_argument("--log-cols", default=dflt("log_cols", ""),
                      help="comma-separated covariate names to log-transform")
    prep.add_argument("--no-standardize", action="store_true")
    prep.add_argument("--hat-trim", type=float, default=dflt("hat_trim", 0.10))
    return parser


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise OSError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"bad TOML in {path}: {exc}") from exc


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    return _default_seed()


# ---- commands ------------------------------------------------------------------


def _sim_config(args, seed: int, n: int | None = None) -> SimConfig:
    base = SimConfig()
    return SimConfig(
        lam=args.lam,
        beta_u=base.beta_u * args.beta_u_scale,
        n=n if n is not None else args.n,
        seed=seed,
    )


def cmd_simulate(args) -> int:
    seed = _resolve_seed(args)
    cfg = _sim_config(args, seed)
    sample = generate(cfg)
    if not args.no_trim:
        keep = hat_outlier_keep_indices(sample.dataset, 0.10)
        sample = sample.subset(keep)
    write_dataset_csv(args.output, sample.dataset)
    if args.latent_output:
        with open(args.latent_output, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"u{i + 1}" for i in range(cfg.p_u)])
            for row in sample.u:
                writer.writerow([_format_float(v) for v in row])
    taus = tau_grid(sample.dataset.t, args.tau_count)
    sidecar = {
        "seed": seed,
        "config": {
            "p_x": cfg.p_x,
            "p_u": cfg.p_u,
            "rho_x": cfg.rho_x,
            "rho_u": cfg.rho_u,
            "lam": cfg.lam,
            "beta_x": cfg.beta_x.tolist(),
            "beta_u": cfg.beta_u.tolist(),
            "gamma_x": cfg.gamma_x.tolist(),
            "gamma_u": cfg.gamma_u.tolist(),
            "zeta": cfg.zeta,
            "sigma_eps_t": cfg.sigma_eps_t,
            "sigma_eps_y": cfg.sigma_eps_y,
            "n": cfg.n,
        },
        "rows_written": sample.dataset.n,
        "trimmed": not args.no_trim,
        "latent_file": args.latent_output,
        "true_apo": {
            "tau": [float(v) for v in taus],
            "value": [float(true_apo(float(v), cfg)) for v in taus],
        },
    }
    _write_json(args.output + ".json", sidecar)
    print(f"wrote {sample.dataset.n} rows to {args.output}")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    seed = _resolve_seed(args)
    data = read_dataset_csv(args.input)
    mdn_cfg = MdnConfig(
        n_components=args.mdn_components,
        max_epochs=args.mdn_epochs,
        seed=seed,
    )
    cfg = AnalysisConfig(
        taus=args.taus,
        tau_count=args.tau_count,
        gammas=tuple(args.gammas),
        n_resamples=args.resamples,
        alpha=args.alpha,
        seed=seed,
        folds=args.folds,
        nuisance=args.nuisance,
        mdn_config=mdn_cfg if args.nuisance == "mdn" else None,
        fine_tune_candidates=args.fine_tune,
        refit_epochs_cap=args.refit_epochs,
        form=BoundForm(args.form),
        stabilized=not args.no_stabilized,
        kernel_family=KernelFamily(args.kernel),
        method="both" if args.baseline else METHOD_SHARP,
        baseline_mc=args.baseline_mc,
        shared_bandwidth=args.shared_bandwidth,
        rebandwidth=args.rebandwidth,
        workers=args.workers,
    )
    result = run_sensitivity(data, cfg)
    records = result.to_json_obj()
    if args.no_timings:
        records = _zero_seconds(records)
    _write_json(args.output, records)
    print(f"wrote {len(records)} records to {args.output}")
    return EXIT_OK


def cmd_calibrate_gamma(args) -> int:
    seed = _resolve_seed(args)
    cfg = _sim_config(args, seed, n=2)
    headline = calibrate_gamma(
        cfg,
        p_gamma=args.p_gamma,
        n_cal=args.n_cal,
        seed=seed,
        trim_fraction=args.hat_trim,
    )
    print(_format_float(headline))
    if args.output:
        payload = {
            "gamma": headline,
            "p_gamma": args.p_gamma,
            "n_cal": args.n_cal,
            "hat_trim": args.hat_trim,
            "seed": seed,
        }
        if args.at_taus:
            payload["fixed_tau_variant"] = [
                {
                    "tau": float(t),
                    "gamma": calibrate_gamma(
                        cfg,
                        p_gamma=args.p_gamma,
                        n_cal=args.n_cal,
                        seed=seed,
                        trim_fraction=args.hat_trim,
                        at_tau=float(t),
                    ),
                }
                for t in args.at_taus
            ]
        _write_json(args.output, payload)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    seed = _resolve_seed(args)
    sim_cfg = SimConfig(n=args.n, seed=seed)
    sample = generate(sim_cfg)
    data = sample.dataset.subset(hat_outlier_keep_indices(sample.dataset, 0.10))
    cfg = AnalysisConfig(
        gammas=tuple(args.gammas),
        n_resamples=args.resamples,
        seed=seed,
        nuisance=args.nuisance,
        baseline_mc=args.baseline_mc,
        workers=args.workers,
    )
    entries = benchmark_methods(data, cfg, m_values=(2, 3, 4))
    _write_json(args.output, {"n": data.n, "entries": entries})
    for entry in entries:
        print(
            f"{entry['method']:9s} m={entry['m']}  total={entry['seconds']['total']:.3f}s"
        )
    return EXIT_OK


def cmd_preprocess(args) -> int:
    header, table = read_table_csv(args.input)
    name_to_col = {name: i for i, name in enumerate(header)}

    def _col(name: str) -> int:
        if name not in name_to_col:
            raise ValidationError(f"column {name!r} not in header {header}")
        return name_to_col[name]

    t_col = _col(args.treatment_col)
    y_col = _col(args.outcome_col)
    if args.covariate_cols:
        cov_names = [c.strip() for c in args.covariate_cols.split(",") if c.strip()]
    else:
        cov_names = [h for h in header if h not in (args.treatment_col, args.outcome_col)]
    cov_cols = [_col(c) for c in cov_names]
    log_names = [c.strip() for c in args.log_cols.split(",") if c.strip()]
    for name in log_names:
        if name not in cov_names:
            raise ValidationError(f"log column {name!r} is not among the covariates")
    data = Dataset(table[:, cov_cols], table[:, t_col], table[:, y_col])
    processed, affine, keep = preprocess_dataset(
        data,
        log_x_columns=[cov_names.index(n) for n in log_names],
        log_x_labels=log_names,
        standardize=not args.no_standardize,
        hat_trim=args.hat_trim,
    )
    write_dataset_csv(args.output, processed)
    sidecar = {
        "input": args.input,
        "treatment_col": args.treatment_col,
        "outcome_col": args.outcome_col,
        "covariate_cols": cov_names,
        "log_cols": log_names,
        "rows_in": int(table.shape[0]),
        "rows_out": int(processed.n),
        "kept_indices": [int(i) for i in keep],
        "standardization": affine.to_json_obj() if affine is not None else None,
    }
    _write_json(args.output + ".json", sidecar)
    print(f"wrote {processed.n} rows to {args.output}")
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "sensitivity": cmd_sensitivity,
    "calibrate-gamma": cmd_calibrate_gamma,
    "benchmark": cmd_benchmark,
    "preprocess": cmd_preprocess,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config", default=None)
        pre_args, _ = pre.parse_known_args(argv)
        file_cfg = _load_config_file(pre_args.config)
        parser = build_parser(file_cfg)
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
