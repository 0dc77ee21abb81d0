"""Command-line front end.

Exit codes: 0 success, 1 runtime or estimation failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError, IptwFeError, SchemaMismatch
from .msm import HistoryTerm, MsmSpec, fit_iptw_pipeline, fit_msm_wls, paper_terms, weights_from_probabilities
from .panel_data import LagSpec, PanelSchema, build_design, load_panel_csv, validate
from .plot import write_svg
from .ps_model import PsFit, PsSpec, fit_fixed_effects_mle, fit_pooled_mle
from .sim import WORKERS_ENV, SimConfig, read_results_csv, run_study
from .weights import Trimming, WeightSet, WeightSpec, apply_trimming

TRIM_ALIASES = {
    "none": "none", "drop": "drop_units", "drop_units": "drop_units", "impute": "impute_ps",
    "impute_ps": "impute_ps", "clamp": "clamp_alpha", "clamp_alpha": "clamp_alpha", "truncate": "truncate",
}


class UsageError(ConfigError):
    pass


def _floats(text: str, count: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise UsageError(f"expected {count} comma-separated numbers, got {text!r}")
    return vals


# ---------------------------------------------------------------------------
# argument groups


def _add_schema(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("panel schema")
    g.add_argument("--data", required=True, help="long-format panel CSV")
    g.add_argument("--unit-col", default="unit")
    g.add_argument("--time-col", default="period")
    g.add_argument("--treat-col", default="treatment")
    g.add_argument("--outcome-col", default="outcome")
    g.add_argument("--covariates", default=None,
                   help="comma-separated covariate columns (default: every other column)")


def _add_ps(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("propensity model")
    g.add_argument("--method", choices=("fe", "pooled"), default="fe",
                   help="fe: unit fixed effects (IPTW-FE); pooled: common intercept (IPTW)")
    g.add_argument("--link", choices=("logit", "probit"), default="logit")
    g.add_argument("--treatment-lags", type=int, default=1)
    g.add_argument("--covariate-lags", type=int, default=0)
    g.add_argument("--presample-treatment", type=int, choices=(0, 1), default=None,
                   help="known treatment before period 1; keeps the early periods in the model")
    g.add_argument("--tol", type=float, default=1e-8)
    g.add_argument("--max-iter", type=int, default=100)


def _add_weights(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("weights")
    g.add_argument("--k", type=int, default=3, help="history length: periods T-k..T")
    g.add_argument("--trim", choices=sorted(TRIM_ALIASES), default="drop")
    g.add_argument("--eps", type=float, default=0.01, help="imputed propensity for --trim impute")
    g.add_argument("--alpha-bounds", default=None, help="a0,a1 for --trim clamp")
    g.add_argument("--quantile", type=float, default=0.99, help="upper quantile for --trim truncate")
    g.add_argument("--unstabilized", action="store_true", help="use 1 as the weight numerator")


def _add_msm(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("outcome model")
    g.add_argument("--term", action="append", default=None, metavar="NAME:LAGS",
                   help="history term, e.g. final:0 or cumulative:1,2,3 (repeatable)")
    g.add_argument("--no-intercept", action="store_true")
    g.add_argument("--level", type=float, default=0.90, help="confidence level")
    g.add_argument("--variance", choices=("HC2", "HC0", "sandwich"), default="HC2")


# ---------------------------------------------------------------------------
# spec builders


def _schema(args) -> PanelSchema:
    covs = None if args.covariates is None else tuple(c.strip() for c in args.covariates.split(",") if c.strip())
    return PanelSchema(unit=args.unit_col, period=args.time_col, treatment=args.treat_col,
                       outcome=args.outcome_col, covariates=covs)


def _lag_spec(args) -> LagSpec:
    try:
        return LagSpec(treatment_lags=args.treatment_lags, covariate_lags=args.covariate_lags,
                       presample_treatment=args.presample_treatment)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _ps_spec(args) -> PsSpec:
    try:
        return PsSpec(link=args.link, design=_lag_spec(args), tol=args.tol, max_iter=args.max_iter)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _weight_spec(args, numerator_lags: int = 1) -> WeightSpec:
    kind = TRIM_ALIASES[args.trim]
    try:
        if kind == "impute_ps":
            trim = Trimming.impute_ps(args.eps)
        elif kind == "clamp_alpha":
            bounds = _floats(args.alpha_bounds, 2) if args.alpha_bounds else (None, None)
            trim = Trimming.clamp_alpha(*bounds)
        elif kind == "truncate":
            trim = Trimming.truncate(args.quantile)
        else:
            trim = getattr(Trimming, kind)()
        return WeightSpec(k=args.k, stabilized=not args.unstabilized, trimming=trim,
                          numerator_lags=numerator_lags)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _msm_spec(args) -> MsmSpec:
    try:
        terms = paper_terms() if args.term is None else tuple(HistoryTerm.parse(t) for t in args.term)
        return MsmSpec(terms=terms, include_intercept=not args.no_intercept, ci_level=args.level,
                       variance=args.variance)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out_path(directory, name: str) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _design_meta(spec: PsSpec) -> dict:
    lag = spec.design
    return {"treatment_lags": lag.treatment_lags, "covariate_lags": lag.covariate_lags,
            "presample_treatment": lag.presample_treatment,
            "covariates": None if lag.covariates is None else list(lag.covariates)}


def _print_validation(data) -> None:
    rep = validate(data)
    c = rep.counts
    print(f"panel: {data.n_units} units x {data.n_periods} periods, "
          f"{c['all_treated']} always treated, {c['all_control']} never treated")


# ---------------------------------------------------------------------------
# commands


def cmd_fit_ps(args) -> int:
    data = load_panel_csv(args.data, _schema(args))
    spec = _ps_spec(args)
    design = build_design(data, spec.design)
    fitter = fit_fixed_effects_mle if args.method == "fe" else fit_pooled_mle
    fit = fitter(design, data.treatment, spec)
    out = args.out or _out_path(args.out_dir, "ps_fit.json")
    fit.to_json(out, design=_design_meta(spec), unit_ids=[str(u) for u in data.unit_ids])
    print(f"{fit.kind} {fit.link} propensity model: log-likelihood {fit.log_likelihood:.6f}, "
          f"{int(fit.identified.sum())} of {fit.n_units} units identified, {fit.n_iter} iterations")
    for name, b in zip(fit.column_names, fit.beta):
        print(f"  {name:<20}{b:>12.6f}")
    print(f"wrote {out}")
    return 0


def cmd_weights(args) -> int:
    data = load_panel_csv(args.data, _schema(args))
    with open(args.ps_fit, encoding="utf-8") as fh:
        payload = json.load(fh)
    meta = payload.get("design", {})
    lag = LagSpec(covariates=meta.get("covariates"), treatment_lags=meta.get("treatment_lags", 1),
                  covariate_lags=meta.get("covariate_lags", 0),
                  presample_treatment=meta.get("presample_treatment"))
    design = build_design(data, lag)
    fit = PsFit.from_dict(payload, design)
    spec = _weight_spec(args)
    trimmed = apply_trimming(fit, design, data.treatment, spec)
    ws = weights_from_probabilities(data, trimmed.probabilities, trimmed.included, spec,
                                    t_offset=design.t_offset, presample_treatment=lag.presample_treatment,
                                    n_imputed=trimmed.report["n_imputed"])
    out = args.out or _out_path(args.out_dir, "weights.csv")
    ws.to_csv(out)
    d = ws.diagnostics
    print(f"weights ({ws.strategy}): {ws.n_included} of {data.n_units} units, ESS {d['ess']:.1f}, "
          f"max {d['max']:.3f}")
    print(f"wrote {out}")
    return 0


def cmd_fit_msm(args) -> int:
    data = load_panel_csv(args.data, _schema(args))
    ws = WeightSet.from_csv(args.weights, unit_ids=[str(u) for u in data.unit_ids])
    fit = fit_msm_wls(data, ws, _msm_spec(args))
    out = args.out or _out_path(args.out_dir, "msm_fit.json")
    fit.to_json(out)
    print(fit.summary_table())
    print(f"wrote {out}")
    return 0


def cmd_fit(args) -> int:
    data = load_panel_csv(args.data, _schema(args))
    _print_validation(data)
    ps_spec = _ps_spec(args)
    fit = fit_iptw_pipeline(data, ps_spec, _weight_spec(args), _msm_spec(args),
                            method="fixed_effects" if args.method == "fe" else "pooled")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fit.ps_fit.to_json(out / "ps_fit.json", design=_design_meta(ps_spec),
                       unit_ids=[str(u) for u in data.unit_ids])
    fit.weight_set.to_csv(out / "weights.csv")
    fit.to_json(out / "msm_fit.json")
    table = fit.summary_table()
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    print(f"wrote ps_fit.json, weights.csv, msm_fit.json, summary.txt to {out}")
    return 0


_SIM_FLAG_TYPES = {"estimators": str, "beta": str, "gamma_out": str, "trimming": str, "variance": str}


def _add_sim_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration overrides (every config key)")
    for f in fields(SimConfig):
        if f.name == "master_seed":
            g.add_argument("--seed", "--master-seed", dest="master_seed", type=int, default=None)
            continue
        typ = _SIM_FLAG_TYPES.get(f.name) or type(f.default)
        flag = "--" + f.name.replace("_", "-")
        names = [flag, "--trim"] if f.name == "trimming" else [flag]
        g.add_argument(*names, dest=f.name, type=typ, default=None)


def cmd_simulate(args) -> int:
    config = SimConfig.from_file(args.config) if args.config else SimConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(SimConfig)}
    if overrides.get("trimming") is not None:
        overrides["trimming"] = TRIM_ALIASES.get(overrides["trimming"], overrides["trimming"])
    config = config.with_overrides(**overrides)
    result = run_study(config, workers=args.workers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.to_csv(out / f"{args.name}.csv")
    result.to_json(out / f"{args.name}.json")
    written = [f"{args.name}.csv", f"{args.name}.json"]
    if args.plot:
        write_svg(out / f"{args.name}.svg", result.tidy_rows(), nominal=config.ci_level)
        written.append(f"{args.name}.svg")
    print(f"n={config.n} rho={config.rho:g} T={config.n_periods} a={config.a:g} p={config.p} "
          f"reps={config.reps} seed={config.master_seed}")
    print(result.summary_table())
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def merge_results(paths) -> tuple[list[str], list[dict]]:
    """Concatenate tidy result CSVs; all inputs must share one header."""
    header, rows = None, []
    for path in paths:
        cols, part = read_results_csv(path)
        if header is None:
            header = cols
        elif cols != header:
            raise SchemaMismatch(f"{path} has columns {cols}, expected {header}")
        rows.extend(part)
    return header or [], rows


def _report_table(rows: list[dict]) -> str:
    keys = ("n", "rho", "a", "p", "trimming", "estimator", "estimand")
    metrics = ("bias", "sd", "mean_se", "coverage")
    cells: dict = {}
    for r in rows:
        cells.setdefault(tuple(r.get(k, "") for k in keys), {})[r["metric"]] = r["value"]
    width = {"trimming": 16, "estimator": 10}
    head = "".join(f"{k:<{width.get(k, 8)}}" for k in keys) + "".join(f"{m:>10}" for m in metrics)
    lines = [head]
    for key, vals in cells.items():
        nums = []
        for m in metrics:
            try:
                nums.append(f"{float(vals.get(m, 'nan')):>10.4f}")
            except ValueError:
                nums.append(f"{'':>10}")
        lines.append("".join(f"{str(v):<{width.get(k, 8)}}" for k, v in zip(keys, key)) + "".join(nums))
    return "\n".join(lines)


def cmd_report(args) -> int:
    header, rows = merge_results(args.results)
    required = {"estimator", "estimand", "metric", "value", "n", "rho"}
    missing = required - set(header)
    if missing:
        raise SchemaMismatch(f"results files lack columns {sorted(missing)}")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    if args.svg:
        Path(args.svg).parent.mkdir(parents=True, exist_ok=True)
        write_svg(args.svg, rows, nominal=args.level)
    print(_report_table(rows))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iptwfe", description=(
        "Inverse probability of treatment weighting with propensity-score fixed effects "
        "for marginal structural models on panel data."))
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit-ps", help="fit the propensity model and write ps_fit.json")
    _add_schema(p)
    _add_ps(p)
    p.add_argument("--out", default=None, help="output JSON path")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_fit_ps)

    p = sub.add_parser("weights", help="turn a propensity fit into per-unit weights")
    _add_schema(p)
    p.add_argument("--ps-fit", required=True, help="ps_fit.json written by fit-ps")
    _add_weights(p)
    p.add_argument("--out", default=None, help="output CSV path")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("fit-msm", help="weighted outcome regression given weights.csv")
    _add_schema(p)
    p.add_argument("--weights", required=True, help="weights.csv written by the weights command")
    _add_msm(p)
    p.add_argument("--out", default=None, help="output JSON path")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_fit_msm)

    p = sub.add_parser("fit", help="run the full two-step pipeline")
    _add_schema(p)
    _add_ps(p)
    _add_weights(p)
    _add_msm(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    p.add_argument("--config", default=None, help="JSON or key = value config file")
    _add_sim_overrides(p)
    p.add_argument("--workers", type=int, default=None,
                   help=f"parallel processes (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", default="results", help="output file stem")
    p.add_argument("--plot", action="store_true", help="also write an SVG figure")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="merge result CSVs and draw the summary grid")
    p.add_argument("results", nargs="+", help="CSV files written by simulate")
    p.add_argument("--out", default=None, help="merged CSV path")
    p.add_argument("--svg", default=None, help="SVG path")
    p.add_argument("--level", type=float, default=0.90, help="nominal coverage reference line")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"iptwfe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except IptwFeError as exc:
        print(f"iptwfe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"iptwfe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"iptwfe {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
