"""Monte Carlo study comparing IPTW-FE with true-propensity and pooled IPTW.

Data-generating process for unit ``i`` and period ``t = 1..T``::

    alpha_i ~ Uniform[-a, a]
    X_it    ~ N(-0.5 * 1, Sigma),  Sigma_jj = 1, Sigma_jk = sigma_offdiag
    D_it    ~ Bernoulli(expit(alpha_i + phi * D_i,t-1 + beta'X_it)),  D_i0 = 0
    Y_i     = alpha_i + tau_f D_iT + tau_c (D_i,T-3 + D_i,T-2 + D_i,T-1)
              + gamma'mean_t(X_it) + eps_i,  eps_i ~ N(0, 1)

Each replication is analysed by weighted least squares of ``Y`` on an
intercept, ``D_iT`` and the cumulative sum, using stabilized weights over
periods ``T-3..T`` from one of three propensity sources:

* ``IPTW-FE``: logit with unit fixed effects on ``(X_it, D_i,t-1)``;
* ``IPTW-T``: the true treatment probabilities;
* ``IPTW``: pooled logit on ``(1, X_it, D_i,t-1)``.

Random streams: replication ``r`` draws from
``numpy.random.Generator(PCG64(SeedSequence(master_seed, spawn_key=(r,))))``,
the same stream ``SeedSequence(master_seed).spawn(...)[r]`` would give, so a
replication's numbers do not depend on how replications are scheduled.
Within a replication the draw order is alpha, X, treatment uniforms, eps.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit

from .errors import InvalidConfig, IptwFeError, TooFewReplications
from .msm import MsmSpec, fit_msm_wls, normal_quantile, paper_terms
from .panel_data import LagSpec, PanelDataset, build_design
from .ps_model import PsSpec, fit_fixed_effects_mle, fit_marginal_model, fit_pooled_mle
from .weights import Trimming, WeightSpec, apply_trimming, compute_weights

ESTIMATORS = ("IPTW-FE", "IPTW-T", "IPTW")
ESTIMANDS = ("tau_F", "tau_C")
METRICS = ("bias", "sd", "mean_se", "coverage", "rmse", "n_success", "n_failed")
WORKERS_ENV = "IPTWFE_WORKERS"

_DEFAULT_BETA = {2: (-0.5, -0.5), 4: (-0.5, -0.5, 1.0, -0.5)}
_DEFAULT_GAMMA = {2: (1.0, 0.5), 4: (1.0, 0.5, 1.0, 1.0)}


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SimConfig:
    n: int = 500
    rho: float = 10.0
    a: float = 1.0
    p: int = 2
    phi: float = 0.3
    beta: tuple[float, ...] | None = None
    tau_f: float = 1.0
    tau_c: float = 0.3
    gamma_out: tuple[float, ...] | None = None
    sigma_offdiag: float = 0.2
    x_mean: float = -0.5
    reps: int = 500
    master_seed: int = 0
    estimators: tuple[str, ...] = ESTIMATORS
    ci_level: float = 0.90
    trimming: str = "drop_units"
    eps: float = 0.01
    variance: str = "HC2"
    burn_in: int = 0

    def __post_init__(self):
        def bad(msg):
            raise InvalidConfig(msg)

        try:
            n, p, reps = int(self.n), int(self.p), int(self.reps)
            rho, a = float(self.rho), float(self.a)
        except (TypeError, ValueError) as exc:
            bad(f"numeric field has a non-numeric value: {exc}")
        if n < 1 or n != self.n:
            bad(f"n must be a positive integer, got {self.n!r}")
        if not rho > 0:
            bad(f"rho must be positive, got {self.rho!r}")
        if a < 0:
            bad(f"a must be non-negative, got {self.a!r}")
        if p < 0 or p != self.p:
            bad(f"p must be a non-negative integer, got {self.p!r}")
        if reps < 1:
            bad(f"reps must be at least 1, got {self.reps!r}")
        t = self.n_periods
        min_t = 4 if self.burn_in == 0 else 5
        if t < min_t:
            bad(f"T = round(n / rho) = {t} < {min_t}; the weights need periods T-3..T")
        beta = self.beta if self.beta is not None else _DEFAULT_BETA.get(p)
        gamma = self.gamma_out if self.gamma_out is not None else _DEFAULT_GAMMA.get(p)
        if beta is None or gamma is None:
            bad(f"no default beta/gamma_out for p={p}; give both explicitly")
        beta, gamma = tuple(float(b) for b in beta), tuple(float(g) for g in gamma)
        if len(beta) != p or len(gamma) != p:
            bad(f"beta and gamma_out must have p={p} entries, got {len(beta)} and {len(gamma)}")
        if p > 1 and not -1 / (p - 1) < self.sigma_offdiag < 1:
            bad(f"sigma_offdiag={self.sigma_offdiag} does not give a positive definite covariance")
        ests = tuple(self.estimators.split(",")) if isinstance(self.estimators, str) else tuple(self.estimators)
        ests = tuple(e.strip() for e in ests)
        unknown = [e for e in ests if e not in ESTIMATORS]
        if unknown or not ests:
            bad(f"unknown estimator(s) {unknown}; choose from {ESTIMATORS}")
        if not 0 < self.ci_level < 1:
            bad("ci_level must be in (0, 1)")
        if self.trimming not in ("drop_units", "impute_ps"):
            bad(f"trimming must be drop_units or impute_ps, got {self.trimming!r}")
        if not 0 < self.eps < 0.5:
            bad("eps must be in (0, 0.5)")
        if self.variance not in ("HC2", "HC0", "sandwich"):
            bad(f"unknown variance flavor {self.variance!r}")
        if int(self.burn_in) < 0:
            bad("burn_in must be non-negative")
        seed = int(self.master_seed)
        if seed < 0 or seed >= 2 ** 64:
            bad("master_seed must be an unsigned 64-bit integer")
        for name, val in (("n", n), ("p", p), ("reps", reps), ("rho", rho), ("a", a), ("beta", beta),
                          ("gamma_out", gamma), ("estimators", ests), ("master_seed", seed),
                          ("burn_in", int(self.burn_in))):
            object.__setattr__(self, name, val)

    @property
    def n_periods(self) -> int:
        return int(math.floor(self.n / float(self.rho) + 0.5))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"], d["gamma_out"], d["estimators"] = list(self.beta), list(self.gamma_out), list(self.estimators)
        return d

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        aliases = {"seed": "master_seed", "T": None}
        clean = {}
        for key, val in mapping.items():
            key = aliases.get(key, key)
            if key is None:
                continue
            if key not in known:
                raise InvalidConfig(f"unknown configuration key {key!r}")
            if key in ("beta", "gamma_out") and isinstance(val, str):
                val = tuple(float(v) for v in val.split(","))
            if isinstance(val, list):
                val = tuple(val)
            clean[key] = val
        try:
            return cls(**clean)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        """JSON object, or ``key = value`` / ``key: value`` lines (``#`` comments)."""
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
        try:
            payload = json.loads(text)
        except json.JSONDecodeError:
            payload = {}
            for lineno, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                sep = "=" if "=" in line else ":"
                key, _, val = line.partition(sep)
                if not _:
                    raise InvalidConfig(f"{path}:{lineno}: expected key = value")
                val = val.strip()
                try:
                    payload[key.strip()] = json.loads(val)
                except json.JSONDecodeError:
                    payload[key.strip()] = val
        if not isinstance(payload, dict):
            raise InvalidConfig(f"{path} must hold a flat key/value mapping")
        return cls.from_mapping(payload)

    def with_overrides(self, **overrides) -> "SimConfig":
        merged = self.to_dict()
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return SimConfig.from_mapping(merged)


@dataclass(frozen=True, eq=False)
class TruthRecord:
    alpha: np.ndarray
    propensities: np.ndarray  # true P(D_it = 1) along the realized path, (N, T)
    initial_treatment: np.ndarray  # D_i0 feeding period 1
    tau_f: float
    tau_c: float
    beta: tuple[float, ...]
    phi: float


def replication_rng(master_seed: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(rep,))))


def covariate_cholesky(p: int, offdiag: float) -> np.ndarray:
    sigma = np.full((p, p), offdiag)
    np.fill_diagonal(sigma, 1.0)
    return np.linalg.cholesky(sigma) if p else np.zeros((0, 0))


def treatment_probability(alpha, d_prev, x, beta, phi) -> np.ndarray:
    """``expit(alpha + phi * d_prev + beta'x)`` (``x`` has covariates last)."""
    x = np.asarray(x, dtype=float)
    lin = np.asarray(alpha, dtype=float) + phi * np.asarray(d_prev, dtype=float)
    if x.shape[-1]:
        lin = lin + x @ np.asarray(beta, dtype=float)
    return expit(lin)


def generate_panel(config: SimConfig, rep=0) -> tuple[PanelDataset, TruthRecord]:
    """Draw one panel. ``rep`` is a replication index or a ``numpy`` Generator."""
    rng = rep if isinstance(rep, np.random.Generator) else replication_rng(config.master_seed, int(rep))
    n, t, p, b = config.n, config.n_periods, config.p, config.burn_in
    total = t + b
    beta = np.asarray(config.beta)

    alpha = rng.uniform(-config.a, config.a, size=n) if config.a > 0 else np.zeros(n)
    z = rng.standard_normal((n, total, p))
    x = config.x_mean + z @ covariate_cholesky(p, config.sigma_offdiag).T
    u = rng.random((n, total))
    d = np.zeros((n, total), dtype=np.int8)
    pi = np.zeros((n, total))
    prev = np.zeros(n)
    for s in range(total):
        pi[:, s] = treatment_probability(alpha, prev, x[:, s, :], beta, config.phi)
        d[:, s] = u[:, s] < pi[:, s]
        prev = d[:, s]
    eps = rng.standard_normal(n)

    initial = d[:, b - 1].copy() if b else np.zeros(n, dtype=np.int8)
    d, x, pi = d[:, b:], x[:, b:, :], pi[:, b:]
    y = (
        alpha
        + config.tau_f * d[:, -1]
        + config.tau_c * d[:, t - 4 : t - 1].sum(axis=1)
        + x.mean(axis=1) @ np.asarray(config.gamma_out)
        + eps
    )
    data = PanelDataset(
        treatment=d,
        covariates=x,
        outcome=y,
        covariate_names=tuple(f"x{j + 1}" for j in range(p)),
    )
    truth = TruthRecord(alpha, pi, initial, config.tau_f, config.tau_c, tuple(config.beta), config.phi)
    return data, truth


def true_propensities(truth: TruthRecord, data: PanelDataset) -> np.ndarray:
    """Recompute ``expit(alpha_i + phi D_i,t-1 + beta'X_it)`` along the observed path."""
    d = data.treatment.astype(float)
    prev = np.concatenate([np.asarray(truth.initial_treatment, dtype=float)[:, None], d[:, :-1]], axis=1)
    return treatment_probability(truth.alpha[:, None], prev, data.covariates, truth.beta, truth.phi)


def heterogeneity_share(data: PanelDataset, truth: TruthRecord) -> float:
    """Share of the treatment linear predictor's variance due to ``alpha_i``."""
    d = data.treatment.astype(float)
    prev = np.concatenate([np.asarray(truth.initial_treatment, dtype=float)[:, None], d[:, :-1]], axis=1)
    rest = truth.phi * prev
    if data.n_covariates:
        rest = rest + data.covariates @ np.asarray(truth.beta)
    lin = truth.alpha[:, None] + rest
    return float(np.var(np.broadcast_to(truth.alpha[:, None], lin.shape)) / np.var(lin))


def unit_experiment_panel(n_units: int, n_periods: int, rng: np.random.Generator, a: float = 1.0,
                          tau: float = 1.0) -> tuple[PanelDataset, np.ndarray, np.ndarray]:
    """Unit-specific randomized experiments without covariates.

    ``D_it ~ Bernoulli(expit(alpha_i))`` independently over ``t`` with
    ``alpha_i ~ Uniform[-a, a]``; the outcome depends on the last period only,
    ``Y_i = alpha_i + tau D_iT + eps_i``, so ``alpha_i`` confounds the naive
    contrast. Returns the panel, ``alpha`` and the true ``pi_i``.
    """
    alpha = rng.uniform(-a, a, size=n_units)
    pi = expit(alpha)
    d = (rng.random((n_units, n_periods)) < pi[:, None]).astype(np.int8)
    y = alpha + tau * d[:, -1] + rng.standard_normal(n_units)
    data = PanelDataset(treatment=d, covariates=np.zeros((n_units, n_periods, 0)), outcome=y)
    return data, alpha, pi


# ---------------------------------------------------------------------------
# one replication


def _msm_spec(config: SimConfig) -> MsmSpec:
    return MsmSpec(terms=paper_terms(), include_intercept=True, ci_level=config.ci_level,
                   variance=config.variance)


def analyse_panel(data: PanelDataset, truth: TruthRecord, config: SimConfig) -> dict:
    """Estimates and standard errors for each requested estimator.

    Returns ``{estimator: (tau_F, se_F, tau_C, se_C)}``; a failed estimator
    maps to the error message instead.
    """
    presample = 0 if config.burn_in == 0 else None
    lag_spec = LagSpec(treatment_lags=1, presample_treatment=presample)
    ps_spec = PsSpec(link="logit", design=lag_spec)
    trim = Trimming.impute_ps(config.eps) if config.trimming == "impute_ps" else Trimming.drop_units()
    wspec = WeightSpec(k=3, stabilized=True, trimming=trim, numerator_lags=1)
    mspec = _msm_spec(config)
    out: dict = {}

    try:
        design = build_design(data, lag_spec)
        numerator = fit_marginal_model(data.treatment, 1, t_offset=design.t_offset,
                                       presample_treatment=presample).fitted_probabilities
    except IptwFeError as exc:
        return {e: f"numerator: {exc}" for e in config.estimators}

    def finish(pi, included, n_imputed=0):
        ws = compute_weights(pi, numerator, data.treatment, wspec, included=included, n_imputed=n_imputed)
        fit = fit_msm_wls(data, ws, mspec)
        return (fit.coef("final"), fit.se("final"), fit.coef("cumulative"), fit.se("cumulative"))

    for est in config.estimators:
        try:
            if est == "IPTW-FE":
                ps = fit_fixed_effects_mle(design, data.treatment, ps_spec)
                tr = apply_trimming(ps, design, data.treatment, wspec)
                out[est] = finish(tr.probabilities, tr.included, tr.report["n_imputed"])
            elif est == "IPTW":
                ps = fit_pooled_mle(design, data.treatment, ps_spec)
                out[est] = finish(ps.fitted_probabilities, None)
            else:
                out[est] = finish(truth.propensities, None)
        except IptwFeError as exc:
            out[est] = f"{type(exc).__name__}: {exc}"
    return out


def run_replication(config: SimConfig, rep: int) -> tuple[np.ndarray, list]:
    """``(values, errors)``; ``values`` has shape ``(E, 2, 2)`` = (estimator, estimand, [est, se])."""
    data, truth = generate_panel(config, rep)
    res = analyse_panel(data, truth, config)
    values = np.full((len(config.estimators), 2, 2), np.nan)
    errors = []
    for e, est in enumerate(config.estimators):
        r = res[est]
        if isinstance(r, str):
            errors.append((rep, est, r))
            continue
        values[e] = [[r[0], r[1]], [r[2], r[3]]]
    return values, errors


def _run_one(args):
    config, rep = args
    return run_replication(config, rep)


# ---------------------------------------------------------------------------
# aggregation


def summarize(estimates, std_errors, truth: float, ci_level: float = 0.90) -> dict:
    """Bias, SD (``reps - 1`` denominator), mean SE, RMSE and normal-CI coverage.

    Non-finite entries (failed replications) are skipped.
    """
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(std_errors, dtype=float)
    ok = np.isfinite(est) & np.isfinite(se)
    est, se = est[ok], se[ok]
    if est.size < 2:
        raise TooFewReplications(f"need at least 2 successful replications, have {est.size}")
    z = normal_quantile(ci_level)
    hits = (est - z * se <= truth) & (truth <= est + z * se)
    return {
        "bias": float(est.mean() - truth),
        "sd": float(est.std(ddof=1)),
        "mean_se": float(se.mean()),
        "coverage": float(hits.mean()),
        "rmse": float(np.sqrt(np.mean((est - truth) ** 2))),
        "n_success": int(est.size),
    }


def coverage(hits) -> float:
    return float(np.mean(np.asarray(hits, dtype=float)))


@dataclass(frozen=True, eq=False)
class SimResult:
    config: SimConfig
    estimates: np.ndarray  # (reps, E, 2, 2)
    rows: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    failure_messages: list = field(default_factory=list)

    @property
    def estimators(self) -> tuple[str, ...]:
        return self.config.estimators

    def row(self, estimator: str, estimand: str) -> dict:
        for r in self.rows:
            if r["estimator"] == estimator and r["estimand"] == estimand:
                return r
        raise KeyError((estimator, estimand))

    def scenario(self) -> dict:
        c = self.config
        return {"n": c.n, "rho": c.rho, "T": c.n_periods, "a": c.a, "p": c.p, "trimming": c.trimming}

    def tidy_rows(self) -> list[dict]:
        out = []
        for r in self.rows:
            for metric in METRICS:
                out.append({**self.scenario(), "estimator": r["estimator"], "estimand": r["estimand"],
                            "metric": metric, "value": r[metric]})
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        rows = self.tidy_rows()
        cols = list(self.scenario()) + ["estimator", "estimand", "metric", "value"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def to_json(self, path=None) -> str:
        payload = {
            "config": self.config.to_dict(),
            "T": self.config.n_periods,
            "summary": [{k: _clean(v) for k, v in r.items()} for r in self.rows],
            "failures": self.failures,
            "failure_messages": [list(m) for m in self.failure_messages[:50]],
            "estimates": {
                est: {
                    estimand: {
                        "estimate": [_clean(v) for v in self.estimates[:, e, j, 0]],
                        "std_error": [_clean(v) for v in self.estimates[:, e, j, 1]],
                    }
                    for j, estimand in enumerate(ESTIMANDS)
                }
                for e, est in enumerate(self.estimators)
            },
        }
        text = json.dumps(payload, indent=1)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    def summary_table(self) -> str:
        head = f"{'estimator':<10}{'estimand':<9}{'bias':>9}{'sd':>9}{'mean_se':>9}{'coverage':>10}{'ok':>6}{'fail':>6}"
        lines = [head]
        for r in self.rows:
            lines.append(
                f"{r['estimator']:<10}{r['estimand']:<9}{r['bias']:>9.4f}{r['sd']:>9.4f}"
                f"{r['mean_se']:>9.4f}{r['coverage']:>10.3f}{r['n_success']:>6d}{r['n_failed']:>6d}"
            )
        return "\n".join(lines)


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def run_study(config: SimConfig, workers: int | None = None) -> SimResult:
    """Run ``config.reps`` replications and aggregate per estimator and estimand.

    Output is identical for any ``workers``: every replication owns its random
    stream and results are gathered in replication order.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(config, r) for r in range(config.reps)]
    if workers == 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs, chunksize=max(1, config.reps // (4 * workers))))
    values = np.stack([r[0] for r in results])
    messages = [m for r in results for m in r[1]]
    truth = (config.tau_f, config.tau_c)
    rows, failures = [], {}
    for e, est in enumerate(config.estimators):
        failed = int(np.sum(~np.isfinite(values[:, e, 0, 0])))
        failures[est] = failed
        for j, estimand in enumerate(ESTIMANDS):
            try:
                s = summarize(values[:, e, j, 0], values[:, e, j, 1], truth[j], config.ci_level)
            except TooFewReplications:
                s = {"bias": math.nan, "sd": math.nan, "mean_se": math.nan, "coverage": math.nan,
                     "rmse": math.nan, "n_success": int(np.sum(np.isfinite(values[:, e, j, 0])))}
            rows.append({"estimator": est, "estimand": estimand, **s, "n_failed": failed})
    return SimResult(config=config, estimates=values, rows=rows, failures=failures,
                     failure_messages=messages)


def read_results_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


__all__ = [
    "ESTIMATORS", "ESTIMANDS", "SimConfig", "SimResult", "TruthRecord", "generate_panel",
    "true_propensities", "run_study", "run_replication", "summarize", "coverage",
    "heterogeneity_share", "replication_rng", "treatment_probability", "unit_experiment_panel",
]
