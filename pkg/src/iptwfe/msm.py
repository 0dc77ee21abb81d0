"""Marginal structural model fitting by weighted estimating equations.

The MSM is linear in features of the treatment history over periods
``T-k..T``: each :class:`HistoryTerm` is the sum of ``D_{T-j}`` over its lag
set. With ``h`` equal to the regressor vector the estimating equation
``sum_i W_i h_i (Y_i - h_i'gamma) = 0`` is weighted least squares.
"""
from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .errors import (
    DegeneratePropensity,
    IptwFeError,
    KTooLarge,
    LeverageOne,
    MissingOutcome,
    NoControlAtT,
    NoTreatedAtT,
    RankDeficient,
    ShapeMismatch,
    SingularBread,
    TooFewUnits,
)
from .panel_data import PanelDataset, build_design
from .ps_model import PsFit, PsSpec, fit_fixed_effects_mle, fit_marginal_model, fit_pooled_mle
from .weights import WeightSet, WeightSpec, apply_trimming, compute_weights, truncate_weights

RANK_TOL = 1e-10
VARIANCE_FLAVORS = ("HC2", "HC0", "sandwich")


@dataclass(frozen=True)
class HistoryTerm:
    """``sum_{j in lags} D_{i,T-j}``; ``lags=(0,)`` is the final-period treatment."""

    name: str
    lags: tuple[int, ...]

    def __post_init__(self):
        lags = tuple(int(j) for j in self.lags)
        if not lags or min(lags) < 0 or len(set(lags)) != len(lags):
            raise ValueError(f"term {self.name!r} needs distinct non-negative lags, got {self.lags}")
        object.__setattr__(self, "lags", lags)

    @classmethod
    def parse(cls, text: str) -> "HistoryTerm":
        """``"name:0"`` or ``"cumulative:1,2,3"``."""
        name, _, lags = text.partition(":")
        if not name or not lags:
            raise ValueError(f"term must look like name:lag[,lag...], got {text!r}")
        return cls(name.strip(), tuple(int(v) for v in lags.split(",")))


def paper_terms() -> tuple[HistoryTerm, ...]:
    """Final-period effect plus the cumulative effect of periods T-3..T-1."""
    return (HistoryTerm("final", (0,)), HistoryTerm("cumulative", (1, 2, 3)))


@dataclass(frozen=True)
class MsmSpec:
    terms: tuple[HistoryTerm, ...] = field(default_factory=paper_terms)
    include_intercept: bool = True
    ci_level: float = 0.90
    variance: str = "HC2"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms and not self.include_intercept:
            raise ValueError("MSM needs at least one term")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must be in (0, 1)")
        if self.variance not in VARIANCE_FLAVORS:
            raise ValueError(f"variance must be one of {VARIANCE_FLAVORS}")
        names = self.term_names
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate term names {names}")

    @property
    def term_names(self) -> tuple[str, ...]:
        return (("intercept",) if self.include_intercept else ()) + tuple(t.name for t in self.terms)

    @property
    def max_lag(self) -> int:
        return max((max(t.lags) for t in self.terms), default=0)


def history_features(treatment, spec: MsmSpec) -> np.ndarray:
    """Regressor matrix ``h_i`` (intercept first when requested)."""
    d = np.asarray(treatment, dtype=float)
    t = d.shape[1]
    if spec.max_lag >= t:
        raise KTooLarge(f"MSM term uses lag {spec.max_lag} but the panel has {t} periods")
    cols = [np.ones(d.shape[0])] if spec.include_intercept else []
    for term in spec.terms:
        cols.append(d[:, [t - 1 - j for j in term.lags]].sum(axis=1))
    return np.column_stack(cols)


class LinearIdentity:
    """``g(h; gamma) = h'gamma``; the variance code only needs ``mean`` and ``jacobian``."""

    def mean(self, h, gamma):
        return h @ gamma

    def jacobian(self, h, gamma):
        return h


def wls(h, y, w):
    """Weighted least squares via column-pivoted QR of ``sqrt(w) h``.

    Returns ``(gamma, q)`` with ``q`` the orthonormal factor (leverages are
    its squared row norms). Raises :class:`RankDeficient` when
    ``|R_jj| <= 1e-10 |R_00|`` for some ``j``.
    """
    sw = np.sqrt(w)
    a = h * sw[:, None]
    q, r, piv = linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0 or np.any(diag <= RANK_TOL * diag[0]):
        rank = int(np.sum(diag > RANK_TOL * (diag[0] if diag.size else 0)))
        raise RankDeficient(f"MSM design has rank {rank} < {h.shape[1]} on the included units")
    z = linalg.solve_triangular(r, q.T @ (y * sw))
    gamma = np.empty_like(z)
    gamma[piv] = z
    return gamma, q


def leverages(h, w) -> np.ndarray:
    """Diagonal of the weighted hat matrix ``W^1/2 H (H'WH)^-1 H' W^1/2``."""
    _, q = wls(h, np.zeros(h.shape[0]), w)
    return np.einsum("ij,ij->i", q, q)


def _bread_inv(h, w):
    xtwx = (h * w[:, None]).T @ h
    try:
        inv = linalg.inv(xtwx)
    except linalg.LinAlgError as exc:
        raise SingularBread(str(exc)) from exc
    if not np.all(np.isfinite(inv)) or np.linalg.cond(xtwx) > 1 / RANK_TOL ** 2:
        raise SingularBread("derivative of the estimating equation is not invertible")
    return inv


def sandwich_variance(h, residuals, w, model=None, gamma=None) -> np.ndarray:
    """``G^-1 Omega G^-1 / N`` for ``U_i = w_i h_i (y_i - g_i)``.

    ``G = N^-1 sum dU_i/dgamma = -N^-1 sum w_i h_i dg_i'`` and
    ``Omega = N^-1 sum U_i U_i'``; the result is the variance of ``gamma``
    itself. For the linear model this equals HC0.
    """
    h = np.asarray(h, dtype=float)
    e = np.asarray(residuals, dtype=float)
    w = np.asarray(w, dtype=float)
    n = h.shape[0]
    jac = h if model is None else model.jacobian(h, gamma)
    g = -(h * w[:, None]).T @ jac / n
    u = h * (w * e)[:, None]
    omega = u.T @ u / n
    try:
        g_inv = linalg.inv(g)
    except linalg.LinAlgError as exc:
        raise SingularBread(str(exc)) from exc
    if not np.all(np.isfinite(g_inv)) or np.linalg.cond(g) > 1 / RANK_TOL ** 2:
        raise SingularBread("derivative of the estimating equation is not invertible")
    v = g_inv @ omega @ g_inv.T / n
    return (v + v.T) / 2


def hc0_variance(h, residuals, w) -> np.ndarray:
    b = _bread_inv(h, w)
    u = h * (w * residuals)[:, None]
    v = b @ (u.T @ u) @ b
    return (v + v.T) / 2


def hc2_variance(h, residuals, w, lev=None) -> np.ndarray:
    """HC2: each squared score is inflated by ``1 / (1 - leverage)``."""
    h = np.asarray(h, dtype=float)
    w = np.asarray(w, dtype=float)
    e = np.asarray(residuals, dtype=float)
    lev = leverages(h, w) if lev is None else lev
    if np.any(lev >= 1 - 1e-10):
        i = int(np.argmax(lev))
        raise LeverageOne(f"unit {i} has leverage {lev[i]:.12g}; HC2 is undefined")
    b = _bread_inv(h, w)
    u = h * (w * e / np.sqrt(1 - lev))[:, None]
    v = b @ (u.T @ u) @ b
    return (v + v.T) / 2


@dataclass(frozen=True, eq=False)
class MsmFit:
    term_names: tuple[str, ...]
    gamma_hat: np.ndarray
    vcov: np.ndarray
    std_errors: np.ndarray
    conf_int: np.ndarray
    ci_level: float
    variance: str
    n_effective: int
    n_units: int
    ee_residual: float
    weight_diagnostics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    ps_fit: PsFit | None = None
    weight_set: WeightSet | None = None

    def coef(self, name: str) -> float:
        return float(self.gamma_hat[self.term_names.index(name)])

    def se(self, name: str) -> float:
        return float(self.std_errors[self.term_names.index(name)])

    def to_dict(self) -> dict:
        return {
            "terms": [
                {
                    "term": name,
                    "estimate": float(est),
                    "std_error": float(se),
                    "ci_low": float(lo),
                    "ci_high": float(hi),
                }
                for name, est, se, (lo, hi) in zip(self.term_names, self.gamma_hat, self.std_errors, self.conf_int)
            ],
            "vcov": self.vcov.tolist(),
            "ci_level": self.ci_level,
            "variance": self.variance,
            "n_effective": self.n_effective,
            "n_units": self.n_units,
            "estimating_equation_residual": self.ee_residual,
            "weight_diagnostics": _jsonable(self.weight_diagnostics),
            "provenance": _jsonable(self.provenance),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    def summary_table(self) -> str:
        pct = f"{100 * self.ci_level:g}%"
        lines = [
            f"{'term':<14}{'estimate':>12}{'std.err':>12}{pct + ' low':>12}{pct + ' high':>12}",
        ]
        for name, est, se, (lo, hi) in zip(self.term_names, self.gamma_hat, self.std_errors, self.conf_int):
            lines.append(f"{name:<14}{est:>12.4f}{se:>12.4f}{lo:>12.4f}{hi:>12.4f}")
        lines.append(f"units used: {self.n_effective} of {self.n_units}   variance: {self.variance}")
        return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def normal_quantile(level: float) -> float:
    return float(stats.norm.ppf(0.5 + level / 2))


def fit_msm_wls(data: PanelDataset, weights: WeightSet, spec: MsmSpec | None = None) -> MsmFit:
    """Solve the weighted estimating equation on the included units."""
    spec = spec or MsmSpec()
    if weights.weights.shape != (data.n_units,):
        raise ShapeMismatch(f"{weights.weights.size} weights for {data.n_units} units")
    inc = weights.included
    h = history_features(data.treatment, spec)[inc]
    y = data.outcome[inc]
    w = weights.weights[inc]
    if not np.all(np.isfinite(y)):
        raise MissingOutcome("outcome is missing for some included units")
    j = h.shape[1]
    if h.shape[0] < j + 1:
        raise TooFewUnits(f"{h.shape[0]} included units for {j} MSM parameters")

    gamma, q = wls(h, y, w)
    e = y - h @ gamma
    ee = float(np.max(np.abs((h * (w * e)[:, None]).sum(axis=0))) / h.shape[0])
    if spec.variance == "HC2":
        vcov = hc2_variance(h, e, w, lev=np.einsum("ij,ij->i", q, q))
    elif spec.variance == "HC0":
        vcov = hc0_variance(h, e, w)
    else:
        vcov = sandwich_variance(h, e, w, LinearIdentity(), gamma)
    se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
    z = normal_quantile(spec.ci_level)
    ci = np.column_stack([gamma - z * se, gamma + z * se])
    return MsmFit(
        term_names=spec.term_names,
        gamma_hat=gamma,
        vcov=vcov,
        std_errors=se,
        conf_int=ci,
        ci_level=spec.ci_level,
        variance=spec.variance,
        n_effective=int(inc.sum()),
        n_units=data.n_units,
        ee_residual=ee,
        weight_diagnostics=dict(weights.diagnostics),
        weight_set=weights,
    )


@dataclass(frozen=True)
class SimpleEstimate:
    tau_hat: float
    std_error: float
    tau1: float
    tau0: float
    variance: float  # plug-in V = mean(U_i^2); Var(tau_hat) ~ V / N
    n_units: int


def simple_estimator(data: PanelDataset, propensities) -> SimpleEstimate:
    """Ratio (Hajek) IPW contrast of the final-period treatment.

    ``propensities`` holds one treatment probability per unit, typically the
    unit's share of treated periods. The standard error uses the plug-in
    influence function ``U_i = D_iT/pi_i (Y_i - tau1) - (1 - D_iT)/(1 - pi_i) (Y_i - tau0)``.
    """
    pi = np.asarray(propensities, dtype=float).reshape(-1)
    if pi.shape != (data.n_units,):
        raise ShapeMismatch(f"{pi.size} propensities for {data.n_units} units")
    if not np.all((pi > 0) & (pi < 1)):
        raise DegeneratePropensity("propensities must lie strictly in (0, 1); trim degenerate units first")
    d = data.treatment[:, -1].astype(float)
    y = data.outcome
    if not np.all(np.isfinite(y)):
        raise MissingOutcome("outcome has missing values")
    if d.sum() == 0:
        raise NoTreatedAtT("no unit is treated in the final period")
    if d.sum() == d.size:
        raise NoControlAtT("no unit is untreated in the final period")
    w1 = d / pi
    w0 = (1 - d) / (1 - pi)
    tau1 = float(np.sum(w1 * y) / np.sum(w1))
    tau0 = float(np.sum(w0 * y) / np.sum(w0))
    u = w1 * (y - tau1) - w0 * (y - tau0)
    v = float(np.mean(u * u))
    return SimpleEstimate(tau1 - tau0, math.sqrt(v / d.size), tau1, tau0, v, int(d.size))


@contextmanager
def _stage(name: str):
    try:
        yield
    except IptwFeError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


def weights_from_probabilities(data: PanelDataset, pi, included, weight_spec: WeightSpec,
                               t_offset: int = 0, presample_treatment: int | None = None,
                               n_imputed: int = 0) -> WeightSet:
    """Stabilize (if requested), build and optionally truncate weights."""
    numerator = None
    if weight_spec.stabilized:
        with _stage("numerator"):
            numerator = fit_marginal_model(
                data.treatment, weight_spec.numerator_lags, t_offset=t_offset,
                presample_treatment=presample_treatment,
            ).fitted_probabilities
    with _stage("weights"):
        ws = compute_weights(pi, numerator, data.treatment, weight_spec, included=included,
                             unit_ids=data.unit_ids, n_imputed=n_imputed,
                             strategy=weight_spec.trimming.label)
        if weight_spec.trimming.kind == "truncate":
            ws = truncate_weights(ws, weight_spec.trimming.quantile)
    return ws


def fit_iptw_pipeline(data: PanelDataset, ps_spec: PsSpec | None = None,
                      weight_spec: WeightSpec | None = None, msm_spec: MsmSpec | None = None,
                      method: str = "fixed_effects") -> MsmFit:
    """Propensity model, trimming, weights and MSM in one call.

    ``method="fixed_effects"`` is IPTW-FE; ``"pooled"`` drops the unit
    intercepts (standard IPTW). Errors keep their type and carry the failing
    stage in ``exc.stage``.
    """
    ps_spec = ps_spec or PsSpec()
    weight_spec = weight_spec or WeightSpec()
    msm_spec = msm_spec or MsmSpec()
    if msm_spec.max_lag > weight_spec.k:
        raise KTooLarge(f"MSM term uses lag {msm_spec.max_lag} but weights only cover k={weight_spec.k}")
    if method not in ("fixed_effects", "pooled"):
        raise ValueError(f"unknown method {method!r}")

    with _stage("design"):
        design = build_design(data, ps_spec.design)
    with _stage("propensity"):
        if method == "fixed_effects":
            ps = fit_fixed_effects_mle(design, data.treatment, ps_spec)
        else:
            ps = fit_pooled_mle(design, data.treatment, ps_spec)
    with _stage("trimming"):
        trimmed = apply_trimming(ps, design, data.treatment, weight_spec)
    ws = weights_from_probabilities(
        data, trimmed.probabilities, trimmed.included, weight_spec,
        t_offset=design.t_offset, presample_treatment=ps_spec.design.presample_treatment,
        n_imputed=trimmed.report["n_imputed"],
    )
    with _stage("msm"):
        fit = fit_msm_wls(data, ws, msm_spec)
    provenance = {
        "method": method,
        "link": ps.link,
        "ps_columns": list(ps.column_names),
        "ps_beta": [float(b) for b in ps.beta],
        "ps_log_likelihood": ps.log_likelihood,
        "ps_grad_norm": ps.grad_norm,
        "ps_iterations": ps.n_iter,
        "n_identified": int(ps.identified.sum()),
        "trimming": trimmed.report,
        "k": weight_spec.k,
        "stabilized": ws.stabilized,
    }
    return MsmFit(**{**fit.__dict__, "provenance": provenance, "ps_fit": ps})


def fit_iptw_fe_pipeline(data: PanelDataset, ps_spec: PsSpec | None = None,
                         weight_spec: WeightSpec | None = None,
                         msm_spec: MsmSpec | None = None) -> MsmFit:
    """Two-step IPTW-FE: fixed-effects propensity MLE, then weighted MSM."""
    return fit_iptw_pipeline(data, ps_spec, weight_spec, msm_spec, method="fixed_effects")
