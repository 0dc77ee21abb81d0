"""Inverse probability of treatment weights over the last ``k + 1`` periods.

For unit ``i`` the weight is the product over ``j = 0..k`` of

    num_t / pi_t          if D_t = 1
    (1 - num_t) / (1 - pi_t)  if D_t = 0,       t = T - j,

with ``num = 1`` for unstabilized weights and the marginal probability
``P(D_t = 1 | past treatment)`` otherwise. Note the product includes the
final period ``T`` itself, so ``k = 0`` weights by the last treatment only.

Units without treatment variation have no fixed-effect estimate and hence no
propensity score; :func:`apply_trimming` decides what happens to them.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyWeightSet,
    KTooLarge,
    NonConstantBaseline,
    ProbabilityOutOfRange,
    ShapeMismatch,
    StrategyRequiresBounds,
)
from .panel_data import DesignMatrix, PanelDataset
from .ps_model import PsFit, get_link

STRATEGIES = ("none", "drop_units", "impute_ps", "clamp_alpha", "truncate")


@dataclass(frozen=True)
class Trimming:
    """How units without a propensity score, and extreme weights, are handled."""

    kind: str = "drop_units"
    eps: float = 0.01
    bounds: tuple[float, float] | None = None
    quantile: float = 0.99

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown trimming strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.kind == "impute_ps" and not 0 < self.eps < 0.5:
            raise ValueError(f"impute_ps needs eps in (0, 0.5), got {self.eps}")
        if self.kind == "truncate" and not 0.5 < self.quantile <= 1:
            raise ValueError(f"truncate needs quantile in (0.5, 1], got {self.quantile}")
        if self.bounds is not None:
            a0, a1 = self.bounds
            if not a0 < a1:
                raise ValueError(f"alpha bounds need a0 < a1, got {self.bounds}")

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def drop_units(cls):
        return cls("drop_units")

    @classmethod
    def impute_ps(cls, eps: float = 0.01):
        return cls("impute_ps", eps=eps)

    @classmethod
    def clamp_alpha(cls, a0: float | None = None, a1: float | None = None):
        return cls("clamp_alpha", bounds=None if a0 is None or a1 is None else (a0, a1))

    @classmethod
    def truncate(cls, quantile: float = 0.99):
        return cls("truncate", quantile=quantile)

    @property
    def label(self) -> str:
        if self.kind == "impute_ps":
            return f"impute_ps({self.eps:g})"
        if self.kind == "clamp_alpha" and self.bounds:
            return f"clamp_alpha({self.bounds[0]:g},{self.bounds[1]:g})"
        if self.kind == "truncate":
            return f"truncate({self.quantile:g})"
        return self.kind


@dataclass(frozen=True)
class WeightSpec:
    k: int = 3
    stabilized: bool = True
    trimming: Trimming = field(default_factory=Trimming)
    numerator_lags: int = 1

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.numerator_lags < 0:
            raise ValueError("numerator_lags must be non-negative")


@dataclass(frozen=True, eq=False)
class WeightSet:
    weights: np.ndarray
    included: np.ndarray
    diagnostics: dict
    strategy: str = "none"
    stabilized: bool = True
    k: int = 0
    unit_ids: tuple = ()

    @property
    def n_included(self) -> int:
        return int(self.included.sum())

    def to_csv(self, path) -> None:
        ids = self.unit_ids or tuple(range(1, self.weights.size + 1))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["unit_id", "weight", "included", "strategy"])
            for uid, w, inc in zip(ids, self.weights, self.included):
                out.writerow([uid, repr(float(w)) if inc else "", int(inc), self.strategy])

    @classmethod
    def from_csv(cls, path, unit_ids=None) -> "WeightSet":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        ids = tuple(r["unit_id"] for r in rows)
        included = np.array([r["included"].strip() in ("1", "True", "true") for r in rows])
        w = np.array([float(r["weight"]) if inc else np.nan for r, inc in zip(rows, included)])
        if unit_ids is not None:
            order = {str(u): j for j, u in enumerate(ids)}
            try:
                pos = [order[str(u)] for u in unit_ids]
            except KeyError as exc:
                raise ShapeMismatch(f"unit {exc.args[0]!r} has no weight in {path}") from None
            w, included, ids = w[pos], included[pos], tuple(unit_ids)
        strategy = rows[0]["strategy"] if rows else "none"
        return cls(w, included, weight_diagnostics(w, included), strategy=strategy, unit_ids=ids)


def effective_sample_size(weights) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2`` over included units."""
    if isinstance(weights, WeightSet):
        w = weights.weights[weights.included]
    else:
        w = np.asarray(weights, dtype=float)
        w = w[np.isfinite(w)]
    if w.size == 0 or not np.any(w > 0):
        raise EmptyWeightSet("no included units with positive weight")
    return float(w.sum() ** 2 / np.square(w).sum())


def weight_diagnostics(weights, included, n_imputed: int = 0, n_truncated: int = 0) -> dict:
    w = np.asarray(weights, dtype=float)[np.asarray(included, dtype=bool)]
    out = {
        "n_units": int(np.size(included)),
        "n_included": int(w.size),
        "n_dropped": int(np.size(included) - w.size),
        "n_imputed": int(n_imputed),
        "n_truncated": int(n_truncated),
    }
    if w.size:
        out.update(min=float(w.min()), max=float(w.max()), mean=float(w.mean()))
        out["ess"] = effective_sample_size(w) if np.any(w > 0) else 0.0
    else:
        out.update(min=math.nan, max=math.nan, mean=math.nan, ess=0.0)
    return out


def _tail(a, width: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ShapeMismatch(f"{name} must be a units x periods matrix")
    if a.shape[1] < width:
        raise KTooLarge(f"k + 1 = {width} periods requested but {name} covers only {a.shape[1]}")
    return a[:, a.shape[1] - width:]


def compute_weights(pi, pi_bar, treatment, spec: WeightSpec | None = None,
                    included=None, unit_ids=(), n_imputed: int = 0,
                    strategy: str = "none") -> WeightSet:
    """Weights from denominator ``pi`` and optional numerator ``pi_bar``.

    All matrices are aligned on their last column (period ``T``); they may
    cover different numbers of leading periods. Units with ``included`` false
    get a NaN weight. Stabilization is used iff ``spec.stabilized`` and
    ``pi_bar`` is given.
    """
    spec = spec or WeightSpec()
    width = spec.k + 1
    p = _tail(pi, width, "pi")
    d = _tail(treatment, width, "treatment")
    if d.shape[0] != p.shape[0]:
        raise ShapeMismatch("pi and treatment have different numbers of units")
    n = p.shape[0]
    inc = np.ones(n, dtype=bool) if included is None else np.asarray(included, dtype=bool).copy()
    if inc.shape != (n,):
        raise ShapeMismatch("inclusion mask must have one entry per unit")

    pin = p[inc]
    if not np.all((pin > 0) & (pin < 1)):
        bad = int(np.flatnonzero(inc)[np.flatnonzero(~np.all((pin > 0) & (pin < 1), axis=1))[0]])
        raise ProbabilityOutOfRange(
            f"propensity scores of included unit {unit_ids[bad] if unit_ids else bad} are not in (0, 1); "
            "trim or drop units without treatment variation first"
        )

    if spec.stabilized and pi_bar is not None:
        num = _tail(pi_bar, width, "pi_bar")
        if num.shape[0] != n:
            raise ShapeMismatch("pi_bar and pi have different numbers of units")
        if not np.all((num[inc] > 0) & (num[inc] < 1)):
            raise ProbabilityOutOfRange("stabilizing numerator outside (0, 1)")
        stabilized = True
    else:
        num = np.ones_like(p)
        stabilized = False

    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(d == 1, num / p, (1.0 - num) / (1.0 - p)) if stabilized \
            else np.where(d == 1, 1.0 / p, 1.0 / (1.0 - p))
    w = np.prod(ratio, axis=1)
    w[~inc] = np.nan
    return WeightSet(
        weights=w,
        included=inc,
        diagnostics=weight_diagnostics(w, inc, n_imputed=n_imputed),
        strategy=strategy,
        stabilized=stabilized,
        k=spec.k,
        unit_ids=tuple(unit_ids),
    )


def nearest_rank_quantile(values, q: float) -> float:
    """Smallest value with at least ``q`` of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise EmptyWeightSet("no weights to take a quantile of")
    rank = max(1, math.ceil(q * v.size - 1e-12))
    return float(v[rank - 1])


def truncate_weights(ws: WeightSet, q: float) -> WeightSet:
    """Cap included weights at their nearest-rank ``q`` quantile."""
    w = ws.weights.copy()
    cut = nearest_rank_quantile(w[ws.included], q)
    hit = ws.included & (w > cut)
    w[hit] = cut
    diag = weight_diagnostics(w, ws.included, ws.diagnostics.get("n_imputed", 0), int(hit.sum()))
    diag["truncation_cutoff"] = cut
    return WeightSet(w, ws.included.copy(), diag, strategy=f"truncate({q:g})",
                     stabilized=ws.stabilized, k=ws.k, unit_ids=ws.unit_ids)


@dataclass(frozen=True, eq=False)
class TrimmingResult:
    probabilities: np.ndarray
    included: np.ndarray
    report: dict


def apply_trimming(fit: PsFit, design: DesignMatrix, treatment, spec: WeightSpec | None = None) -> TrimmingResult:
    """Fill in or exclude units the propensity model could not identify.

    ``drop_units``, ``none`` and ``truncate`` exclude them (truncation itself
    happens after :func:`compute_weights`); ``impute_ps`` assigns ``eps`` or
    ``1 - eps``; ``clamp_alpha`` sets their intercept to the lower or upper
    bound and predicts from the design. Identified units keep their fitted
    probabilities.
    """
    spec = spec or WeightSpec()
    trim = spec.trimming
    d = np.asarray(treatment)
    if d.shape[1] == design.n_periods:
        d = d[:, design.t_offset:]
    probs = fit.fitted_probabilities
    if probs.shape != (design.n_units, design.n_periods_eff):
        probs = get_link(fit.link).cdf(fit.linear_predictor(design))
    probs = np.array(probs, dtype=float)
    ident = np.asarray(fit.identified, dtype=bool)
    always_treated = ~ident & (d.min(axis=1) == 1)
    always_control = ~ident & ~always_treated
    included = ident.copy()
    report = {"strategy": trim.label, "n_dropped": 0, "n_imputed": 0, "n_clamped": 0}

    if trim.kind == "impute_ps":
        probs[always_control] = trim.eps
        probs[always_treated] = 1.0 - trim.eps
        included[:] = True
        report["n_imputed"] = int((~ident).sum())
    elif trim.kind == "clamp_alpha":
        if trim.bounds is None:
            raise StrategyRequiresBounds("clamp_alpha needs bounds (a0, a1)")
        a0, a1 = trim.bounds
        alpha = np.where(always_control, a0, np.where(always_treated, a1, fit.alpha))
        eta = design.cube() @ fit.beta + alpha[:, None]
        clamped = ~ident
        probs[clamped] = get_link(fit.link).cdf(eta[clamped])
        included[:] = True
        report["n_clamped"] = int(clamped.sum())
    report["n_dropped"] = int((~included).sum())
    return TrimmingResult(probabilities=probs, included=included, report=report)


def balance_check(weights: WeightSet, data: PanelDataset, baseline) -> list[dict]:
    """Weighted standardized mean differences of time-constant characteristics.

    ``baseline`` is either a sequence of covariate names (which must be
    constant within unit) or a mapping from name to a length-N array.
    Treated means ``D_iT = 1``. The difference of weighted means is scaled by
    the unweighted standard deviation over all included units.
    """
    if isinstance(baseline, dict):
        cols = {k: np.asarray(v, dtype=float).reshape(-1) for k, v in baseline.items()}
    else:
        cols = {}
        for name in baseline:
            x = data.covariate(name)
            if np.any(x != x[:, :1]):
                raise NonConstantBaseline(f"covariate {name!r} varies within unit")
            cols[name] = x[:, 0]
    inc = weights.included
    w = weights.weights
    treated = data.treatment[:, -1] == 1
    out = []
    for name, z in cols.items():
        if z.shape != (data.n_units,):
            raise ShapeMismatch(f"baseline {name!r} must have one value per unit")
        t_mask, c_mask = inc & treated, inc & ~treated
        mt = float(np.sum(w[t_mask] * z[t_mask]) / np.sum(w[t_mask])) if t_mask.any() else math.nan
        mc = float(np.sum(w[c_mask] * z[c_mask]) / np.sum(w[c_mask])) if c_mask.any() else math.nan
        sd = float(np.std(z[inc], ddof=1)) if inc.sum() > 1 else 0.0
        diff = mt - mc
        if diff == 0:
            smd = 0.0
        elif sd > 0:
            smd = diff / sd
        else:
            smd = math.copysign(math.inf, diff) if not math.isnan(diff) else math.nan
        out.append({"column": name, "treated_mean": mt, "control_mean": mc, "pooled_sd": sd, "smd": smd})
    return out
