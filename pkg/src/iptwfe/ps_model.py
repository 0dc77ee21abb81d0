"""Binary propensity score models fitted by maximum likelihood.

Three fits share one solver:

* :func:`fit_fixed_effects_mle` -- ``P(D_it = 1) = F(v_it'beta + alpha_i)``
  with a free intercept per unit (units without treatment variation are not
  identified and are left out of the likelihood);
* :func:`fit_pooled_mle` -- the same model with one common intercept;
* :func:`fit_marginal_model` -- a pooled logit of treatment on its own lags,
  used as the numerator of stabilized weights.

The solver profiles out the intercepts. Given ``beta`` each intercept solves a
strictly concave one-dimensional problem (vectorised Newton across units);
the outer loop takes Newton steps on the profile log-likelihood in ``beta``,
halving the step until the profile likelihood does not decrease. Because the
inner problems are solved exactly, the profile gradient is the ordinary
``beta`` score and the profile Hessian is the ``beta`` block of the full
Hessian with the intercepts partialled out, i.e.
``-sum_it w_it (v_it - vbar_i)(v_it - vbar_i)'`` with ``vbar_i`` the
``w``-weighted unit mean of ``v``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .errors import (
    MaxIterations,
    NoVariationAnywhere,
    SeparationDetected,
    ShapeMismatch,
)
from .panel_data import DesignMatrix, LagSpec, PanelDataset, build_design

SEPARATION_BOUND = 30.0
STEP_TOL = 1e-6


class Link:
    """Symmetric CDF link. ``q = 2d - 1`` turns every quantity into a function of ``q * eta``."""

    name = ""

    def cdf(self, eta):
        raise NotImplementedError

    def ppf(self, p):
        raise NotImplementedError

    def loglik(self, eta, d):
        raise NotImplementedError

    def score(self, eta, d):
        """d loglik / d eta."""
        raise NotImplementedError

    def curvature(self, eta, d):
        """-d^2 loglik / d eta^2 (positive)."""
        raise NotImplementedError


class LogitLink(Link):
    name = "logit"

    def cdf(self, eta):
        return special.expit(eta)

    def ppf(self, p):
        return special.logit(p)

    def loglik(self, eta, d):
        return special.log_expit((2 * d - 1) * eta)

    def score(self, eta, d):
        return d - special.expit(eta)

    def curvature(self, eta, d):
        p = special.expit(eta)
        return p * (1.0 - p)


class ProbitLink(Link):
    name = "probit"

    def cdf(self, eta):
        return special.ndtr(eta)

    def ppf(self, p):
        return special.ndtri(p)

    def loglik(self, eta, d):
        return special.log_ndtr((2 * d - 1) * eta)

    def _mills(self, u):
        # phi(u) / Phi(u), stable for very negative u
        return np.exp(-0.5 * u * u - 0.5 * np.log(2 * np.pi) - special.log_ndtr(u))

    def score(self, eta, d):
        q = 2 * d - 1
        return q * self._mills(q * eta)

    def curvature(self, eta, d):
        u = (2 * d - 1) * eta
        m = self._mills(u)
        return m * (u + m)


LINKS: dict[str, Link] = {"logit": LogitLink(), "probit": ProbitLink()}


def get_link(name: str) -> Link:
    try:
        return LINKS[name]
    except KeyError:
        raise ValueError(f"unknown link {name!r}; choose from {sorted(LINKS)}") from None


@dataclass(frozen=True)
class PsSpec:
    link: str = "logit"
    design: LagSpec = field(default_factory=LagSpec)
    max_iter: int = 100
    tol: float = 1e-8
    max_halving: int = 40
    inner_max_iter: int = 50
    alpha_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        get_link(self.link)
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1 or self.inner_max_iter < 1 or self.max_halving < 0:
            raise ValueError("iteration limits must be positive")
        if self.alpha_bounds is not None:
            a0, a1 = self.alpha_bounds
            if not a0 < a1:
                raise ValueError(f"alpha bounds need a0 < a1, got {self.alpha_bounds}")
            object.__setattr__(self, "alpha_bounds", (float(a0), float(a1)))


@dataclass(frozen=True, eq=False)
class PsFit:
    """A fitted propensity model on the ``(N, T_eff)`` grid of its design.

    ``alpha[i]`` is NaN and ``fitted_probabilities[i]`` all-NaN for units that
    are not identified (no treatment variation over the modelled periods).
    """

    kind: str
    link: str
    beta: np.ndarray
    alpha: np.ndarray
    identified: np.ndarray
    log_likelihood: float
    grad_norm: float
    fitted_probabilities: np.ndarray
    column_names: tuple[str, ...] = ()
    t_offset: int = 0
    n_iter: int = 0
    converged: bool = True
    history: tuple[float, ...] = ()
    tol: float = 1e-8
    alpha_at_bound: np.ndarray | None = None

    @property
    def n_units(self) -> int:
        return self.alpha.shape[0]

    def linear_predictor(self, design: DesignMatrix) -> np.ndarray:
        _check_conformable(self, design)
        return design.cube() @ self.beta + self.alpha[:, None]

    def to_dict(self) -> dict:
        def num(v):
            v = float(v)
            return v if np.isfinite(v) else None

        return {
            "kind": self.kind,
            "link": self.link,
            "column_names": list(self.column_names),
            "beta": [float(b) for b in self.beta],
            "alpha": [num(a) for a in self.alpha],
            "identified": [bool(b) for b in self.identified],
            "log_likelihood": float(self.log_likelihood),
            "grad_norm": float(self.grad_norm),
            "t_offset": int(self.t_offset),
            "n_iter": int(self.n_iter),
            "converged": bool(self.converged),
            "tol": float(self.tol),
            "history": [float(h) for h in self.history],
        }

    def to_json(self, path=None, **extra) -> str:
        payload = self.to_dict()
        payload.update(extra)
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, payload: dict, design: DesignMatrix | None = None) -> "PsFit":
        alpha = np.array([np.nan if a is None else a for a in payload["alpha"]], dtype=float)
        fit = cls(
            kind=payload["kind"],
            link=payload["link"],
            beta=np.asarray(payload["beta"], dtype=float),
            alpha=alpha,
            identified=np.asarray(payload["identified"], dtype=bool),
            log_likelihood=float(payload["log_likelihood"]),
            grad_norm=float(payload["grad_norm"]),
            fitted_probabilities=np.full((alpha.size, 0), np.nan),
            column_names=tuple(payload.get("column_names", ())),
            t_offset=int(payload.get("t_offset", 0)),
            n_iter=int(payload.get("n_iter", 0)),
            converged=bool(payload.get("converged", True)),
            history=tuple(payload.get("history", ())),
            tol=float(payload.get("tol", 1e-8)),
        )
        if design is not None:
            fit = replace(fit, fitted_probabilities=predict_propensity(fit, design))
        return fit

    @classmethod
    def from_json(cls, path, design: DesignMatrix | None = None) -> "PsFit":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), design)


# ---------------------------------------------------------------------------
# solver


def _solve_intercepts(offset, d, link, alpha, bounds, max_iter, tol, max_halving):
    """Maximise ``sum_t loglik(offset_gt + a_g, d_gt)`` over each ``a_g``.

    Projected Newton with per-group step halving. Returns the intercepts and
    a mask of groups pinned at a bound.
    """
    a = alpha.copy()
    lo, hi = bounds if bounds is not None else (-np.inf, np.inf)
    if bounds is not None:
        a = np.clip(a, lo, hi)
    for _ in range(max_iter):
        eta = offset + a[:, None]
        g = link.score(eta, d).sum(axis=1)
        h = link.curvature(eta, d).sum(axis=1)
        at_lo = (a <= lo) & (g < 0)
        at_hi = (a >= hi) & (g > 0)
        g_free = np.where(at_lo | at_hi, 0.0, g)
        active = np.abs(g_free) > tol
        if not active.any():
            break
        step = np.where(active, g_free / np.maximum(h, 1e-300), 0.0)
        # steps below rounding of a cannot change the objective
        active &= np.abs(step) > 4e-16 * (1.0 + np.abs(a))
        if not active.any():
            break
        idx = np.flatnonzero(active)
        f0 = link.loglik(eta[idx], d[idx]).sum(axis=1)
        slack = 1e-13 * np.maximum(1.0, np.abs(f0))
        lam = np.ones(idx.size)
        for _ in range(max_halving + 1):
            trial = np.clip(a[idx] + lam * step[idx], lo, hi)
            f1 = link.loglik(offset[idx] + trial[:, None], d[idx]).sum(axis=1)
            ok = f1 >= f0 - slack
            a[idx[ok]] = trial[ok]
            keep = ~ok
            if not keep.any():
                break
            idx, f0, slack, lam = idx[keep], f0[keep], slack[keep], lam[keep] * 0.5
    pinned = np.zeros(a.shape, dtype=bool)
    if bounds is not None:
        eta = offset + a[:, None]
        g = link.score(eta, d).sum(axis=1)
        pinned = ((a <= lo) & (g <= 0)) | ((a >= hi) & (g >= 0))
    return a, pinned


@dataclass
class _Solution:
    beta: np.ndarray
    alpha: np.ndarray
    loglik: float
    grad_norm: float
    n_iter: int
    converged: bool
    history: list
    pinned: np.ndarray


def _profile_newton(x, d, link, spec: PsSpec, beta0=None, alpha0=None) -> _Solution:
    """Core optimiser on a ``(G, T, R)`` cube with one intercept per group."""
    g_count, t_len, r = x.shape
    beta = np.zeros(r) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    if alpha0 is None:
        alpha0 = link.ppf((d.sum(axis=1) + 0.5) / (t_len + 1.0))
    bounds = spec.alpha_bounds
    inner_tol = min(spec.tol * 1e-3, 1e-11)

    def inner(b, a_start):
        off = x @ b if r else np.zeros((g_count, t_len))
        a, pinned = _solve_intercepts(
            off, d, link, a_start, bounds, spec.inner_max_iter, inner_tol, spec.max_halving
        )
        eta = off + a[:, None]
        return a, pinned, eta, float(link.loglik(eta, d).sum())

    alpha, pinned, eta, ll = inner(beta, alpha0)
    history = [ll]
    converged = False
    it = 0
    grad_norm = np.inf
    for it in range(spec.max_iter + 1):
        s = link.score(eta, d)
        w = link.curvature(eta, d)
        g_beta = np.einsum("gt,gtr->r", s, x) if r else np.zeros(0)
        g_alpha = s.sum(axis=1)
        g_alpha = np.where(pinned, 0.0, g_alpha)
        grad_norm = float(max(np.max(np.abs(g_beta), initial=0.0), np.max(np.abs(g_alpha), initial=0.0)))
        if np.max(np.abs(eta)) > SEPARATION_BOUND:
            raise SeparationDetected(
                f"|linear predictor| reached {np.max(np.abs(eta)):.1f} (> {SEPARATION_BOUND:g}); "
                "the likelihood appears unbounded in beta (perfect or quasi-complete separation)"
            )
        if r == 0:
            converged = grad_norm <= spec.tol
            break

        # Joint Newton step with the intercepts eliminated (Schur complement).
        # Centring the score as well keeps leftover inner residuals, summed
        # over many units, from stalling the beta iteration.
        sw = np.maximum(w.sum(axis=1), 1e-300)
        xbar = np.einsum("gt,gtr->gr", w, x) / sw[:, None]
        xbar[pinned] = 0.0
        xc = x - xbar[:, None, :]
        info = np.einsum("gt,gtr,gts->rs", w, xc, xc)
        g_eff = np.einsum("gt,gtr->r", s, xc)
        delta = np.linalg.lstsq(info, g_eff, rcond=1e-12)[0]
        # Under separation the score decays like exp(-|eta|) while the Newton
        # step stays O(1), so a small score alone does not mean convergence.
        if grad_norm <= spec.tol and np.max(np.abs(delta), initial=0.0) <= STEP_TOL:
            converged = True
            break
        if it == spec.max_iter:
            break
        alpha_step = g_alpha / sw
        alpha_shift = xbar @ delta

        lam = 1.0
        accepted = False
        for _ in range(spec.max_halving + 1):
            b_new = beta + lam * delta
            a_start = np.where(pinned, alpha, alpha + alpha_step - lam * alpha_shift)
            a_new, p_new, eta_new, ll_new = inner(b_new, a_start)
            # slack covers rounding in the summed log-likelihood near the optimum
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        beta, alpha, pinned, eta, ll = b_new, a_new, p_new, eta_new, ll_new
        history.append(ll)

    return _Solution(beta, alpha, ll, grad_norm, it, converged, history, pinned)


def _check_treatment(design: DesignMatrix, treatment) -> np.ndarray:
    d = np.asarray(treatment, dtype=float)
    if d.ndim != 2 or d.shape[0] != design.n_units:
        raise ShapeMismatch(f"treatment shape {d.shape} does not match design with {design.n_units} units")
    if d.shape[1] == design.n_periods:
        d = d[:, design.t_offset:]
    elif d.shape[1] != design.n_periods_eff:
        raise ShapeMismatch(
            f"treatment has {d.shape[1]} periods; design expects {design.n_periods} "
            f"(or {design.n_periods_eff} modelled)"
        )
    return d


def _raise_unconverged(sol: _Solution, spec: PsSpec, what: str):
    raise MaxIterations(
        f"{what} did not reach score sup-norm {spec.tol:g} "
        f"(got {sol.grad_norm:.3g} after {sol.n_iter} outer iterations)"
    )


def fit_fixed_effects_mle(design: DesignMatrix, treatment, spec: PsSpec | None = None) -> PsFit:
    """Conditional MLE of ``(beta, alpha_1..alpha_N)`` with unit intercepts.

    Units whose treatment is constant over the modelled periods are flagged
    ``identified=False`` and excluded. Raises :class:`NoVariationAnywhere` if
    no unit is identified, :class:`SeparationDetected` if the linear
    predictor escapes ``|eta| <= 30`` and :class:`MaxIterations` if the score
    tolerance is not met.
    """
    spec = spec or PsSpec()
    link = get_link(spec.link)
    d = _check_treatment(design, treatment)
    t_eff = d.shape[1]
    sums = d.sum(axis=1)
    identified = (sums > 0) & (sums < t_eff)
    if not identified.any():
        raise NoVariationAnywhere(
            f"all {design.n_units} units are always treated or always control over the modelled periods"
        )
    x = design.cube()[identified]
    sol = _profile_newton(x, d[identified], link, spec)
    if not sol.converged:
        _raise_unconverged(sol, spec, "fixed-effects MLE")

    n = design.n_units
    alpha = np.full(n, np.nan)
    alpha[identified] = sol.alpha
    at_bound = np.zeros(n, dtype=bool)
    at_bound[identified] = sol.pinned
    probs = np.full((n, t_eff), np.nan)
    probs[identified] = link.cdf(x @ sol.beta + sol.alpha[:, None])
    return PsFit(
        kind="fixed_effects",
        link=link.name,
        beta=sol.beta,
        alpha=alpha,
        identified=identified,
        log_likelihood=sol.loglik,
        grad_norm=sol.grad_norm,
        fitted_probabilities=probs,
        column_names=design.column_names,
        t_offset=design.t_offset,
        n_iter=sol.n_iter,
        converged=True,
        history=tuple(sol.history),
        tol=spec.tol,
        alpha_at_bound=at_bound,
    )


def fit_pooled_mle(design: DesignMatrix, treatment, spec: PsSpec | None = None) -> PsFit:
    """Standard pooled MLE: one intercept shared by all units.

    The intercept is always estimated; design columns identically equal to
    one are collinear with it and keep a zero coefficient. ``alpha`` is the
    common intercept repeated ``N`` times.
    """
    spec = replace(spec or PsSpec(), alpha_bounds=None)
    link = get_link(spec.link)
    d = _check_treatment(design, treatment)
    n, t_eff = d.shape
    x = design.cube().reshape(1, n * t_eff, design.n_columns)
    sol = _profile_newton(x, d.reshape(1, -1), link, spec)
    if not sol.converged:
        _raise_unconverged(sol, spec, "pooled MLE")
    alpha = np.full(n, float(sol.alpha[0]))
    probs = link.cdf(design.cube() @ sol.beta + alpha[:, None])
    return PsFit(
        kind="pooled",
        link=link.name,
        beta=sol.beta,
        alpha=alpha,
        identified=np.ones(n, dtype=bool),
        log_likelihood=sol.loglik,
        grad_norm=sol.grad_norm,
        fitted_probabilities=probs,
        column_names=design.column_names,
        t_offset=design.t_offset,
        n_iter=sol.n_iter,
        converged=True,
        history=tuple(sol.history),
        tol=spec.tol,
    )


def marginal_design(treatment, lag_count: int = 1, t_offset: int | None = None,
                    presample_treatment: int | None = None) -> DesignMatrix:
    """Design of own-treatment lags used by :func:`fit_marginal_model`."""
    d = np.asarray(treatment)
    panel = PanelDataset(treatment=d, covariates=np.zeros(d.shape + (0,)), outcome=np.zeros(d.shape[0]))
    base = build_design(panel, LagSpec(covariates=(), treatment_lags=lag_count,
                                       presample_treatment=presample_treatment))
    if t_offset is None or t_offset <= base.t_offset:
        return base
    n, cut = d.shape[0], t_offset - base.t_offset
    cube = base.cube()[:, cut:, :]
    rows = base.rows.reshape(n, -1, 2)[:, cut:, :].reshape(-1, 2)
    return DesignMatrix(
        values=cube.reshape(-1, cube.shape[2]),
        rows=rows,
        column_names=base.column_names,
        t_offset=t_offset,
        n_units=n,
        n_periods=d.shape[1],
    )


def fit_marginal_model(treatment, lag_count: int = 1, t_offset: int | None = None,
                       presample_treatment: int | None = None,
                       spec: PsSpec | None = None) -> PsFit:
    """Pooled logit of ``D_it`` on an intercept and ``lag_count`` own lags.

    ``fitted_probabilities`` estimate ``P(D_it = 1 | past treatment)`` on the
    grid starting at ``t_offset`` (defaults to the first period with a full
    lag history), so it lines up with the denominator model's grid.
    """
    if lag_count < 0:
        raise ValueError("lag_count must be non-negative")
    design = marginal_design(treatment, lag_count, t_offset, presample_treatment)
    spec = replace(spec or PsSpec(), link="logit")
    fit = fit_pooled_mle(design, treatment, spec)
    return replace(fit, kind="marginal")


def nonparametric_unit_means(treatment) -> np.ndarray:
    """Share of treated periods per unit."""
    return np.asarray(treatment, dtype=float).mean(axis=1)


def _check_conformable(fit: PsFit, design: DesignMatrix):
    if design.n_columns != fit.beta.shape[0]:
        raise ShapeMismatch(f"design has {design.n_columns} columns, fit has {fit.beta.shape[0]} coefficients")
    if design.n_units != fit.alpha.shape[0]:
        raise ShapeMismatch(f"design has {design.n_units} units, fit has {fit.alpha.shape[0]}")


def predict_propensity(fit: PsFit, design: DesignMatrix) -> np.ndarray:
    """``F(v'beta + alpha_i)`` on the design grid; NaN rows for unidentified units."""
    return get_link(fit.link).cdf(fit.linear_predictor(design))


def score_vector(fit: PsFit, design: DesignMatrix, treatment) -> np.ndarray:
    """Analytic score ``(d/dbeta, d/dalpha_i for identified i)`` of the FE log-likelihood."""
    link = get_link(fit.link)
    d = _check_treatment(design, treatment)
    keep = fit.identified
    x = design.cube()[keep]
    eta = x @ fit.beta + fit.alpha[keep][:, None]
    s = link.score(eta, d[keep])
    return np.concatenate([np.einsum("gt,gtr->r", s, x), s.sum(axis=1)])


def fe_log_likelihood(beta, alpha, design: DesignMatrix, treatment, link="logit") -> float:
    """Log-likelihood summed over units with finite ``alpha``."""
    lk = get_link(link)
    d = _check_treatment(design, treatment)
    alpha = np.asarray(alpha, dtype=float)
    keep = np.isfinite(alpha)
    eta = design.cube()[keep] @ np.asarray(beta, dtype=float) + alpha[keep][:, None]
    return float(lk.loglik(eta, d[keep]).sum())
