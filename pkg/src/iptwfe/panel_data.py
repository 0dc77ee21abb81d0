"""Balanced binary-treatment panels: container, CSV I/O, validation, designs.

A panel holds ``N`` units observed over ``T`` periods. Treatment ``D`` is an
``(N, T)`` 0/1 matrix, covariates an ``(N, T, P)`` array and the outcome a
single endline value per unit. Arrays are stored read-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    InconsistentOutcome,
    LagTooLong,
    NonBinaryTreatment,
    ParseError,
    UnbalancedPanel,
)


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PanelDataset:
    treatment: np.ndarray
    covariates: np.ndarray
    outcome: np.ndarray
    unit_ids: tuple = ()
    period_ids: tuple = ()
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        d = np.asarray(self.treatment)
        if d.ndim != 2:
            raise ParseError(f"treatment must be 2-D (units x periods), got shape {d.shape}")
        n, t = d.shape
        if n < 1 or t < 1:
            raise ParseError("panel needs at least one unit and one period")
        if not np.all(np.isin(d, (0, 1))):
            raise NonBinaryTreatment("treatment entries must be exactly 0 or 1")

        x = np.asarray(self.covariates, dtype=float)
        if x.size == 0:
            x = np.zeros((n, t, 0))
        if x.ndim == 2:
            x = x[:, :, None]
        if x.shape[:2] != (n, t):
            raise ParseError(f"covariates shape {x.shape} does not match treatment {d.shape}")
        if not np.all(np.isfinite(x)):
            raise UnbalancedPanel("covariates contain missing or non-finite cells")

        y = np.asarray(self.outcome, dtype=float).reshape(-1)
        if y.shape != (n,):
            raise InconsistentOutcome(f"outcome must have one value per unit ({n}), got {y.shape}")

        unit_ids = tuple(self.unit_ids) if len(self.unit_ids) else tuple(range(1, n + 1))
        period_ids = tuple(self.period_ids) if len(self.period_ids) else tuple(range(1, t + 1))
        names = tuple(self.covariate_names) if len(self.covariate_names) else tuple(
            f"x{j + 1}" for j in range(x.shape[2])
        )
        if len(unit_ids) != n or len(period_ids) != t or len(names) != x.shape[2]:
            raise ParseError("label vectors do not match array dimensions")

        object.__setattr__(self, "treatment", _frozen(d, np.int8))
        object.__setattr__(self, "covariates", _frozen(x, float))
        object.__setattr__(self, "outcome", _frozen(y, float))
        object.__setattr__(self, "unit_ids", unit_ids)
        object.__setattr__(self, "period_ids", period_ids)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_units(self) -> int:
        return self.treatment.shape[0]

    @property
    def n_periods(self) -> int:
        return self.treatment.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    def covariate(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}; have {list(self.covariate_names)}") from None
        return self.covariates[:, :, j]

    def subset_units(self, mask) -> "PanelDataset":
        mask = np.asarray(mask, dtype=bool)
        return PanelDataset(
            treatment=self.treatment[mask],
            covariates=self.covariates[mask],
            outcome=self.outcome[mask],
            unit_ids=tuple(u for u, m in zip(self.unit_ids, mask) if m),
            period_ids=self.period_ids,
            covariate_names=self.covariate_names,
        )


@dataclass(frozen=True)
class PanelSchema:
    """Column names of a long-format panel CSV."""

    unit: str = "unit"
    period: str = "period"
    treatment: str = "treatment"
    outcome: str | None = "outcome"
    covariates: tuple[str, ...] | None = None  # None: every remaining column


def load_panel_csv(path, schema: PanelSchema | None = None) -> PanelDataset:
    """Read a long-format CSV (one row per unit and period) into a panel.

    Units keep their order of first appearance, periods are sorted. The
    outcome column may be constant within unit or filled only on some rows
    (typically the last period); varying values raise
    :class:`InconsistentOutcome`. Without an outcome column the outcome is
    all-NaN, which is enough for fitting propensity models.
    """
    schema = schema or PanelSchema()
    path = Path(path)
    if not path.exists():
        raise ParseError(f"no such file: {path}")
    try:
        df = pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ParseError(f"could not parse {path}: {exc}") from exc

    required = [schema.unit, schema.period, schema.treatment]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ParseError(f"missing required column(s) {missing} in {path}")
    has_outcome = schema.outcome is not None and schema.outcome in df.columns
    if schema.outcome is not None and not has_outcome and schema.outcome != "outcome":
        raise ParseError(f"outcome column {schema.outcome!r} not found in {path}")
    if schema.covariates is None:
        reserved = set(required) | ({schema.outcome} if has_outcome else set())
        covs = tuple(c for c in df.columns if c not in reserved)
    else:
        covs = tuple(schema.covariates)
        absent = [c for c in covs if c not in df.columns]
        if absent:
            raise ParseError(f"covariate column(s) {absent} not found in {path}")

    if df[[schema.unit, schema.period]].isna().any().any():
        raise ParseError("unit/period identifiers must not be empty")
    if df.duplicated([schema.unit, schema.period]).any():
        dup = df.loc[df.duplicated([schema.unit, schema.period]), [schema.unit, schema.period]].iloc[0]
        raise ParseError(f"duplicate row for unit {dup.iloc[0]!r}, period {dup.iloc[1]!r}")

    units = pd.unique(df[schema.unit])
    periods = np.sort(pd.unique(df[schema.period]))
    n, t = len(units), len(periods)
    if len(df) != n * t:
        counts = df.groupby(schema.unit, sort=False)[schema.period].count()
        short = counts[counts < t]
        raise UnbalancedPanel(
            f"panel is unbalanced: {len(df)} rows for {n} units x {t} periods; "
            f"e.g. unit {short.index[0]!r} has {int(short.iloc[0])} of {t} periods"
        )

    uidx = pd.Index(units).get_indexer(df[schema.unit])
    tidx = pd.Index(periods).get_indexer(df[schema.period])

    dcol = pd.to_numeric(df[schema.treatment], errors="coerce").to_numpy(dtype=float)
    if np.isnan(dcol).any():
        raise UnbalancedPanel("treatment column has missing or non-numeric cells")
    if not np.all((dcol == 0) | (dcol == 1)):
        bad = dcol[(dcol != 0) & (dcol != 1)][0]
        raise NonBinaryTreatment(f"treatment must be 0/1, found {bad:g}")
    treatment = np.zeros((n, t), dtype=np.int8)
    treatment[uidx, tidx] = dcol.astype(np.int8)

    covariates = np.zeros((n, t, len(covs)))
    for j, c in enumerate(covs):
        vals = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ParseError(f"covariate {c!r} has missing or non-numeric cells")
        covariates[uidx, tidx, j] = vals

    outcome = np.full(n, np.nan)
    if has_outcome:
        ycol = pd.to_numeric(df[schema.outcome], errors="coerce").to_numpy(dtype=float)
        ymat = np.full((n, t), np.nan)
        ymat[uidx, tidx] = ycol
        for i in range(n):
            row = ymat[i][~np.isnan(ymat[i])]
            if row.size == 0:
                continue
            if np.any(row != row[0]):
                raise InconsistentOutcome(
                    f"outcome varies within unit {units[i]!r}; only one endline value per unit is supported"
                )
            outcome[i] = row[0]

    return PanelDataset(
        treatment=treatment,
        covariates=covariates,
        outcome=outcome,
        unit_ids=tuple(_py(u) for u in units),
        period_ids=tuple(_py(p) for p in periods),
        covariate_names=covs,
    )


def _py(v):
    # numpy scalars -> builtins so ids serialize cleanly
    return v.item() if hasattr(v, "item") else v


def write_panel_csv(data: PanelDataset, path, schema: PanelSchema | None = None) -> None:
    """Write ``data`` in long format; the outcome is repeated on every row."""
    schema = schema or PanelSchema()
    n, t = data.n_units, data.n_periods
    cols = {
        schema.unit: np.repeat(np.array(data.unit_ids, dtype=object), t),
        schema.period: np.tile(np.array(data.period_ids, dtype=object), n),
        schema.treatment: data.treatment.reshape(-1).astype(int),
    }
    if schema.outcome is not None:
        cols[schema.outcome] = np.repeat(data.outcome, t)
    for j, name in enumerate(data.covariate_names):
        cols[name] = data.covariates[:, :, j].reshape(-1)
    pd.DataFrame(cols).to_csv(path, index=False, lineterminator="\n")


@dataclass(frozen=True)
class ValidationReport:
    treated_counts: np.ndarray
    all_treated: tuple[int, ...]
    all_control: tuple[int, ...]
    covariate_summary: dict = field(default_factory=dict)
    n_units: int = 0
    n_periods: int = 0

    @property
    def counts(self) -> dict:
        return {"all_control": len(self.all_control), "all_treated": len(self.all_treated)}

    @property
    def has_degenerate_units(self) -> bool:
        return bool(self.all_treated or self.all_control)

    @property
    def flags(self) -> dict:
        return {
            "balanced": True,
            "has_degenerate_units": self.has_degenerate_units,
            "any_treatment_variation": bool(len(self.all_treated) + len(self.all_control) < self.n_units),
        }


def validate(data: PanelDataset) -> ValidationReport:
    """Summarise treatment variation and covariates. Never raises.

    Units listed in ``all_treated``/``all_control`` are those whose treatment
    never varies over the full observation window (indices, not labels).
    """
    counts = data.treatment.sum(axis=1).astype(int)
    summary = {}
    for j, name in enumerate(data.covariate_names):
        col = data.covariates[:, :, j]
        summary[name] = {
            "mean": float(col.mean()),
            "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
            "min": float(col.min()),
            "max": float(col.max()),
            "within_unit_constant": bool(np.all(col == col[:, :1])),
        }
    return ValidationReport(
        treated_counts=counts,
        all_treated=tuple(int(i) for i in np.flatnonzero(counts == data.n_periods)),
        all_control=tuple(int(i) for i in np.flatnonzero(counts == 0)),
        covariate_summary=summary,
        n_units=data.n_units,
        n_periods=data.n_periods,
    )


@dataclass(frozen=True)
class LagSpec:
    """Which columns enter the propensity design.

    ``treatment_lags`` lagged treatments follow the covariates. With
    ``presample_treatment`` set, treatment before period 1 is taken to be
    that known value (e.g. a simulation's initial condition) and early
    periods are kept; otherwise the first ``treatment_lags`` periods are
    dropped.
    """

    covariates: tuple[str, ...] | None = None  # None: all covariates
    treatment_lags: int = 1
    covariate_lags: int = 0
    presample_treatment: int | None = None

    def __post_init__(self):
        if self.treatment_lags < 0 or self.covariate_lags < 0:
            raise ValueError("lag counts must be non-negative")
        if self.presample_treatment not in (None, 0, 1):
            raise ValueError("presample_treatment must be None, 0 or 1")
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    rows: np.ndarray
    column_names: tuple[str, ...]
    t_offset: int
    n_units: int
    n_periods: int

    @property
    def n_periods_eff(self) -> int:
        return self.n_periods - self.t_offset

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def cube(self) -> np.ndarray:
        """Values reshaped to ``(N, T_eff, R)``."""
        return self.values.reshape(self.n_units, self.n_periods_eff, self.n_columns)


def build_design(data: PanelDataset, spec: LagSpec | None = None) -> DesignMatrix:
    """Stack ``[X_it, D_i,t-1, ..., D_i,t-L]`` for the modelled periods.

    Rows are ordered unit-major; ``rows[:, 1]`` holds 0-based period indices.
    """
    spec = spec or LagSpec()
    n, t = data.n_units, data.n_periods
    L, C = spec.treatment_lags, spec.covariate_lags
    treat_offset = 0 if spec.presample_treatment is not None else L
    offset = max(treat_offset, C)
    if offset >= t:
        raise LagTooLong(f"{offset} lag period(s) leave no modelled periods out of T={t}")

    names = data.covariate_names if spec.covariates is None else spec.covariates
    idx = [data.covariate_names.index(c) if c in data.covariate_names else None for c in names]
    if None in idx:
        raise ParseError(f"unknown covariate(s) {[c for c, j in zip(names, idx) if j is None]}")

    blocks, colnames = [], []
    x = data.covariates[:, :, idx] if idx else np.zeros((n, t, 0))
    blocks.append(x[:, offset:, :])
    colnames += list(names)
    for lag in range(1, C + 1):
        blocks.append(x[:, offset - lag : t - lag, :])
        colnames += [f"{c}_lag{lag}" for c in names]

    d = data.treatment.astype(float)
    if spec.presample_treatment is not None and L:
        d = np.concatenate([np.full((n, L), float(spec.presample_treatment)), d], axis=1)
        shift = L
    else:
        shift = 0
    for lag in range(1, L + 1):
        start = offset + shift - lag
        blocks.append(d[:, start : start + t - offset, None])
        colnames.append(f"treatment_lag{lag}")

    cube = np.concatenate(blocks, axis=2) if blocks else np.zeros((n, t - offset, 0))
    values = cube.reshape(n * (t - offset), cube.shape[2])
    rows = np.stack(
        [np.repeat(np.arange(n), t - offset), np.tile(np.arange(offset, t), n)], axis=1
    )
    return DesignMatrix(
        values=_frozen(values, float),
        rows=_frozen(rows, np.int64),
        column_names=tuple(colnames),
        t_offset=offset,
        n_units=n,
        n_periods=t,
    )


def modeled_treatment(data_or_treatment, t_offset: int) -> np.ndarray:
    d = data_or_treatment.treatment if isinstance(data_or_treatment, PanelDataset) else data_or_treatment
    return np.asarray(d)[:, t_offset:]

