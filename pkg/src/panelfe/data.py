"""Panel data containers: ingestion, indexing, diagnostics, partitioning.

Unit and period ids are re-indexed densely (0-based) at construction; the
original labels are kept so that subpanels and exports stay recoverable.
All containers are immutable and all operations are pure functions.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import InputError, ValidationError
from .validation import check_column, check_obs_arrays

CONTINUOUS = "continuous"
BINARY = "binary"


@dataclass(frozen=True)
class PanelData:
    """Observations (y, x) indexed by dense (unit, period) pairs.

    ``unit``/``period`` are 0-based int arrays of length n; ``x`` is (n, d).
    ``unit_labels``/``period_labels`` map the dense ids back to the caller's
    original identifiers.
    """

    unit: np.ndarray
    period: np.ndarray
    y: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...]
    covariate_kinds: tuple[str, ...]
    unit_labels: tuple = ()
    period_labels: tuple = ()

    def __post_init__(self):
        unit, period = check_obs_arrays(self.unit, self.period,
                                        self.n_units, self.n_periods)
        object.__setattr__(self, "unit", unit)
        object.__setattr__(self, "period", period)
        object.__setattr__(self, "y", check_column(self.y, self.n_obs)[:, 0])
        x = check_column(self.x, self.n_obs)
        object.__setattr__(self, "x", x)
        if x.shape[1] != len(self.covariate_names):
            raise InputError("covariate_names does not match x width")
        if len(self.covariate_kinds) != len(self.covariate_names):
            raise InputError("covariate_kinds does not match covariate_names")
        bad = set(self.covariate_kinds) - {CONTINUOUS, BINARY}
        if bad:
            raise InputError(f"unknown covariate kinds: {sorted(bad)}")
        # each (i, t) cell at most once
        cell = unit * self.n_periods + period
        counts = np.bincount(cell)
        if np.any(counts > 1):
            dup = int(np.argmax(counts > 1))
            raise InputError(
                f"duplicate observation for unit {self.unit_label(dup // self.n_periods)}, "
                f"period {self.period_label(dup % self.n_periods)}"
            )
        # constants are absorbed by the fixed effects
        for k, name in enumerate(self.covariate_names):
            col = x[:, k]
            if np.all(col == col[0]):
                raise ValidationError(
                    f"covariate {name!r} is constant across all observations"
                )

    # -- basic shape -------------------------------------------------------
    @property
    def n_obs(self) -> int:
        return self.unit.shape[0]

    @property
    def n_units(self) -> int:
        return len(self.unit_labels) if self.unit_labels else int(self.unit.max()) + 1

    @property
    def n_periods(self) -> int:
        return len(self.period_labels) if self.period_labels else int(self.period.max()) + 1

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    def unit_label(self, i: int):
        return self.unit_labels[i] if self.unit_labels else i

    def period_label(self, t: int):
        return self.period_labels[t] if self.period_labels else t

    def column(self, name: str) -> np.ndarray:
        if name == "y":
            return self.y
        try:
            return self.x[:, self.covariate_names.index(name)]
        except ValueError:
            raise InputError(f"no covariate named {name!r}") from None

    def is_balanced(self) -> bool:
        return self.n_obs == self.n_units * self.n_periods

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({
            "unit": [self.unit_label(i) for i in self.unit],
            "period": [self.period_label(t) for t in self.period],
            "y": self.y,
        })
        for k, name in enumerate(self.covariate_names):
            df[name] = self.x[:, k]
        return df


def make_panel(unit_ids, period_ids, y, x, covariate_names,
               covariate_kinds=None) -> PanelData:
    """Build a PanelData from raw (possibly non-dense) identifiers."""
    unit_ids = np.asarray(unit_ids)
    period_ids = np.asarray(period_ids)
    unit_labels, unit = np.unique(unit_ids, return_inverse=True)
    period_labels, period = np.unique(period_ids, return_inverse=True)
    x = check_column(x, len(unit))
    names = tuple(covariate_names)
    kinds = tuple(covariate_kinds) if covariate_kinds is not None else tuple(
        _infer_kind(x[:, k]) for k in range(x.shape[1])
    )
    return PanelData(unit, period, np.asarray(y, dtype=float), x, names, kinds,
                     tuple(unit_labels.tolist()), tuple(period_labels.tolist()))


def _infer_kind(col: np.ndarray) -> str:
    return BINARY if np.all((col == 0) | (col == 1)) else CONTINUOUS


# ---------------------------------------------------------------------------
# index


@dataclass(frozen=True)
class PanelIndex:
    """Observation-set bookkeeping: D, D_i, D_t, n, and the ragged views.

    ``unit_order`` sorts observations by (unit, period); slicing it with
    ``unit_slice(i)`` yields unit i's rows in time order (and symmetrically
    for periods). ``tbar`` = n/N and ``nbar`` = n/T are the average counts
    used by the unbalanced bias corrections.  The sort orders are built
    lazily; the solver only needs the counts.
    """

    n_units: int
    n_periods: int
    n: int
    unit_counts: np.ndarray
    period_counts: np.ndarray
    _unit: np.ndarray = field(repr=False)
    _period: np.ndarray = field(repr=False)

    @property
    def tbar(self) -> float:
        return self.n / self.n_units

    @property
    def nbar(self) -> float:
        return self.n / self.n_periods

    @functools.cached_property
    def unit_order(self) -> np.ndarray:
        return np.lexsort((self._period, self._unit))

    @functools.cached_property
    def unit_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.unit_counts)])

    @functools.cached_property
    def period_order(self) -> np.ndarray:
        return np.lexsort((self._unit, self._period))

    @functools.cached_property
    def period_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.period_counts)])

    def unit_slice(self, i: int) -> np.ndarray:
        return self.unit_order[self.unit_starts[i]:self.unit_starts[i + 1]]

    def period_slice(self, t: int) -> np.ndarray:
        return self.period_order[self.period_starts[t]:self.period_starts[t + 1]]


def build_index(data: PanelData) -> PanelIndex:
    N, T = data.n_units, data.n_periods
    unit_counts = np.bincount(data.unit, minlength=N)
    period_counts = np.bincount(data.period, minlength=T)
    if np.any(unit_counts == 0) or np.any(period_counts == 0):
        raise ValidationError("every retained unit and period needs at least one observation")
    return PanelIndex(N, T, data.n_obs, unit_counts, period_counts,
                      data.unit, data.period)


# ---------------------------------------------------------------------------
# CSV in/out


def load_csv(path, schema: Mapping[str, object] | None = None) -> PanelData:
    """Read a panel from CSV.

    The default schema expects columns ``unit``, ``period``, ``y``; every
    other column is a covariate. Pass ``schema`` to rename
    (``{"unit": "id", "period": "year", "y": "lfp", "covariates": [...],
    "kinds": {...}}``).
    """
    schema = dict(schema or {})
    unit_col = schema.get("unit", "unit")
    period_col = schema.get("period", "period")
    y_col = schema.get("y", "y")
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise InputError(f"empty file: {path}") from None
    if df.empty:
        raise InputError(f"no observations in {path}")
    for col in (unit_col, period_col, y_col):
        if col not in df.columns:
            raise InputError(f"missing required column {col!r} in {path}")
    covariates = schema.get("covariates")
    if covariates is None:
        covariates = [c for c in df.columns if c not in (unit_col, period_col, y_col)]
    if not covariates:
        raise InputError("no covariate columns found")
    numeric_cols = [y_col, *covariates]
    for col in numeric_cols:
        parsed = pd.to_numeric(df[col], errors="coerce")
        if parsed.isna().any():
            bad = df.loc[parsed.isna(), col].iloc[0]
            raise InputError(f"non-numeric value {bad!r} in column {col!r}")
        df[col] = parsed
    kinds_map = schema.get("kinds") or {}
    x = df[list(covariates)].to_numpy(dtype=float)
    kinds = tuple(kinds_map.get(c, _infer_kind(x[:, k])) for k, c in enumerate(covariates))
    return make_panel(df[unit_col].to_numpy(), df[period_col].to_numpy(),
                      df[y_col].to_numpy(dtype=float), x,
                      tuple(covariates), kinds)


def save_csv(data: PanelData, path) -> None:
    data.to_frame().to_csv(path, index=False)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class ValidationReport:
    """Diagnostic output of :func:`validate`; never mutates the data."""

    min_obs: int
    units_few_obs: tuple = ()
    periods_few_obs: tuple = ()
    units_no_variation: tuple = ()
    periods_no_variation: tuple = ()
    collinear_covariates: tuple = ()

    @property
    def drop_units(self) -> tuple:
        return tuple(sorted(set(self.units_few_obs) | set(self.units_no_variation)))

    @property
    def drop_periods(self) -> tuple:
        return tuple(sorted(set(self.periods_few_obs) | set(self.periods_no_variation)))

    @property
    def ok(self) -> bool:
        return not (self.drop_units or self.drop_periods or self.collinear_covariates)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "min_obs": self.min_obs,
            "units_few_obs": list(self.units_few_obs),
            "periods_few_obs": list(self.periods_few_obs),
            "units_no_variation": list(self.units_no_variation),
            "periods_no_variation": list(self.periods_no_variation),
            "collinear_covariates": list(self.collinear_covariates),
            "drop_units": list(self.drop_units),
            "drop_periods": list(self.drop_periods),
        }


def validate(data: PanelData, family, min_obs: int = 2) -> ValidationReport:
    """Report units/periods to drop and dummy-collinear covariates.

    Dropping is the caller's move (re-run on the cleaned panel): silent
    mutation would hide identification failures.
    """
    from .projection import two_way_project  # local import to avoid a cycle

    idx = build_index(data)
    few_i = np.flatnonzero(idx.unit_counts < min_obs)
    few_t = np.flatnonzero(idx.period_counts < min_obs)
    ysum_i = np.bincount(data.unit, weights=data.y, minlength=idx.n_units)
    ysum_t = np.bincount(data.period, weights=data.y, minlength=idx.n_periods)
    deg_i = np.flatnonzero(family.degenerate_groups(ysum_i, idx.unit_counts))
    deg_t = np.flatnonzero(family.degenerate_groups(ysum_t, idx.period_counts))

    collinear = []
    ones = np.ones(data.n_obs)
    for k, name in enumerate(data.covariate_names):
        col = data.x[:, k]
        scale = max(1.0, float(np.abs(col).max()))
        resid = two_way_project(col, ones, data.unit, data.period,
                                idx.n_units, idx.n_periods,
                                check_connectivity=False)
        if np.abs(resid).max() <= 1e-8 * scale:
            collinear.append(name)

    to_labels = lambda ids, lab: tuple(lab(i) for i in ids)
    return ValidationReport(
        min_obs=min_obs,
        units_few_obs=to_labels(few_i, data.unit_label),
        periods_few_obs=to_labels(few_t, data.period_label),
        units_no_variation=to_labels(deg_i, data.unit_label),
        periods_no_variation=to_labels(deg_t, data.period_label),
        collinear_covariates=tuple(collinear),
    )


def drop_groups(data: PanelData, units: Iterable = (), periods: Iterable = ()) -> PanelData:
    """Remove the listed units/periods (by label) and re-densify ids."""
    drop_u = set(units)
    drop_t = set(periods)
    keep = np.array([
        data.unit_label(i) not in drop_u and data.period_label(t) not in drop_t
        for i, t in zip(data.unit, data.period)
    ])
    if not keep.any():
        raise ValidationError("dropping the listed groups empties the panel")
    return _restrict(data, keep)


def clean(data: PanelData, family, min_obs: int = 2, max_passes: int = 100) -> PanelData:
    """Iterate validate-and-drop until the report is clean (explicit helper)."""
    for _ in range(max_passes):
        report = validate(data, family, min_obs=min_obs)
        if not (report.drop_units or report.drop_periods):
            return data
        data = drop_groups(data, report.drop_units, report.drop_periods)
    raise ValidationError("validate/drop did not stabilize")


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class SplitScheme:
    """A subpanel selection: leave-one-out or half-panel index sets.

    ``kind`` is one of ``leave_unit_out``, ``leave_period_out``,
    ``unit_half``, ``period_half``. Members are dense 0-based ids on the
    parent panel.
    """

    kind: str
    drop: int | None = None
    members: tuple[int, ...] | None = None

    def describe(self, data: PanelData) -> str:
        if self.kind == "leave_unit_out":
            return f"leave_unit_out(unit={data.unit_label(self.drop)})"
        if self.kind == "leave_period_out":
            return f"leave_period_out(period={data.period_label(self.drop)})"
        if self.kind == "unit_half":
            return f"unit_half(size={len(self.members)})"
        return f"period_half(periods={list(self.members)})"


def leave_unit_out(i: int) -> SplitScheme:
    return SplitScheme("leave_unit_out", drop=i)


def leave_period_out(t: int) -> SplitScheme:
    return SplitScheme("leave_period_out", drop=t)


def period_halves(n_periods: int) -> tuple[SplitScheme, SplitScheme]:
    """{t <= ceil(T/2)} and {t >= floor(T/2 + 1)} (1-based); odd T shares one period."""
    hi_first = math.ceil(n_periods / 2)            # 1-based upper bound of half 1
    lo_second = math.floor(n_periods / 2 + 1)      # 1-based lower bound of half 2
    first = tuple(range(0, hi_first))
    second = tuple(range(lo_second - 1, n_periods))
    return (SplitScheme("period_half", members=first),
            SplitScheme("period_half", members=second))


def unit_halves(n_units: int, rng) -> tuple[SplitScheme, SplitScheme]:
    """Random partition of the units into halves of sizes ceil(N/2), floor(N/2)."""
    perm = rng.permutation(n_units)
    cut = math.ceil(n_units / 2)
    return (SplitScheme("unit_half", members=tuple(sorted(perm[:cut].tolist()))),
            SplitScheme("unit_half", members=tuple(sorted(perm[cut:].tolist()))))


def subpanel(data: PanelData, scheme: SplitScheme, return_maps: bool = False):
    """Restrict the panel to the scheme's index set and re-densify ids.

    Family-specific validation failures inside the subpanel (e.g. a constant
    covariate) propagate to the caller; nothing is silently fixed.  With
    ``return_maps`` also returns the retained parent unit/period indices.
    """
    if scheme.kind == "leave_unit_out":
        keep = data.unit != scheme.drop
        fast = _leave_one_out_fast(data, keep, scheme.drop, drop_unit=True,
                                   return_maps=return_maps)
        if fast is not None:
            return fast
    elif scheme.kind == "leave_period_out":
        keep = data.period != scheme.drop
        fast = _leave_one_out_fast(data, keep, scheme.drop, drop_unit=False,
                                   return_maps=return_maps)
        if fast is not None:
            return fast
    elif scheme.kind == "unit_half":
        keep = np.isin(data.unit, np.asarray(scheme.members, dtype=np.int64))
    elif scheme.kind == "period_half":
        keep = np.isin(data.period, np.asarray(scheme.members, dtype=np.int64))
    else:
        raise InputError(f"unknown split scheme kind {scheme.kind!r}")
    if not keep.any():
        raise ValidationError(f"subpanel {scheme.describe(data)} is empty")
    return _restrict(data, keep, return_maps=return_maps)


def _leave_one_out_fast(data, keep, drop, drop_unit, return_maps):
    """Leave-one-out re-densification without unique/searchsorted passes.

    Only the dropped dimension shifts ids; returns None (fall back to the
    general path) when the removal empties a group on the other margin.
    """
    if not keep.any():
        raise ValidationError("leave-one-out subpanel is empty")
    unit = data.unit[keep]
    period = data.period[keep]
    if drop_unit:
        if np.bincount(period, minlength=data.n_periods).min() == 0:
            return None
        unit = np.where(unit > drop, unit - 1, unit)
        unit_labels = data.unit_labels[:drop] + data.unit_labels[drop + 1:] \
            if data.unit_labels else ()
        period_labels = data.period_labels
        old_units = np.concatenate([np.arange(drop), np.arange(drop + 1, data.n_units)])
        old_periods = np.arange(data.n_periods)
    else:
        if np.bincount(unit, minlength=data.n_units).min() == 0:
            return None
        period = np.where(period > drop, period - 1, period)
        period_labels = data.period_labels[:drop] + data.period_labels[drop + 1:] \
            if data.period_labels else ()
        unit_labels = data.unit_labels
        old_units = np.arange(data.n_units)
        old_periods = np.concatenate([np.arange(drop), np.arange(drop + 1, data.n_periods)])
    if not data.unit_labels:  # label-free construction: parent dense ids act as labels
        unit_labels = tuple(old_units.tolist())
        period_labels = tuple(old_periods.tolist())
    sub = PanelData(unit, period, data.y[keep], data.x[keep],
                    data.covariate_names, data.covariate_kinds,
                    unit_labels, period_labels)
    if return_maps:
        return sub, old_units, old_periods
    return sub


def _restrict(data: PanelData, keep: np.ndarray, return_maps: bool = False):
    old_units = np.unique(data.unit[keep])
    old_periods = np.unique(data.period[keep])
    unit = np.searchsorted(old_units, data.unit[keep])
    period = np.searchsorted(old_periods, data.period[keep])
    if data.unit_labels:
        unit_labels = tuple(np.asarray(data.unit_labels, dtype=object)[old_units])
        period_labels = tuple(np.asarray(data.period_labels, dtype=object)[old_periods])
    else:
        unit_labels = tuple(old_units.tolist())
        period_labels = tuple(old_periods.tolist())
    sub = PanelData(unit, period, data.y[keep], data.x[keep],
                    data.covariate_names, data.covariate_kinds,
                    unit_labels, period_labels)
    if return_maps:
        return sub, old_units, old_periods
    return sub


def derive_lags(data: PanelData, var: str, k: int = 1,
                name: str | None = None) -> PanelData:
    """Append the k-period lag of ``var``; rows whose lag is missing drop out.

    Gaps in a unit's observation set are respected: the lag exists only when
    (i, t-k) is itself observed (no interpolation).
    """
    if k < 1:
        raise InputError("lag order must be >= 1")
    values = data.column(var)
    N, T = data.n_units, data.n_periods
    grid = np.full((N, T), np.nan)
    grid[data.unit, data.period] = values
    lagged = np.full(data.n_obs, np.nan)
    has_lag = data.period >= k
    src_u = data.unit[has_lag]
    src_t = data.period[has_lag] - k
    lagged[has_lag] = grid[src_u, src_t]
    keep = ~np.isnan(lagged)
    if not keep.any():
        raise InputError(f"lag {k} of {var!r} leaves no usable observations")
    name = name or f"{var}_lag{k}"
    x_new = np.column_stack([data.x[keep], lagged[keep]])
    base = PanelData(
        data.unit[keep], data.period[keep], data.y[keep], x_new,
        data.covariate_names + (name,),
        data.covariate_kinds + (_infer_kind(lagged[keep]),),
        data.unit_labels, data.period_labels,
    )
    # some units/periods may have lost all rows; re-densify via identity mask
    return _restrict(base, np.ones(base.n_obs, dtype=bool))
