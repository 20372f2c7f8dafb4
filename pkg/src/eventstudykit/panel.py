"""Balanced panels, cohort bookkeeping, relative-time designs and the two-way
within transformation.

Times inside a :class:`Panel` are always the integers ``0..T``; the original
labels (survey waves, years, ...) are kept in ``time_labels`` for output.
Never-treated units carry an event time of ``NEVER`` (``math.inf``) so that
``t >= E`` is false for every period without special-casing.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .errors import (
    DuplicateCell,
    EmptyCellWarning,
    EventTimeOutOfRange,
    InconsistentEventTime,
    InputError,
    MissingCell,
    NonNumericOutcome,
    NoTreatmentVariation,
    RankDeficientDesign,
)

NEVER = math.inf

DEFAULT_SCHEMA = {"unit": "unit", "time": "time", "outcome": "outcome", "event": "event_time"}

RANK_TOL = 1e-10


def _readonly(arr):
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Panel:
    """A balanced panel of ``N`` units observed at times ``0..T``.

    Parameters
    ----------
    unit_ids : sequence
        Opaque unit identifiers, one per row of ``outcomes``.
    outcomes : array_like, shape (N, T+1)
        Outcome ``Y[i, t]``.
    event_times : array_like, shape (N,)
        Period of first treatment in ``1..T``, or ``NEVER``.
    time_labels : sequence, optional
        Original time labels, used only for reporting.
    """

    unit_ids: tuple
    outcomes: np.ndarray
    event_times: np.ndarray
    time_labels: tuple = None

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        if y.ndim != 2 or y.shape[1] < 2:
            raise InputError("outcomes must be an N x (T+1) matrix with at least two periods")
        if not np.all(np.isfinite(y)):
            raise InputError("outcomes contain missing or non-finite values")
        ev = np.asarray(self.event_times, dtype=float).reshape(-1)
        if ev.shape[0] != y.shape[0]:
            raise InputError("event_times must have one entry per unit")
        ids = tuple(self.unit_ids)
        if len(ids) != y.shape[0]:
            raise InputError("unit_ids must have one entry per unit")
        T = y.shape[1] - 1
        finite = np.isfinite(ev)
        if np.any(np.isneginf(ev)) or np.any(np.isnan(ev)):
            raise EventTimeOutOfRange("event times must be finite periods or NEVER")
        if np.any(ev[finite] != np.round(ev[finite])):
            raise EventTimeOutOfRange("event times must be whole periods")
        bad = finite & ((ev < 1) | (ev > T))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise EventTimeOutOfRange(
                f"unit {ids[i]!r} has event time {ev[i]:g}; finite event times must lie in 1..{T}"
            )
        labels = tuple(range(T + 1)) if self.time_labels is None else tuple(self.time_labels)
        if len(labels) != T + 1:
            raise InputError("time_labels must have T+1 entries")
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "outcomes", _readonly(y))
        object.__setattr__(self, "event_times", _readonly(ev))
        object.__setattr__(self, "time_labels", labels)

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def T(self) -> int:
        return self.outcomes.shape[1] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.T + 1)

    @property
    def never_treated(self) -> np.ndarray:
        return ~np.isfinite(self.event_times)

    @property
    def treatment(self) -> np.ndarray:
        """Absorbing treatment indicator ``D[i, t] = 1{t >= E_i}``."""
        return (self.times[None, :] >= self.event_times[:, None]).astype(float)

    @property
    def relative_time(self) -> np.ndarray:
        """``t - E_i``; ``-inf`` for never-treated units."""
        return self.times[None, :] - self.event_times[:, None]

    def cohort_mask(self, e) -> np.ndarray:
        return self.event_times == e

    def relative_time_indicator(self, l: int) -> np.ndarray:
        """``D^l[i, t] = 1{t - E_i = l}``."""
        return (self.relative_time == l).astype(float)

    def cell_indicator(self, e, l: int) -> np.ndarray:
        """``1{E_i = e} * D^l[i, t]``."""
        return self.cohort_mask(e)[:, None] * self.relative_time_indicator(l)

    def layout(self) -> "CohortLayout":
        return cohort_layout(self)

    def with_outcomes(self, outcomes) -> "Panel":
        return Panel(self.unit_ids, outcomes, self.event_times, self.time_labels)

    def take(self, index) -> "Panel":
        """Sub-panel (or resampled panel) made of the given unit rows."""
        index = np.asarray(index)
        ids = [self.unit_ids[i] for i in index]
        return Panel(ids, self.outcomes[index], self.event_times[index], self.time_labels)

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame with columns unit, time, outcome, event_time."""
        n, m = self.outcomes.shape
        ev = np.repeat(self.event_times, m)
        return pd.DataFrame(
            {
                "unit": np.repeat(np.array(self.unit_ids, dtype=object), m),
                "time": np.tile(np.array(self.time_labels, dtype=object), n),
                "outcome": self.outcomes.reshape(-1),
                "event_time": [
                    self.time_labels[int(v)] if np.isfinite(v) else "inf" for v in ev
                ],
            }
        )

    def __repr__(self):
        return f"Panel(N={self.n_units}, T={self.T}, never_treated={int(self.never_treated.sum())})"


@dataclass(frozen=True)
class CohortLayout:
    cohorts: tuple
    sizes: Mapping[int, int]
    never_treated_size: int
    relative_time_range: Mapping[int, tuple]

    @property
    def n_units(self) -> int:
        return sum(self.sizes.values()) + self.never_treated_size


def cohort_layout(panel: Panel) -> CohortLayout:
    ev = panel.event_times
    finite = ev[np.isfinite(ev)].astype(int)
    cohorts, counts = np.unique(finite, return_counts=True)
    cohorts = tuple(int(c) for c in cohorts)
    return CohortLayout(
        cohorts=cohorts,
        sizes={c: int(n) for c, n in zip(cohorts, counts)},
        never_treated_size=int((~np.isfinite(ev)).sum()),
        relative_time_range={c: (-c, panel.T - c) for c in cohorts},
    )


# --------------------------------------------------------------------------
# loading


def _parse_schema(schema) -> dict:
    out = dict(DEFAULT_SCHEMA)
    if schema is None:
        return out
    if isinstance(schema, str):
        items = [kv for kv in schema.split(",") if kv.strip()]
        schema = {}
        for kv in items:
            if "=" not in kv:
                raise InputError(f"bad schema entry {kv!r}; expected key=column")
            k, v = kv.split("=", 1)
            schema[k.strip()] = v.strip()
    unknown = set(schema) - set(DEFAULT_SCHEMA)
    if unknown:
        raise InputError(f"unknown schema keys: {sorted(unknown)}")
    out.update(schema)
    return out


_NEVER_TOKENS = {"", "inf", "+inf", "infinity", "never", "nan", "."}


def _read_long(source, schema, extra_columns=()):
    schema = _parse_schema(schema)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    df = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    df.columns = [c.strip() for c in df.columns]
    needed = [schema["unit"], schema["time"], schema["outcome"], schema["event"], *extra_columns]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise InputError(f"CSV is missing columns: {missing}")
    return df, schema


def _to_float(values) -> pd.Series:
    """Exact (round-trip) decimal parsing; unparseable entries become NaN."""

    def conv(tok):
        try:
            return float(tok)
        except ValueError:
            return np.nan

    return values.str.strip().map(conv).astype(float)


def _panel_from_frame(df, schema, extra_columns=()):
    ucol, tcol, ycol, ecol = schema["unit"], schema["time"], schema["outcome"], schema["event"]
    try:
        times_raw = pd.to_numeric(df[tcol].str.strip(), errors="raise")
    except (ValueError, TypeError) as exc:
        raise InputError(f"time column {tcol!r} must be integer") from exc
    if np.any(times_raw != np.round(times_raw)):
        raise InputError(f"time column {tcol!r} must be integer")
    times_raw = times_raw.astype(int)

    y = _to_float(df[ycol])
    bad = y.isna() | ~np.isfinite(y.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        r = int(np.flatnonzero(bad.to_numpy())[0])
        raise NonNumericOutcome(
            f"non-numeric outcome {df[ycol].iloc[r]!r} for unit={df[ucol].iloc[r]!r}, "
            f"time={df[tcol].iloc[r]!r}"
        )

    units_raw = df[ucol].str.strip()
    as_num = pd.to_numeric(units_raw, errors="coerce")
    if not as_num.isna().any() and np.all(as_num == np.round(as_num)):
        units = as_num.astype(np.int64)
    else:
        units = units_raw

    key = pd.DataFrame({"u": units, "t": times_raw})
    dup = key.duplicated(keep=False)
    if dup.any():
        r = int(np.flatnonzero(dup.to_numpy())[0])
        raise DuplicateCell(units.iloc[r], int(times_raw.iloc[r]))

    unit_ids = sorted(pd.unique(units))
    time_labels = sorted(int(t) for t in pd.unique(times_raw))
    t_index = {t: j for j, t in enumerate(time_labels)}
    u_index = {u: i for i, u in enumerate(unit_ids)}
    n, m = len(unit_ids), len(time_labels)
    if m < 2:
        raise InputError("panel needs at least two time periods")

    rows = units.map(u_index).to_numpy()
    cols = times_raw.map(t_index).to_numpy()
    Y = np.full((n, m), np.nan)
    Y[rows, cols] = y.to_numpy(dtype=float)
    holes = np.argwhere(np.isnan(Y))
    if len(holes):
        i, j = holes[0]
        raise MissingCell(unit_ids[i], time_labels[j])

    ev_raw = df[ecol].str.strip()
    event = np.full(n, np.nan)
    for r in range(len(df)):
        tok = ev_raw.iloc[r]
        i = rows[r]
        if tok.lower() in _NEVER_TOKENS:
            val = NEVER
        else:
            try:
                lab = float(tok)
            except ValueError as exc:
                raise EventTimeOutOfRange(
                    f"unit {unit_ids[i]!r}: unparseable event time {tok!r}"
                ) from exc
            if lab != round(lab) or int(lab) not in t_index:
                raise EventTimeOutOfRange(
                    f"unit {unit_ids[i]!r}: event time {tok!r} is not one of the panel periods "
                    f"{time_labels[1]}..{time_labels[-1]}"
                )
            val = float(t_index[int(lab)])
            if val == 0:
                raise EventTimeOutOfRange(
                    f"unit {unit_ids[i]!r}: event time {tok!r} is the first period; "
                    "units treated in the first period are not allowed"
                )
        if np.isnan(event[i]):
            event[i] = val
        elif event[i] != val:
            raise InconsistentEventTime(f"unit {unit_ids[i]!r} has more than one event time")

    extras = None
    if extra_columns:
        extras = np.full((n, m, len(extra_columns)), np.nan)
        for k, col in enumerate(extra_columns):
            vals = _to_float(df[col]).to_numpy(dtype=float)
            if np.any(~np.isfinite(vals)):
                raise InputError(f"covariate column {col!r} has missing or non-numeric values")
            extras[rows, cols, k] = vals
    panel = Panel(unit_ids, Y, event, time_labels)
    return panel, extras


def load_panel(source, schema=None) -> Panel:
    """Read a long-format CSV (path, file object or bytes) into a :class:`Panel`.

    ``schema`` maps the logical columns ``unit``, ``time``, ``outcome`` and
    ``event`` to CSV header names, either as a dict or as the string form
    ``"unit=id,time=wave,outcome=y,event=first"``.  Never-treated units have an
    empty event field or the literal ``inf``.  Units are sorted by id and times
    are renumbered ``0..T``.
    """
    df, schema = _read_long(source, schema)
    panel, _ = _panel_from_frame(df, schema)
    return panel


def time_index(panel: Panel, labels: Iterable) -> tuple:
    """Translate original time labels into ``0..T`` indices."""
    lookup = {lab: j for j, lab in enumerate(panel.time_labels)}
    out = []
    for lab in labels:
        if lab not in lookup:
            raise InputError(f"time {lab!r} is not a panel period")
        out.append(lookup[lab])
    return tuple(out)


# --------------------------------------------------------------------------
# within transformation


@dataclass(frozen=True, eq=False)
class DemeanedMatrix:
    """Two-way demeaned values over the estimation window."""

    values: np.ndarray
    unit_means: np.ndarray
    time_means: np.ndarray
    grand_mean: float
    times: tuple


def _within(arr: np.ndarray) -> np.ndarray:
    """Two-way demean over the last two axes (units, times)."""
    return (
        arr
        - arr.mean(axis=-1, keepdims=True)
        - arr.mean(axis=-2, keepdims=True)
        + arr.mean(axis=(-2, -1), keepdims=True)
    )


def _window(estimation_times, T) -> tuple:
    if estimation_times is None:
        return tuple(range(T + 1))
    w = sorted(set(int(t) for t in estimation_times))
    if len(w) < 2:
        raise InputError("estimation window needs at least two periods")
    if w[0] < 0 or w[-1] > T:
        raise InputError(f"estimation times must lie in 0..{T}")
    return tuple(w)


def demean_two_way(matrix, estimation_times=None) -> DemeanedMatrix:
    """``X - rowmean - colmean + grandmean`` over the estimation window.

    The returned ``values`` only hold the window columns.
    """
    x = np.asarray(matrix, dtype=float)
    w = _window(estimation_times, x.shape[1] - 1)
    xw = x[:, list(w)]
    unit_means = xw.mean(axis=1)
    time_means = xw.mean(axis=0)
    grand = float(xw.mean())
    values = xw - unit_means[:, None] - time_means[None, :] + grand
    return DemeanedMatrix(values, unit_means, time_means, grand, w)


# --------------------------------------------------------------------------
# designs


@dataclass(frozen=True)
class DesignConfig:
    """What to put on the right-hand side.

    ``mode`` is ``"static"``, ``"dynamic"`` or ``"saturated"``.  For dynamic
    designs ``relative_times`` lists the candidate leads/lags (default: every
    relative time observed in the window) and ``excluded`` those dropped for
    identification (default: ``-1`` and the most negative observed lead).
    Relative times observed in the window but absent from the included set
    count as excluded.
    """

    mode: str = "dynamic"
    relative_times: tuple = None
    excluded: tuple = None
    estimation_times: tuple = None


@dataclass(frozen=True, eq=False)
class RelativeTimeDesign:
    kind: str
    labels: tuple
    columns: np.ndarray = field(repr=False)
    estimation_times: tuple
    relative_times: tuple
    cells: tuple
    excluded: tuple
    pruned: tuple
    panel: Panel = field(repr=False)

    @property
    def n_columns(self) -> int:
        return len(self.labels)

    def window_columns(self) -> np.ndarray:
        """Raw regressors restricted to the window, shape (k, N, W)."""
        return self.columns[:, :, list(self.estimation_times)]

    def demeaned(self) -> np.ndarray:
        """Demeaned regressors stacked unit-major, shape (N*W, k)."""
        k = self.n_columns
        dd = _within(self.window_columns())
        return dd.reshape(k, -1).T

    def control_units(self) -> np.ndarray:
        return self.panel.event_times > max(self.estimation_times)


def dependent_columns(X: np.ndarray, scale=None, tol: float = RANK_TOL) -> list:
    """Indices of columns that are (numerically) spanned by earlier ones.

    Columns are visited in order, so when a set is collinear the last-added
    member is the one reported.  ``scale`` holds the reference norm of each
    column (by default its own norm); a column whose residual norm is below
    ``tol * scale`` counts as dependent.
    """
    X = np.asarray(X, dtype=float)
    if scale is None:
        scale = np.linalg.norm(X, axis=0)
    basis = np.zeros((X.shape[0], 0))
    dependent = []
    for j in range(X.shape[1]):
        r = X[:, j].copy()
        for _ in range(2):  # reorthogonalise
            r -= basis @ (basis.T @ r)
        nr = np.linalg.norm(r)
        if scale[j] == 0 or nr <= tol * scale[j]:
            dependent.append(j)
        else:
            basis = np.column_stack([basis, r / nr])
    return dependent


def _check_rank(kind, labels, cols, window):
    """Raise if the demeaned regressors are collinear (with the fixed effects)."""
    raw = cols[:, :, list(window)]
    k = raw.shape[0]
    X = _within(raw).reshape(k, -1).T
    scale = np.linalg.norm(raw.reshape(k, -1), axis=1)
    dep = dependent_columns(X, scale)
    if dep:
        raise RankDeficientDesign(
            f"{kind} design is rank deficient after absorbing unit and time effects",
            [labels[j] for j in dep],
        )


def mu_label(l) -> str:
    return f"mu[{int(l)}]"


def delta_label(e, l) -> str:
    return f"delta[{int(e)},{int(l)}]"


def build_design(panel: Panel, config: DesignConfig = None, **kwargs) -> RelativeTimeDesign:
    """Build the regressors for a static, dynamic or saturated regression.

    Keyword arguments are forwarded to :class:`DesignConfig` when ``config``
    is omitted, e.g. ``build_design(panel, mode="saturated")``.
    """
    if config is None:
        config = DesignConfig(**kwargs)
    elif kwargs:
        raise TypeError("pass either a DesignConfig or keyword arguments, not both")
    mode = config.mode.lower()
    if mode == "static":
        return _static_design(panel, config)
    if mode == "dynamic":
        return _dynamic_design(panel, config)
    if mode == "saturated":
        return _saturated_design(panel, config)
    raise ValueError(f"unknown design mode {config.mode!r}")


def _static_design(panel, config):
    w = _window(config.estimation_times, panel.T)
    D = panel.treatment
    cols = D[None, :, :]
    dd = _within(cols[:, :, list(w)])
    scale = np.linalg.norm(cols[:, :, list(w)])
    if scale == 0 or np.linalg.norm(dd) <= RANK_TOL * scale:
        raise NoTreatmentVariation(
            "treatment status does not vary across units within the estimation window"
        )
    return RelativeTimeDesign(
        kind="static",
        labels=("gamma",),
        columns=_readonly(cols),
        estimation_times=w,
        relative_times=(),
        cells=(),
        excluded=(),
        pruned=(),
        panel=panel,
    )


def observed_relative_times(panel: Panel, window) -> list:
    rel = panel.relative_time[:, list(window)]
    vals = np.unique(rel[np.isfinite(rel)])
    return [int(v) for v in vals]


def _dynamic_design(panel, config):
    w = _window(config.estimation_times, panel.T)
    observed = observed_relative_times(panel, w)
    if not observed:
        raise NoTreatmentVariation("no treated units in the estimation window")
    if config.relative_times is None:
        candidates = list(observed)
        if config.excluded is None:
            leads = [l for l in observed if l < 0]
            excluded = {-1, min(leads)} if leads else set()
        else:
            excluded = set(int(l) for l in config.excluded)
    else:
        candidates = sorted(set(int(l) for l in config.relative_times))
        excluded = set() if config.excluded is None else set(int(l) for l in config.excluded)
    included = [l for l in candidates if l not in excluded]
    pruned = [l for l in included if l not in observed]
    if pruned:
        warnings.warn(
            f"relative times {pruned} have no observations in the estimation window and were dropped",
            EmptyCellWarning,
            stacklevel=3,
        )
    included = [l for l in included if l in observed]
    if not included:
        raise RankDeficientDesign("dynamic design has no relative-time indicators left")
    effective_excluded = tuple(l for l in observed if l not in included)
    labels = tuple(mu_label(l) for l in included)
    has_never = bool(panel.never_treated.any())
    if not has_never and len(effective_excluded) < 2:
        raise RankDeficientDesign(
            "without never-treated units at least two relative-time indicators must be excluded "
            f"(excluded: {list(effective_excluded)})",
            labels[-1:],
        )
    rel = panel.relative_time
    cols = np.stack([(rel == l).astype(float) for l in included])
    _check_rank("dynamic", labels, cols, w)
    return RelativeTimeDesign(
        kind="dynamic",
        labels=labels,
        columns=_readonly(cols),
        estimation_times=w,
        relative_times=tuple(included),
        cells=(),
        excluded=effective_excluded,
        pruned=tuple(pruned),
        panel=panel,
    )


def _saturated_design(panel, config):
    T = panel.T
    w = _window(config.estimation_times if config.estimation_times is not None else range(T), T)
    base, tmax = w[0], w[-1]
    if config.relative_times is not None or config.excluded is not None:
        raise ValueError("saturated designs are fully determined by the estimation window")
    control = panel.event_times > tmax
    if not control.any():
        raise RankDeficientDesign(
            f"saturated design needs units not yet treated by period {tmax} as controls"
        )
    layout = panel.layout()
    cells, pruned, excluded = [], [], []
    empty = []
    for e in range(1, T + 1):
        present = e in layout.sizes
        for l in range(-e, T - e + 1):
            t = e + l
            if e > tmax:
                if present and t in w:
                    excluded.append((e, l))
                continue
            if t not in w:
                pruned.append((e, l))
            elif t == base:
                excluded.append((e, l))
            elif present:
                cells.append((e, l))
            else:
                empty.append((e, l))
    if empty:
        warnings.warn(
            f"cohorts without units leave cells {empty} empty; they were pruned",
            EmptyCellWarning,
            stacklevel=3,
        )
    if not cells:
        raise NoTreatmentVariation("no cohort is treated inside the estimation window")
    labels = tuple(delta_label(e, l) for e, l in cells)
    cols = np.stack([panel.cell_indicator(e, l) for e, l in cells])
    _check_rank("saturated", labels, cols, w)
    return RelativeTimeDesign(
        kind="saturated",
        labels=labels,
        columns=_readonly(cols),
        estimation_times=w,
        relative_times=tuple(sorted({l for _, l in cells})),
        cells=tuple(cells),
        excluded=tuple(excluded),
        pruned=tuple(pruned + empty),
        panel=panel,
    )
