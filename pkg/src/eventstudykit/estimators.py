"""Static and dynamic two-way FE estimators, the saturated cohort-by-relative-
time regression, direct DID contrasts and interaction-weighted (IW)
aggregation."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    EmptyCohort,
    EmptyControlSet,
    InvalidBasePeriod,
    NoEstimableCells,
    NoLeadCoefficients,
    NotYetTreatedViolated,
)
from .panel import NEVER, CohortLayout, DesignConfig, Panel, build_design, delta_label
from .regression import EstimateSet, WaldResult, wald_test, within_ols

ESTIMATED = "ESTIMATED"
NORMALIZED_ZERO = "NORMALIZED_ZERO"
UNIDENTIFIED = "UNIDENTIFIED"

_LABEL = re.compile(r"^(mu|nu|delta)\[(-?\d+)(?:,(-?\d+))?\]$")


def parse_label(label: str):
    """Split ``"mu[-1]"`` / ``"delta[2,0]"`` into ``(kind, cohort, rel_time)``.

    Returns ``None`` for labels that carry no relative time (``gamma``).
    """
    m = _LABEL.match(label)
    if not m:
        return None
    kind = m.group(1)
    if kind == "delta":
        return kind, int(m.group(2)), int(m.group(3))
    return kind, None, int(m.group(2))


@dataclass(frozen=True)
class CattCell:
    estimate: float
    std_error: float | None
    status: str


@dataclass(frozen=True, eq=False)
class CattTable:
    """Cohort-by-relative-time effect estimates from the saturated regression.

    ``cells`` covers every ``(e, l)`` a present cohort can reach in ``0..T``.
    Cells of the control cohorts and of the base period are normalised to
    zero; cells outside the estimation window are unidentified.
    """

    cells: Mapping[tuple, CattCell]
    estimation_times: tuple
    base_period: int
    control_cohorts: tuple
    fit: EstimateSet = field(repr=False)
    layout: CohortLayout = field(repr=False)

    def __getitem__(self, cell) -> CattCell:
        return self.cells[tuple(cell)]

    def estimate(self, e, l) -> float:
        return self.cells[(e, l)].estimate

    def with_status(self, status) -> list:
        return [c for c, v in self.cells.items() if v.status == status]

    @property
    def control_cohort_spec(self) -> dict:
        return {"s": self.base_period, "C": list(self.control_cohorts)}

    def to_rows(self) -> list:
        rows = []
        for (e, l), cell in sorted(self.cells.items()):
            rows.append(
                {"e": e, "l": l, "estimate": cell.estimate, "std_error": cell.std_error, "status": cell.status}
            )
        return rows


def static_fe(panel: Panel, estimation_times=None, *, small_sample="CR1") -> EstimateSet:
    """Coefficient ``gamma`` on the treatment indicator with unit and time effects."""
    design = build_design(panel, DesignConfig("static", estimation_times=estimation_times))
    return within_ols(design, small_sample=small_sample)


def dynamic_fe(panel: Panel, config: DesignConfig = None, *, small_sample="CR1", **kwargs) -> EstimateSet:
    """Coefficients ``mu[l]`` on relative-time indicators.

    ``config`` (or keyword arguments ``relative_times``, ``excluded``,
    ``estimation_times``) selects the leads and lags; see
    :class:`~eventstudykit.panel.DesignConfig`.
    """
    if config is None:
        config = DesignConfig("dynamic", **kwargs)
    design = build_design(panel, config)
    return within_ols(design, small_sample=small_sample)


def saturated_catt(panel: Panel, estimation_times=None, *, small_sample="CR1") -> CattTable:
    """Estimate every identified ``CATT_{e,l}`` from the cohort-interacted model.

    The default window is ``0..T-1``: without never-treated units the last
    period has no untreated comparison group.
    """
    design = build_design(panel, DesignConfig("saturated", estimation_times=estimation_times))
    fit = within_ols(design, small_sample=small_sample)
    w = design.estimation_times
    base, tmax = w[0], w[-1]
    layout = panel.layout()
    estimated = {cell: j for j, cell in enumerate(design.cells)}
    se = fit.std_errors
    cells = {}
    for e in layout.cohorts:
        for l in range(-e, panel.T - e + 1):
            t = e + l
            if (e, l) in estimated:
                j = estimated[(e, l)]
                cells[(e, l)] = CattCell(float(fit.coefficients[j]), float(se[j]), ESTIMATED)
            elif t in w and (e > tmax or t == base):
                cells[(e, l)] = CattCell(0.0, None, NORMALIZED_ZERO)
            else:
                cells[(e, l)] = CattCell(math.nan, None, UNIDENTIFIED)
    controls = tuple(c for c in layout.cohorts if c > tmax)
    if layout.never_treated_size:
        controls = controls + (NEVER,)
    return CattTable(cells, w, base, controls, fit, layout)


@dataclass(frozen=True)
class DidEstimate:
    estimate: float
    std_error: float
    n_treated: int
    n_control: int


def _normalize_cohort(c):
    if isinstance(c, str):
        if c.strip().lower() in {"inf", "never", "infinity"}:
            return NEVER
        c = int(c)
    return NEVER if c == NEVER else int(c)


def did_catt(panel: Panel, e: int, l: int, s: int = 0, C: Iterable = None) -> DidEstimate:
    """Direct DID estimate of ``CATT_{e,l}``.

    Mean change ``Y[e+l] - Y[s]`` in cohort ``e`` minus the same mean change in
    the control cohorts ``C`` (which must not be treated by ``e+l``; use
    ``NEVER`` for never-treated units).  ``C`` defaults to every cohort
    treated after ``e+l``, never-treated included.  The standard error treats
    the two group means as independent.
    """
    T = panel.T
    t = e + l
    if not 0 <= t <= T:
        raise ValueError(f"period e+l={t} is outside 0..{T}")
    if not (0 <= s < e and s <= T):
        raise InvalidBasePeriod(f"base period s={s} must satisfy 0 <= s < e={e}")
    ev = panel.event_times
    if C is None:
        C = sorted({float(c) for c in ev if c > t})
    C = [_normalize_cohort(c) for c in C]
    if not C:
        raise EmptyControlSet("control cohort set is empty")
    late = [c for c in C if c <= t]
    if late:
        raise NotYetTreatedViolated(f"control cohorts {late} are already treated by period {t}")
    treated = ev == e
    control = np.isin(ev, np.array(C, dtype=float))
    if not treated.any():
        raise EmptyCohort(f"cohort {e} has no units")
    if not control.any():
        raise EmptyControlSet(f"control cohorts {C} have no units")
    change = panel.outcomes[:, t] - panel.outcomes[:, s]
    a, b = change[treated], change[control]
    est = float(a.mean() - b.mean())
    se = float(np.sqrt(a.var() / a.size + b.var() / b.size))
    return DidEstimate(est, se, int(a.size), int(b.size))


@dataclass(frozen=True, eq=False)
class IWResult:
    """Interaction-weighted estimates ``nu[l]`` (and optionally ``kappa``).

    ``f_hat`` maps the saturated coefficient vector to the ``nu`` vector:
    ``nu = f_hat.T @ delta``.  ``shares[l][e]`` is the weight of cohort ``e``
    at relative time ``l``.
    """

    nu: Mapping[int, float]
    std_errors: Mapping[int, float]
    labels: tuple
    relative_times: tuple
    f_hat: np.ndarray = field(repr=False)
    shares: Mapping[int, Mapping[int, float]] = field(repr=False)
    cohort_sizes: Mapping[int, int] = field(repr=False)
    estimates: EstimateSet = field(repr=False)
    kappa: float | None = None
    kappa_se: float | None = None

    def f_matrix(self, l: int):
        """The ``(t, e)`` weight matrix for relative time ``l``.

        Returns ``(times, cohorts, matrix)`` where ``matrix[i, j]`` is the
        weight on ``delta[cohorts[j], l]`` placed at period ``times[i]``.
        """
        share = self.shares[l]
        cohorts = sorted(share)
        times = [e + l for e in cohorts]
        m = np.zeros((len(times), len(cohorts)))
        for j, e in enumerate(cohorts):
            m[times.index(e + l), j] = share[e]
        return times, cohorts, m

    def to_dict(self) -> dict:
        return {
            "nu": {str(l): self.nu[l] for l in self.relative_times},
            "std_errors": {str(l): self.std_errors[l] for l in self.relative_times},
            "shares": {str(l): {str(e): w for e, w in self.shares[l].items()} for l in self.relative_times},
            "kappa": self.kappa,
            "kappa_se": self.kappa_se,
        }


def iw_dynamic(catt: CattTable, layout: CohortLayout = None, relative_times=None) -> IWResult:
    """Cohort-share weighted averages of the estimated ``delta[e, l]``.

    For each ``l`` only cohorts with an ESTIMATED cell enter, with weights
    ``N_e / sum N_e`` over those cohorts.  ``kappa`` is filled in as well when
    any post-treatment cell is estimated.
    """
    layout = catt.layout if layout is None else layout
    fit = catt.fit
    by_l = {}
    for (e, l), cell in catt.cells.items():
        if cell.status == ESTIMATED:
            by_l.setdefault(l, []).append(e)
    if relative_times is None:
        relative_times = sorted(by_l)
    relative_times = tuple(int(l) for l in relative_times)
    missing = [l for l in relative_times if l not in by_l]
    if missing or not relative_times:
        raise NoEstimableCells(f"no estimated cells for relative times {missing}")
    f = np.zeros((len(fit.labels), len(relative_times)))
    shares = {}
    for j, l in enumerate(relative_times):
        cohorts = sorted(by_l[l])
        total = sum(layout.sizes[e] for e in cohorts)
        shares[l] = {e: layout.sizes[e] / total for e in cohorts}
        for e in cohorts:
            f[fit.index(delta_label(e, l)), j] = shares[l][e]
    labels = tuple(f"nu[{l}]" for l in relative_times)
    coef = f.T @ fit.coefficients
    V = f.T @ fit.vcov @ f
    V = 0.5 * (V + V.T)
    est = EstimateSet(
        labels=labels,
        coefficients=coef,
        vcov=V,
        n_units=fit.n_units,
        n_obs=fit.n_obs,
        estimation_times=fit.estimation_times,
        small_sample=fit.small_sample,
    )
    se = est.std_errors
    kappa = kappa_se = None
    try:
        kappa, kappa_se = iw_static(catt, layout)
    except NoEstimableCells:
        pass
    return IWResult(
        nu={l: float(c) for l, c in zip(relative_times, coef)},
        std_errors={l: float(s) for l, s in zip(relative_times, se)},
        labels=labels,
        relative_times=relative_times,
        f_hat=f,
        shares=shares,
        cohort_sizes=dict(layout.sizes),
        estimates=est,
        kappa=kappa,
        kappa_se=kappa_se,
    )


def kappa_weights(catt: CattTable, layout: CohortLayout = None) -> np.ndarray:
    """Weights on the saturated coefficients that form ``kappa``."""
    layout = catt.layout if layout is None else layout
    post = {}
    for (e, l), cell in catt.cells.items():
        if cell.status == ESTIMATED and l >= 0:
            post.setdefault(e, []).append(l)
    if not post:
        raise NoEstimableCells("no estimated post-treatment cells")
    total = sum(layout.sizes[e] for e in post)
    a = np.zeros(len(catt.fit.labels))
    for e, ls in post.items():
        for l in ls:
            a[catt.fit.index(delta_label(e, l))] = layout.sizes[e] / total / len(ls)
    return a


def iw_static(catt: CattTable, layout: CohortLayout = None) -> tuple:
    """``kappa``: cohort shares times the within-cohort average of post-treatment
    effects.  Returns ``(estimate, std_error)``."""
    a = kappa_weights(catt, layout)
    fit = catt.fit
    return float(a @ fit.coefficients), float(np.sqrt(max(a @ fit.vcov @ a, 0.0)))


def lead_labels(labels) -> list:
    out = []
    for lab in labels:
        parsed = parse_label(lab)
        if parsed is not None and parsed[2] < 0:
            out.append(lab)
    return out


def pretrend_test(fit) -> WaldResult:
    """Joint Wald test that every lead coefficient is zero.

    Accepts an ``EstimateSet`` (dynamic FE or IW), a ``CattTable`` or an
    ``IWResult``.
    """
    if isinstance(fit, CattTable):
        fit = fit.fit
    elif isinstance(fit, IWResult):
        fit = fit.estimates
    leads = lead_labels(fit.labels)
    if not leads:
        raise NoLeadCoefficients("fit has no lead coefficients to test")
    return wald_test(fit, leads)


CATT_CSV_COLUMNS = ("e", "l", "estimate", "std_error", "status")


def catt_to_csv(catt: CattTable) -> str:
    """Cell table as CSV (``e,l,estimate,std_error,status``), full precision."""
    lines = [",".join(CATT_CSV_COLUMNS)]
    for r in catt.to_rows():
        se = "" if r["std_error"] is None else repr(r["std_error"])
        est = "" if math.isnan(r["estimate"]) else repr(r["estimate"])
        lines.append(f"{r['e']},{r['l']},{est},{se},{r['status']}")
    return "\n".join(lines) + "\n"


def read_catt_csv(source) -> dict:
    """``(e, l) -> estimate`` for the ESTIMATED and NORMALIZED_ZERO rows of a
    cell table written by :func:`catt_to_csv`."""
    import csv
    import io

    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        if row["status"] in (ESTIMATED, NORMALIZED_ZERO):
            out[(int(row["e"]), int(row["l"]))] = float(row["estimate"])
    return out
