"""Cohort effects under conditional parallel trends.

For a target cell ``(e, l)`` with ``t = e + l`` the outcome change is
``dY = Y[t] - Y[0]``, the treated group is cohort ``e`` and the comparison
group is every unit not yet treated at ``t`` (``E > t``).  Three estimators
are provided: regression adjustment (needs the untreated trend ``g``),
inverse propensity weighting (needs ``m(X) = Pr(E=e | X)``,
``n(X) = Pr(E>t | X)`` and ``m = Pr(E=e)``) and the doubly robust score that
combines both and is fitted with K-fold cross-fitting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from sklearn.base import clone
from sklearn.dummy import DummyClassifier, DummyRegressor
from sklearn.linear_model import LinearRegression, LogisticRegression

from .errors import (
    EmptyCohort,
    EmptyControlSet,
    FoldDegenerate,
    InputError,
    OverlapViolation,
    OverlapWarning,
)
from .panel import Panel, _panel_from_frame, _read_long

OVERLAP_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class CovariatePanel:
    """A :class:`Panel` with covariates ``X[i, t, :]`` (``p`` may be zero)."""

    panel: Panel
    X: np.ndarray = None

    def __post_init__(self):
        n, m = self.panel.outcomes.shape
        X = np.zeros((n, m, 0)) if self.X is None else np.asarray(self.X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        if X.shape[:2] != (n, m):
            raise InputError(f"covariates must have shape ({n}, {m}, p), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InputError("covariates contain missing or non-finite values")
        X = X.copy()
        X.flags.writeable = False
        object.__setattr__(self, "X", X)

    @property
    def p(self) -> int:
        return self.X.shape[2]

    def covariates_at(self, t: int) -> np.ndarray:
        return self.X[:, t, :]

    def take(self, index) -> "CovariatePanel":
        return CovariatePanel(self.panel.take(index), self.X[np.asarray(index)])


def load_covariate_panel(source, covariates, schema=None) -> CovariatePanel:
    """Long-format CSV with extra numeric covariate columns."""
    covariates = tuple(covariates)
    df, schema = _read_long(source, schema, covariates)
    panel, X = _panel_from_frame(df, schema, covariates)
    return CovariatePanel(panel, X if X is not None else None)


def _as_function(value) -> Callable:
    if callable(value):
        return value
    if np.ndim(value) == 0:
        c = float(value)
        return lambda X: np.full(np.asarray(X).shape[0], c)
    arr = np.asarray(value, dtype=float)
    return lambda X: arr


@dataclass(frozen=True)
class NuisanceSet:
    """Nuisance functions for one target cell.

    ``g_inf``, ``m_x`` and ``n_x`` map an ``(N, p)`` covariate array to a
    length-``N`` vector; constants and precomputed vectors are accepted too.
    """

    g_inf: object
    m_x: object
    n_x: object
    m_scalar: float

    def __post_init__(self):
        if not 0 < self.m_scalar <= 1:
            raise InputError("m_scalar must lie in (0, 1]")

    def evaluate(self, X) -> tuple:
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        out = []
        for f in (self.g_inf, self.m_x, self.n_x):
            v = np.broadcast_to(np.asarray(_as_function(f)(X), dtype=float), (n,))
            out.append(np.array(v))
        return tuple(out)

    def perturbed(self, component: str, h, eps: float) -> "NuisanceSet":
        """Nuisance with ``component`` replaced by ``component + eps * h``."""
        if component not in {"g_inf", "m_x", "n_x"}:
            raise InputError(f"cannot perturb {component!r}")
        base, hf = _as_function(getattr(self, component)), _as_function(h)
        fields = {"g_inf": self.g_inf, "m_x": self.m_x, "n_x": self.n_x, "m_scalar": self.m_scalar}
        fields[component] = lambda X: base(X) + eps * hf(X)
        return NuisanceSet(**fields)


def _target(cp: CovariatePanel, e: int, l: int):
    T = cp.panel.T
    t = e + l
    if not (1 <= e <= T and 0 <= t <= T):
        raise InputError(f"cell (e={e}, l={l}) is outside the panel's range")
    ev = cp.panel.event_times
    treated = ev == e
    control = ev > t
    if not treated.any():
        raise EmptyCohort(f"cohort {e} has no units")
    if not control.any():
        raise EmptyControlSet(f"no units remain untreated at period {t}")
    dy = cp.panel.outcomes[:, t] - cp.panel.outcomes[:, 0]
    return t, treated, control, dy, cp.covariates_at(t)


def regression_adjust(cp: CovariatePanel, e: int, l: int, g_inf) -> float:
    """Cohort-``e`` mean of ``Y[t] - Y[0] - g_inf(X[t])``."""
    t, treated, _, dy, X = _target(cp, e, l)
    g = np.broadcast_to(np.asarray(_as_function(g_inf)(X), dtype=float), dy.shape)
    return float(np.mean((dy - g)[treated]))


def ipw_catt(cp: CovariatePanel, e: int, l: int, nuisance: NuisanceSet, floor: float = OVERLAP_FLOOR) -> float:
    """Inverse-propensity weighted contrast.

    ``E_N[1{E=e}/m dY - 1{E>t} m(X)/(m n(X)) dY]``.  Raises
    :class:`OverlapViolation` when ``n(X)`` falls below ``floor`` for any
    comparison unit.
    """
    t, treated, control, dy, X = _target(cp, e, l)
    _, m_x, n_x = nuisance.evaluate(X)
    if np.any(n_x[control] < floor):
        raise OverlapViolation(f"Pr(E > {t} | X) is below {floor:g} for some comparison units")
    m = nuisance.m_scalar
    terms = treated / m * dy - np.where(control, m_x / (m * np.where(control, n_x, 1.0)), 0.0) * dy
    return float(np.mean(terms))


def dr_score(w: Mapping, event_times, theta: float, nuisance: NuisanceSet, e: int, l: int) -> np.ndarray:
    """Doubly robust score per unit.

    ``w`` holds ``y_t``, ``y_0`` and ``x`` (``(N, p)`` covariates at ``t``).
    The score is linear in ``theta`` with slope ``-1{E=e}/m``.
    """
    ev = np.atleast_1d(np.asarray(event_times, dtype=float))
    t = e + l
    dy = np.atleast_1d(np.asarray(w["y_t"], dtype=float) - np.asarray(w["y_0"], dtype=float))
    x = np.asarray(w.get("x", np.zeros((dy.size, 0))), dtype=float).reshape(dy.size, -1)
    g, m_x, n_x = nuisance.evaluate(x)
    m = nuisance.m_scalar
    treated = (ev == e).astype(float)
    control = ev > t
    resid = dy - g
    ratio = np.zeros_like(resid)
    ratio[control] = m_x[control] / (m * n_x[control])
    return treated / m * resid - ratio * resid - theta * treated / m


# --------------------------------------------------------------------------
# learners and cross-fitting


_OUTCOME_LEARNERS = {"ols": LinearRegression, "mean": DummyRegressor}
_PROPENSITY_LEARNERS = {
    "logit": lambda: LogisticRegression(penalty=None, max_iter=1000),
    "constant": lambda: DummyClassifier(strategy="prior"),
}


def _make(spec, table, kind):
    if isinstance(spec, str):
        if spec not in table:
            raise InputError(f"unknown {kind} learner {spec!r}; choose from {sorted(table)}")
        return table[spec]()
    return clone(spec)


@dataclass(frozen=True)
class LearnerConfig:
    """Nuisance learners.

    ``outcome`` fits ``g`` on the comparison units (``"ols"`` or ``"mean"``,
    or any scikit-learn regressor); ``propensity`` fits ``m(X)`` and
    ``n(X)`` (``"logit"`` or ``"constant"``, or any classifier with
    ``predict_proba``).  Fixed functions can be supplied instead through
    ``g_inf``, ``m_x`` and ``n_x``; these override the learners.
    """

    outcome: object = "ols"
    propensity: object = "logit"
    g_inf: object = None
    m_x: object = None
    n_x: object = None

    @classmethod
    def coerce(cls, obj) -> "LearnerConfig":
        if obj is None:
            return cls()
        if isinstance(obj, cls):
            return obj
        return cls(**obj)


def _fit_probability(spec, X, target):
    clf = _make(spec, _PROPENSITY_LEARNERS, "propensity")
    clf.fit(X, target.astype(int))
    col = list(clf.classes_).index(1)
    return lambda Z: clf.predict_proba(np.asarray(Z, dtype=float))[:, col]


def fit_nuisances(X, dy, treated, control, learners: LearnerConfig, m_scalar: float) -> NuisanceSet:
    """Fit ``g``, ``m(X)`` and ``n(X)`` on the given (training) units."""
    learners = LearnerConfig.coerce(learners)
    if learners.g_inf is not None:
        g = learners.g_inf
    else:
        reg = _make(learners.outcome, _OUTCOME_LEARNERS, "outcome")
        reg.fit(X[control], dy[control])
        g = lambda Z, reg=reg: reg.predict(np.asarray(Z, dtype=float))  # noqa: E731
    m_x = learners.m_x if learners.m_x is not None else _fit_probability(learners.propensity, X, treated)
    n_x = learners.n_x if learners.n_x is not None else _fit_probability(learners.propensity, X, control)
    return NuisanceSet(g, m_x, n_x, m_scalar)


def stratified_folds(groups, K: int, seed: int = 0) -> np.ndarray:
    """Fold labels ``0..K-1`` assigned round-robin within each group after a
    seeded shuffle."""
    groups = np.asarray(groups)
    rng = np.random.Generator(np.random.Philox(int(seed)))
    folds = np.empty(groups.size, dtype=int)
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % K
    return folds


@dataclass(frozen=True, eq=False)
class DRResult:
    theta: float
    std_error: float
    e: int
    l: int
    fold_assignments: np.ndarray = field(repr=False)
    diagnostics: tuple = field(repr=False, default=())
    psi: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "e": self.e,
            "l": self.l,
            "theta": self.theta,
            "std_error": self.std_error,
            "folds": int(self.fold_assignments.max()) + 1 if self.fold_assignments.size else 0,
            "diagnostics": list(self.diagnostics),
        }


def _clip(values, floor, name, fold):
    low = values < floor
    if low.any():
        warnings.warn(
            f"{int(low.sum())} estimated values of {name} in fold {fold} were clipped at {floor:g}",
            OverlapWarning,
            stacklevel=3,
        )
    return np.clip(values, floor, 1.0), int(low.sum())


def dr_estimate(
    cp: CovariatePanel,
    e: int,
    l: int,
    K: int = 5,
    learner_config=None,
    seed: int = 0,
    floor: float = OVERLAP_FLOOR,
) -> DRResult:
    """Cross-fitted doubly robust estimate of the ``(e, l)`` cohort effect.

    For each fold the nuisances are fitted on the other folds and the score
    is evaluated on the fold; ``theta`` solves the pooled empirical moment.
    ``m`` is the full-sample cohort share.  Without covariates (``p = 0``)
    the nuisances are sample means, so the estimate coincides with the
    not-yet-treated DID contrast for any ``K``.
    """
    if K < 2:
        raise FoldDegenerate("cross-fitting needs K >= 2")
    t, treated, control, dy, X = _target(cp, e, l)
    n = dy.size
    m = treated.mean()
    groups = np.where(treated, 0, np.where(control, 1, 2))
    folds = stratified_folds(groups, K, seed)
    for k in range(K):
        fk = folds == k
        if not (treated & fk).any() or not (control & fk).any():
            raise FoldDegenerate(
                f"fold {k} lacks cohort-{e} or comparison units "
                f"(cohort size {int(treated.sum())}, comparison size {int(control.sum())}, K={K})"
            )
    learners = LearnerConfig.coerce(learner_config)
    g = np.empty(n)
    m_x = np.empty(n)
    n_x = np.empty(n)
    diagnostics = []
    if cp.p == 0:
        mean_g = float(dy[control].mean())
        g[:] = mean_g
        m_x[:] = m
        n_x[:] = control.mean()
        diagnostics.append({"fold": "all", "g_inf": mean_g, "m": float(m), "n": float(control.mean())})
    else:
        for k in range(K):
            test = folds == k
            train = ~test
            nu = fit_nuisances(X[train], dy[train], treated[train], control[train], learners, m)
            gk, mk, nk = nu.evaluate(X[test])
            mk, clipped_m = _clip(mk, floor, "m(X)", k)
            nk, clipped_n = _clip(nk, floor, "n(X)", k)
            g[test], m_x[test], n_x[test] = gk, mk, nk
            diagnostics.append(
                {
                    "fold": k,
                    "n_train": int(train.sum()),
                    "n_eval": int(test.sum()),
                    "mean_m_x": float(mk.mean()),
                    "mean_n_x": float(nk.mean()),
                    "clipped_m_x": clipped_m,
                    "clipped_n_x": clipped_n,
                }
            )
    fixed = NuisanceSet(g, m_x, n_x, float(m))
    w = {"y_t": cp.panel.outcomes[:, t], "y_0": cp.panel.outcomes[:, 0], "x": np.zeros((n, 0))}
    ev = cp.panel.event_times
    a = dr_score(w, ev, 0.0, fixed, e, l)
    slope = treated / m
    theta = float(a.sum() / slope.sum())
    psi = a - theta * slope
    se = float(np.sqrt(np.mean(psi**2) / np.mean(slope) ** 2 / n))
    return DRResult(theta, se, e, l, folds, tuple(diagnostics), psi)


@dataclass(frozen=True)
class OrthogonalityResult:
    slope: float
    std_error: float
    slopes: Mapping[float, float]
    shifts: Mapping[float, float]
    score: str


def orthogonality_check(
    cp: CovariatePanel,
    e: int,
    l: int,
    theta_hat: float,
    nuisance: NuisanceSet,
    direction: Mapping,
    eps=(1e-2, 1e-3),
    score: str = "dr",
) -> OrthogonalityResult:
    """Central finite-difference slope of ``E_N[score]`` along a nuisance
    perturbation.

    ``direction`` maps one nuisance name (``g_inf``, ``m_x`` or ``n_x``) to
    the perturbation ``h``.  ``score`` is ``"dr"`` for the doubly robust score
    or ``"ipw"`` for the plain inverse-propensity moment.  The reported
    ``slope`` uses the smallest ``eps``; ``std_error`` is the sampling noise
    of the per-unit slopes; ``shifts[eps]`` is ``E_N[score(eta + eps h)] -
    E_N[score(eta)]``.
    """
    if len(direction) != 1:
        raise InputError("direction must perturb exactly one nuisance component")
    (component, h), = direction.items()
    t, _, _, dy, X = _target(cp, e, l)
    ev = cp.panel.event_times
    w = {"y_t": cp.panel.outcomes[:, t], "y_0": cp.panel.outcomes[:, 0], "x": X}

    def moment(nu):
        if score == "dr":
            return dr_score(w, ev, theta_hat, nu, e, l)
        if score == "ipw":
            zero_g = NuisanceSet(0.0, nu.m_x, nu.n_x, nu.m_scalar)
            return dr_score(w, ev, theta_hat, zero_g, e, l)
        raise InputError(f"unknown score {score!r}")

    base = moment(nuisance).mean()
    slopes, shifts, per_unit = {}, {}, None
    for ep in sorted(eps, reverse=True):
        up = moment(nuisance.perturbed(component, h, ep))
        down = moment(nuisance.perturbed(component, h, -ep))
        d = (up - down) / (2 * ep)
        slopes[ep] = float(d.mean())
        shifts[ep] = float(up.mean() - base)
        per_unit = d
    small = min(eps)
    se = float(per_unit.std(ddof=1) / np.sqrt(per_unit.size))
    return OrthogonalityResult(slopes[small], se, slopes, shifts, score)
