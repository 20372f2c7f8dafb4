"""Within-transformed least squares, unit-clustered sandwich covariances and
Wald tests."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, stats

from .errors import (
    RankDeficientDesign,
    SampleMismatch,
    SingularBread,
    SingularRestrictionCovariance,
)
from .panel import RANK_TOL, Panel, RelativeTimeDesign, _within


@dataclass(frozen=True, eq=False)
class EstimateSet:
    """Labelled coefficients with their (clustered) covariance matrix.

    The demeaned regressors, residuals and unit index of the underlying fit
    are kept (``regressors``, ``residuals``, ``unit_index``) so that joint
    covariances across fits can be formed later.
    """

    labels: tuple
    coefficients: np.ndarray
    vcov: np.ndarray
    n_units: int
    n_obs: int
    dropped_columns: tuple = ()
    excluded: tuple = ()
    estimation_times: tuple = ()
    small_sample: str = "CR1"
    regressors: np.ndarray = field(default=None, repr=False)
    residuals: np.ndarray = field(default=None, repr=False)
    unit_index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float).reshape(-1)
        vcov = np.asarray(self.vcov, dtype=float)
        labels = tuple(self.labels)
        if not (len(labels) == coef.shape[0] == vcov.shape[0] == vcov.shape[1]):
            raise ValueError("labels, coefficients and vcov must agree in dimension")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "vcov", vcov)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def index(self, label) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(label) from None

    def __getitem__(self, label) -> float:
        return float(self.coefficients[self.index(label)])

    def __contains__(self, label) -> bool:
        return label in self.labels

    def se(self, label) -> float:
        return float(self.std_errors[self.index(label)])

    def as_dict(self) -> dict:
        return dict(zip(self.labels, self.coefficients.tolist()))

    def subset(self, labels: Sequence[str]) -> "EstimateSet":
        idx = [self.index(lab) for lab in labels]
        return replace(
            self,
            labels=tuple(labels),
            coefficients=self.coefficients[idx],
            vcov=self.vcov[np.ix_(idx, idx)],
            regressors=None if self.regressors is None else self.regressors[:, idx],
        )

    def to_dict(self, include_vcov: bool = False) -> dict:
        out = {
            "labels": list(self.labels),
            "coefficients": self.coefficients.tolist(),
            "std_errors": self.std_errors.tolist(),
            "n_units": int(self.n_units),
            "n_obs": int(self.n_obs),
            "dropped_columns": list(self.dropped_columns),
            "excluded": [x if isinstance(x, (int, str)) else list(x) for x in self.excluded],
            "estimation_times": list(self.estimation_times),
            "small_sample": self.small_sample,
        }
        if include_vcov:
            out["vcov"] = self.vcov.tolist()
        return out


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float
    restriction_labels: tuple = ()

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "restriction_labels": list(self.restriction_labels),
        }


def _small_sample_factor(kind: str, n_groups: int, n_obs: int, k: int) -> float:
    kind = kind.upper()
    if kind == "CR0":
        return 1.0
    if kind != "CR1":
        raise ValueError(f"unknown small-sample correction {kind!r}")
    if n_groups < 2 or n_obs <= k:
        return 1.0
    return n_groups / (n_groups - 1) * (n_obs - 1) / (n_obs - k)


def _bread(X: np.ndarray) -> np.ndarray:
    """``(X'X)^{-1}`` through a QR factorisation of ``X``."""
    r = np.linalg.qr(X, mode="r")
    d = np.abs(np.diag(r))
    if d.size and (d.min() <= RANK_TOL * max(d.max(), 1.0) or not np.all(np.isfinite(d))):
        raise SingularBread("X'X is singular")
    rinv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    return rinv @ rinv.T


def _cluster_scores(X, residuals, unit_index):
    groups, inverse = np.unique(np.asarray(unit_index), return_inverse=True)
    scores = np.zeros((groups.size, X.shape[1]))
    np.add.at(scores, inverse, X * np.asarray(residuals)[:, None])
    return scores


def cluster_vcov(X, residuals, unit_index, *, small_sample: str = "CR1") -> np.ndarray:
    """Unit-clustered sandwich ``B M B`` with ``B = (X'X)^{-1}``.

    ``M`` sums the outer products of the per-unit score sums ``X_g' u_g``.
    CR1 multiplies by ``G/(G-1) * (n-1)/(n-k)``; CR0 leaves the sandwich raw.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    bread = _bread(X)
    scores = _cluster_scores(X, residuals, unit_index)
    meat = scores.T @ scores
    V = bread @ meat @ bread
    V = 0.5 * (V + V.T)
    return V * _small_sample_factor(small_sample, scores.shape[0], X.shape[0], X.shape[1])


def _outcome_matrix(outcomes, panel: Panel) -> np.ndarray:
    if outcomes is None:
        return panel.outcomes
    if isinstance(outcomes, Panel):
        y = outcomes.outcomes
    else:
        y = np.asarray(outcomes, dtype=float)
    if y.shape != panel.outcomes.shape:
        raise SampleMismatch(f"outcome shape {y.shape} does not match design panel {panel.outcomes.shape}")
    return y


def within_ols(design: RelativeTimeDesign, outcomes=None, *, small_sample: str = "CR1") -> EstimateSet:
    """Two-way fixed-effects OLS of ``outcomes`` on the design's regressors.

    Unit and time effects are absorbed by demeaning over the design's
    estimation window; the slope coefficients equal those of the explicit
    dummy-variable regression.  ``outcomes`` defaults to the design panel's.
    """
    panel = design.panel
    w = list(design.estimation_times)
    Y = _outcome_matrix(outcomes, panel)[:, w]
    y = _within(Y).reshape(-1)
    X = design.demeaned()
    q, r = np.linalg.qr(X)
    d = np.abs(np.diag(r))
    scale = np.linalg.norm(design.window_columns().reshape(design.n_columns, -1), axis=1)
    bad = [design.labels[j] for j in range(len(d)) if d[j] <= RANK_TOL * max(scale[j], 1.0)]
    if bad:
        raise RankDeficientDesign("regressors are collinear with the fixed effects", bad)
    beta = linalg.solve_triangular(r, q.T @ y)
    resid = y - X @ beta
    unit_index = np.repeat(np.arange(panel.n_units), len(w))
    V = cluster_vcov(X, resid, unit_index, small_sample=small_sample)
    return EstimateSet(
        labels=design.labels,
        coefficients=beta,
        vcov=V,
        n_units=panel.n_units,
        n_obs=y.size,
        dropped_columns=tuple(str(p) for p in design.pruned),
        excluded=design.excluded,
        estimation_times=design.estimation_times,
        small_sample=small_sample.upper(),
        regressors=X,
        residuals=resid,
        unit_index=unit_index,
    )


def joint_fe_iw_vcov(fe_fit: EstimateSet, iw_fit: EstimateSet, f_hat, nu_labels=None) -> EstimateSet:
    """Joint covariance of dynamic FE and IW estimates from one sample.

    ``iw_fit`` is the saturated regression and ``f_hat`` the (cells x lags)
    matrix mapping its coefficients to the IW estimates, or an object with
    ``f_hat`` and ``labels`` attributes (an ``IWResult``).  Diagonal blocks
    equal each fit's own covariance; the cross block stacks the per-unit
    scores of both regressions.
    """
    if hasattr(f_hat, "f_hat"):
        nu_labels = f_hat.labels if nu_labels is None else nu_labels
        f_hat = f_hat.f_hat
    f = np.asarray(f_hat, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] != len(iw_fit.labels):
        raise ValueError("f_hat must have one row per saturated coefficient")
    if nu_labels is None:
        nu_labels = tuple(f"nu[{j}]" for j in range(f.shape[1]))
    for fit in (fe_fit, iw_fit):
        if fit.regressors is None or fit.residuals is None:
            raise ValueError("fits must carry regressors and residuals")
    if (
        fe_fit.n_obs != iw_fit.n_obs
        or tuple(fe_fit.estimation_times) != tuple(iw_fit.estimation_times)
        or not np.array_equal(fe_fit.unit_index, iw_fit.unit_index)
    ):
        raise SampleMismatch("FE and IW fits were estimated on different samples")

    def scaled_scores(fit):
        X = fit.regressors
        s = _cluster_scores(X, fit.residuals, fit.unit_index)
        c = _small_sample_factor(fit.small_sample, s.shape[0], X.shape[0], X.shape[1])
        return _bread(X), s * np.sqrt(c)

    b1, s1 = scaled_scores(fe_fit)
    b2, s2 = scaled_scores(iw_fit)
    cross = b1 @ (s1.T @ s2) @ b2 @ f
    sigma_iw = f.T @ iw_fit.vcov @ f
    sigma_iw = 0.5 * (sigma_iw + sigma_iw.T)
    k1, k2 = len(fe_fit.labels), f.shape[1]
    V = np.empty((k1 + k2, k1 + k2))
    V[:k1, :k1] = fe_fit.vcov
    V[:k1, k1:] = cross
    V[k1:, :k1] = cross.T
    V[k1:, k1:] = sigma_iw
    return EstimateSet(
        labels=tuple(fe_fit.labels) + tuple(nu_labels),
        coefficients=np.concatenate([fe_fit.coefficients, f.T @ iw_fit.coefficients]),
        vcov=V,
        n_units=fe_fit.n_units,
        n_obs=fe_fit.n_obs,
        estimation_times=fe_fit.estimation_times,
        small_sample=fe_fit.small_sample,
    )


def _restriction_matrix(est: EstimateSet, restriction):
    """Accept a matrix, a list of labels, or a list of {label: weight} rows."""
    if isinstance(restriction, np.ndarray) or (
        isinstance(restriction, Sequence)
        and restriction
        and isinstance(restriction[0], (Sequence, np.ndarray))
        and not isinstance(restriction[0], str)
    ):
        R = np.atleast_2d(np.asarray(restriction, dtype=float))
        names = tuple(f"row{j}" for j in range(R.shape[0]))
        return R, names
    if isinstance(restriction, (str, Mapping)):
        restriction = [restriction]
    rows, names = [], []
    for item in restriction:
        row = np.zeros(len(est.labels))
        if isinstance(item, str):
            row[est.index(item)] = 1.0
            names.append(item)
        else:
            for lab, w in item.items():
                row[est.index(lab)] += float(w)
            names.append(" + ".join(f"{w:g}*{lab}" for lab, w in item.items()))
        rows.append(row)
    return np.array(rows), tuple(names)


def wald_test(est: EstimateSet, restriction, value=None) -> WaldResult:
    """Chi-square Wald test of ``R b = value``.

    ``restriction`` may be a matrix with one row per restriction, a list of
    coefficient labels (each tested against its entry of ``value``), or a
    list of ``{label: weight}`` rows.
    """
    R, names = _restriction_matrix(est, restriction)
    if R.shape[1] != len(est.labels):
        raise ValueError("restriction matrix has the wrong number of columns")
    q = R.shape[0]
    if np.linalg.matrix_rank(R) < q:
        raise ValueError("restriction rows are linearly dependent")
    v = np.zeros(q) if value is None else np.broadcast_to(np.asarray(value, dtype=float), (q,))
    d = R @ est.coefficients - v
    # an exactly satisfied restriction is reported as such even when the
    # covariance is degenerate (e.g. noiseless data)
    scale = max(1.0, float(np.abs(est.coefficients).max(initial=0.0)), float(np.abs(v).max(initial=0.0)))
    if np.all(np.abs(d) <= 1e-10 * scale):
        return WaldResult(statistic=0.0, df=q, p_value=1.0, restriction_labels=names)
    S = R @ est.vcov @ R.T
    S = 0.5 * (S + S.T)
    ev = np.linalg.eigvalsh(S)
    if ev.min() <= 1e-12 * max(abs(ev.max()), 1e-300):
        raise SingularRestrictionCovariance("covariance of the restricted coefficients is singular")
    stat = float(d @ np.linalg.solve(S, d))
    stat = max(stat, 0.0)
    return WaldResult(statistic=stat, df=q, p_value=float(stats.chi2.sf(stat, q)), restriction_labels=names)
