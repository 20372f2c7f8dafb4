"""Shared fixtures: random panels, a dummy-variable OLS oracle and small DGPs."""

from __future__ import annotations

import numpy as np

from eventstudykit import NEVER, DGPSpec, Panel
from eventstudykit.dr import CovariatePanel


def random_event_times(rng, N, T, never_share=0.0, require=None):
    """Event times with a random cohort distribution.

    Every cohort in ``require`` (default all of ``1..T``) gets at least two
    units so designs stay identified.
    """
    require = list(range(1, T + 1)) if require is None else list(require)
    p = rng.dirichlet(np.ones(T))
    ev = rng.choice(np.arange(1, T + 1, dtype=float), size=N, p=p)
    if never_share > 0:
        ev[rng.random(N) < never_share] = NEVER
    idx = rng.permutation(N)
    for j, c in enumerate(require):
        ev[idx[2 * j : 2 * j + 2]] = c
    return ev


def random_panel(rng, N=None, T=None, never_share=0.0, require=None, noise=1.0):
    """Panel with unit/time effects, heterogeneous effects and Gaussian noise."""
    N = int(rng.integers(20, 201)) if N is None else N
    T = int(rng.integers(2, 7)) if T is None else T
    ev = random_event_times(rng, N, T, never_share, require)
    alpha = rng.normal(0, 3, N)
    lam = rng.normal(0, 3, T + 1)
    rel = np.arange(T + 1)[None, :] - ev[:, None]
    treated = np.isfinite(rel) & (rel >= 0)
    slope = 0.7 * np.where(np.isfinite(ev), ev, 0.0)[:, None] / T
    effects = np.where(treated, rng.normal(0, 2, (N, 1)) + slope * np.where(treated, rel, 0.0), 0.0)
    y = alpha[:, None] + lam[None, :] + effects + noise * rng.normal(size=(N, T + 1))
    return Panel(tuple(range(N)), y, ev)


def dummy_ols(panel, columns, window=None):
    """Brute-force OLS with explicit unit and time dummies.

    ``columns`` is a (k, N, T+1) array of regressors.  Returns the k slope
    coefficients.
    """
    T = panel.T
    window = list(range(T + 1)) if window is None else list(window)
    N = panel.n_units
    W = len(window)
    y = panel.outcomes[:, window].reshape(-1)
    cols = np.asarray(columns)[:, :, window].reshape(len(columns), -1).T
    unit = np.repeat(np.eye(N), W, axis=0)
    time = np.tile(np.eye(W), (N, 1))[:, 1:]
    X = np.column_stack([cols, unit, time])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return beta[: cols.shape[1]]


def hand_cluster_vcov(X, resid, unit_index, small_sample="CR1"):
    """Sandwich covariance by explicit loops over clusters."""
    X = np.asarray(X)
    k = X.shape[1]
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((k, k))
    groups = np.unique(unit_index)
    for g in groups:
        s = X[unit_index == g].T @ resid[unit_index == g]
        meat += np.outer(s, s)
    V = bread @ meat @ bread
    if small_sample == "CR1":
        G, n = len(groups), X.shape[0]
        V *= G / (G - 1) * (n - 1) / (n - k)
    return V


def nonstationary_spec(noise_sd=1.0, n_units=1000):
    """T=4, four equally likely cohorts, small impact effects and large,
    cohort-specific longer-run effects."""
    grid = {
        (1, 0): 2.0, (1, 1): 15.0, (1, 2): 25.0, (1, 3): 30.0,
        (2, 0): 1.0, (2, 1): 10.0, (2, 2): 18.0,
        (3, 0): 0.5, (3, 1): 4.0,
        (4, 0): 1.0,
    }  # fmt: skip
    return DGPSpec(n_units, 4, {1: 0.25, 2: 0.25, 3: 0.25, 4: 0.25}, grid, noise_sd=noise_sd)


# ---------------------------------------------------------------------------
# confounded two-period design for the doubly robust estimators

CONF_THETA = 2.0
CONF_BETA = 1.5


def confounded_truth(x):
    """True nuisances for :func:`confounded_panel` at target (e=1, l=0)."""
    m_x = 1.0 / (1.0 + np.exp(-(-0.3 + 1.2 * x)))
    return {"g_inf": CONF_BETA * x, "m_x": m_x, "n_x": 1.0 - m_x}


def confounded_panel(rng, N=2000, theta=CONF_THETA):
    """Units are treated at period 1 with probability logistic(-0.3 + 1.2 x)
    and never otherwise; the untreated trend is ``beta * x * t``, so the
    unconditional DID is biased while the conditional one is not."""
    x = rng.normal(size=N)
    m_x = confounded_truth(x)["m_x"]
    ev = np.where(rng.random(N) < m_x, 1.0, NEVER)
    alpha = rng.normal(size=N) + x
    t = np.arange(3)
    y = alpha[:, None] + CONF_BETA * x[:, None] * t[None, :] + rng.normal(size=(N, 3))
    y += theta * ((t[None, :] >= ev[:, None]) & (ev[:, None] == 1))
    X = np.repeat(x[:, None, None], 3, axis=1)
    return CovariatePanel(Panel(tuple(range(N)), y, ev), X)
