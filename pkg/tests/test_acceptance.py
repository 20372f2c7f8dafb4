"""Acceptance suite.

Every criterion prints one ``PASS``/``FAIL`` line and then asserts.  The
Monte Carlo study on the three-cohort design is run once and shared by the
criteria that need it.
"""

import math
import time
import warnings

import numpy as np
import pytest

from eventstudykit import (
    three_cohort_spec,
    build_design,
    did_catt,
    dynamic_fe,
    dynamic_weights,
    iw_dynamic,
    reconstruct_fe,
    run_study,
    saturated_catt,
    simulate_panel,
    static_weights,
    within_ols,
)
from eventstudykit.dr import CovariatePanel, NuisanceSet, dr_estimate, orthogonality_check
from eventstudykit.errors import EmptyCellWarning, EstimationError, ExcludedLagWarning, OverlapWarning

from helpers import CONF_BETA, CONF_THETA, confounded_panel, confounded_truth, dummy_ols, nonstationary_spec, random_panel

MASTER_SEED = 20240101
REPS = 1000

# Pinned from a 1000-replication pilot at MASTER_SEED.  The mean matches the
# noiseless equal-cohort limit -47/16 of the lead coefficient; every pilot
# replication had a negative lead.
PINNED_LEAD_MEAN = -47 / 16
PINNED_LEAD_FRAC_NEGATIVE = 1.0


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def three_cohort_study():
    configs = [
        {"model": "dynamic", "relative_times": (-1, 0, 1, 2)},
        "iw",
        "saturated",
    ]
    start = time.perf_counter()
    study = run_study(three_cohort_spec(), REPS, configs, master_seed=MASTER_SEED, workers=1)
    return study, time.perf_counter() - start


def test_criterion_1_lead_usually_negative(capsys, three_cohort_study):
    study, elapsed = three_cohort_study
    s = study["dynamic", "mu[-1]"]
    # binomial MC se of the fraction, with p kept one replication away from 0/1
    p = min(max(PINNED_LEAD_FRAC_NEGATIVE, 1 / REPS), 1 - 1 / REPS)
    frac_se = math.sqrt(p * (1 - p) / s.n)
    ok = (
        study.n_failed["dynamic"] == 0
        and abs(s.mean - PINNED_LEAD_MEAN) < 3 * s.mcse
        and abs(s.frac_negative - PINNED_LEAD_FRAC_NEGATIVE) <= 3 * frac_se
        and elapsed < 120
    )
    report(
        capsys, 1, ok,
        f"mean(mu[-1])={s.mean:.5f} (pinned {PINNED_LEAD_MEAN:.5f}, 3 MC se={3 * s.mcse:.5f}), "
        f"fraction negative={s.frac_negative:.3f} (pinned {PINNED_LEAD_FRAC_NEGATIVE}, 3 MC se={3 * frac_se:.4f}), "
        f"{REPS} reps in {elapsed:.1f}s",
    )  # fmt: skip


def test_criterion_2_iw_recovers_share_weighted_effects(capsys, three_cohort_study):
    study, _ = three_cohort_study
    nu0, nu1 = study["iw", "nu[0]"], study["iw", "nu[1]"]
    # l=0: cohorts 1 and 2 are estimated with equal shares, (2 + 3) / 2
    # l=1: only cohort 1 is estimated, 18
    ok = abs(nu0.mean - 2.5) < 3 * nu0.mcse and abs(nu1.mean - 18.0) < 3 * nu1.mcse and study.n_failed["iw"] == 0
    report(
        capsys, 2, ok,
        f"mean(nu[0])={nu0.mean:.5f} vs 2.5 (3 MC se={3 * nu0.mcse:.5f}), "
        f"mean(nu[1])={nu1.mean:.5f} vs 18 (3 MC se={3 * nu1.mcse:.5f})",
    )  # fmt: skip


def test_criterion_3_weight_sums(capsys):
    rng = np.random.default_rng(303)
    worst, panels = 0.0, 0
    for i in range(120):
        p = random_panel(rng, never_share=0.2 if i % 3 == 0 else 0.0)
        sw = static_weights(p)
        worst = max(worst, abs(sum(v for (e, l), v in sw.weights.items() if l >= 0) - 1.0))
        design = build_design(p, mode="dynamic")
        for l in design.relative_times:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ExcludedLagWarning)
                dw = dynamic_weights(p, l)
            for lp in design.relative_times:
                worst = max(worst, abs(dw.sums[lp] - (1.0 if lp == l else 0.0)))
        panels += 1
    report(capsys, 3, panels >= 100 and worst < 1e-8, f"{panels} panels, largest sum deviation {worst:.2e}")


def test_criterion_4_negative_weights_exist(capsys):
    rng = np.random.default_rng(404)
    missing = []
    for i in range(150):
        p = random_panel(rng)
        ev = p.event_times
        sw = static_weights(p)
        flagged = set(sw.negativity_flags)
        early = [e for e in p.layout().cohorts if e < ev.mean()]
        last_period = {(e, p.T - e) for e in early}
        if not flagged & last_period:
            missing.append(i)
    report(capsys, 4, not missing, f"150 panels without never-treated units, panels lacking a flagged cell: {missing}")


def test_criterion_5_reconstruction_identity(capsys):
    rng = np.random.default_rng(505)
    worst, designs = 0.0, 0
    while designs < 60:
        p = random_panel(rng)
        window = tuple(range(p.T))
        catt = saturated_catt(p)
        fit = dynamic_fe(p, estimation_times=window)
        for lab in fit.labels:
            l = int(lab[3:-1])
            w = dynamic_weights(p, l, estimation_times=window)
            worst = max(worst, abs(reconstruct_fe(w, catt) - fit[lab]))
        designs += 1
    report(capsys, 5, worst < 1e-8, f"{designs} spanning designs, largest gap {worst:.2e}")


def test_criterion_6_did_equivalence_and_unbiasedness(capsys, three_cohort_study):
    rng = np.random.default_rng(606)
    worst, cells = 0.0, 0
    for _ in range(60):
        p = random_panel(rng)
        catt = saturated_catt(p)
        for (e, l), cell in catt.cells.items():
            if cell.status != "ESTIMATED":
                continue
            worst = max(worst, abs(cell.estimate - did_catt(p, e, l, s=0, C=[p.T]).estimate))
            cells += 1
    study, _ = three_cohort_study
    spec = three_cohort_spec()
    gaps = {}
    for lab, s in study.estimators["saturated"].items():
        e, l = (int(x) for x in lab[lab.index("[") + 1 : -1].split(","))
        gaps[lab] = (s.mean - spec.effect(e, l)) / s.mcse
    ok = worst < 1e-8 and cells > 0 and all(abs(z) < 3 for z in gaps.values())
    detail = ", ".join(f"{k}: {v:+.2f} se" for k, v in gaps.items())
    report(capsys, 6, ok, f"{cells} cells vs DID, largest gap {worst:.2e}; MC bias in se units: {detail}")


def test_criterion_7_dummy_ols_oracle(capsys):
    rng = np.random.default_rng(707)
    worst, fits = 0.0, 0
    for _ in range(80):
        N, T = int(rng.integers(4, 21)), int(rng.integers(2, 6))
        p = random_panel(rng, N=N, T=T, never_share=0.2 * rng.integers(0, 2), require=range(1, min(T, N // 2) + 1))
        for mode in ("static", "dynamic", "saturated"):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", EmptyCellWarning)
                    d = build_design(p, mode=mode)
            except EstimationError:
                continue
            ref = dummy_ols(p, d.columns, d.estimation_times)
            worst = max(worst, float(np.max(np.abs(within_ols(d).coefficients - ref))))
            fits += 1
    report(capsys, 7, fits > 100 and worst < 1e-8, f"{fits} fits with N<=20, T<=5, largest gap {worst:.2e}")


def _dr_mc(learners, reps=200, seed=808, n_units=8000):
    # unnormalised inverse-propensity weights carry an O(1/N) bias when only
    # the propensity model is right; at this N it is far below the MC se
    rng = np.random.default_rng(seed)
    th = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OverlapWarning)
        for r in range(reps):
            th.append(dr_estimate(confounded_panel(rng, N=n_units), 1, 0, K=5, learner_config=learners, seed=r).theta)
    th = np.array(th)
    return th.mean(), th.std(ddof=1) / math.sqrt(reps)


def test_criterion_8_doubly_robust(capsys):
    rng = np.random.default_rng(808)
    worst, checked = 0.0, 0
    for _ in range(40):
        p = random_panel(rng, N=int(rng.integers(60, 160)), never_share=0.25)
        cp = CovariatePanel(p, np.zeros((p.n_units, p.T + 1, 0)))
        for e in p.layout().cohorts:
            for l in range(0, p.T - e + 1):
                t = e + l
                control = sorted({c for c in p.event_times if c > t})
                if not control or min(np.sum(p.event_times == e), np.sum(p.event_times > t)) < 5:
                    continue
                gap = dr_estimate(cp, e, l, K=5).theta - did_catt(p, e, l, s=0, C=control).estimate
                worst = max(worst, abs(gap))
                checked += 1
    reduction = checked > 50 and worst < 1e-10

    robust = {}
    for name, learners in {
        "outcome model only": {"outcome": "ols", "propensity": "constant"},
        "propensity model only": {"outcome": "mean", "propensity": "logit"},
    }.items():
        mean, se = _dr_mc(learners)
        robust[name] = (mean, se, abs(mean - CONF_THETA) < 3 * se)

    cp = confounded_panel(np.random.default_rng(809), N=20000)
    m = float(np.mean(cp.panel.event_times == 1))
    truth = NuisanceSet(
        g_inf=lambda X: CONF_BETA * X[:, 0],
        m_x=lambda X: confounded_truth(X[:, 0])["m_x"],
        n_x=lambda X: confounded_truth(X[:, 0])["n_x"],
        m_scalar=m,
    )
    h = lambda X: X[:, 0]  # noqa: E731
    dr_slopes = [orthogonality_check(cp, 1, 0, CONF_THETA, truth, {c: h}) for c in ("g_inf", "m_x")]
    ipw = orthogonality_check(cp, 1, 0, CONF_THETA, truth, {"m_x": h}, score="ipw")
    orthogonal = all(abs(r.slope) < 3 * r.std_error for r in dr_slopes) and abs(ipw.slope) > 5 * ipw.std_error

    ok = reduction and all(v[2] for v in robust.values()) and orthogonal
    detail = (
        f"p=0 reduction on {checked} cells, largest gap {worst:.1e}; "
        + "; ".join(f"{k}: mean {v[0]:.4f} (se {v[1]:.4f})" for k, v in robust.items())
        + f"; dr slopes {[round(r.slope / r.std_error, 2) for r in dr_slopes]} se, "
        f"ipw slope {ipw.slope / ipw.std_error:.1f} se"
    )
    report(capsys, 8, ok, detail)


def test_criterion_9_sign_flip_and_hull(capsys):
    spec = nonstationary_spec(noise_sd=1.0, n_units=1000)
    p = simulate_panel(spec, seed=9090)
    fe = dynamic_fe(p, relative_times=(-2, -1, 0, 1, 2, 3))
    catt = saturated_catt(p)
    iw = iw_dynamic(catt)
    cells = [c.estimate for (e, l), c in catt.cells.items() if l == 0 and c.status == "ESTIMATED"]
    lo, hi = min(cells), max(cells)
    mu0, nu0 = fe["mu[0]"], iw.nu[0]
    ok = mu0 * nu0 < 0 and lo <= nu0 <= hi and not lo <= mu0 <= hi
    report(capsys, 9, ok, f"FE mu[0]={mu0:.4f}, IW nu[0]={nu0:.4f}, hull of delta[e,0]=[{lo:.4f}, {hi:.4f}]")
