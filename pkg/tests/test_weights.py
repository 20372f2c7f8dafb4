import dataclasses
import io
import warnings

import numpy as np
import pytest

from eventstudykit import (
    Panel,
    three_cohort_spec,
    demean_two_way,
    dynamic_fe,
    dynamic_weights,
    reconstruct_fe,
    saturated_catt,
    static_fe,
    static_weights,
)
from eventstudykit.errors import ExcludedLagWarning, InputError, SampleMismatch, SpanningWarning
from eventstudykit.montecarlo import mean_outcomes
from eventstudykit.weights import read_weights_csv, write_weights_csv

from helpers import dummy_ols, random_panel


def _two_cohort_panel():
    ev = np.array([1.0, 1.0, 2.0, 2.0])
    return Panel(tuple(range(4)), np.random.default_rng(0).normal(size=(4, 3)), ev)


def test_static_weights_hand_table():
    """T=2, equal cohorts 1 and 2: Ddd rows are (-1/6, 1/3, -1/6) and
    (1/6, -1/3, 1/6), sum of squares per unit 1/6."""
    w = static_weights(_two_cohort_panel())
    expected = {(1, -1): -0.5, (1, 0): 1.0, (1, 1): -0.5, (2, -2): 0.5, (2, -1): -1.0, (2, 0): 0.5}
    assert set(w.weights) == set(expected)
    for c, v in expected.items():
        assert w.weights[c] == pytest.approx(v, abs=1e-14)
    assert w.denominator == pytest.approx(1 / 6)
    assert w.negativity_flags == ((1, -1), (1, 1), (2, -1))


def test_static_weights_projection_oracle():
    p = _two_cohort_panel()
    w = static_weights(p)
    dd = demean_two_way(p.treatment).values.reshape(-1)
    for (e, l), om in w.weights.items():
        cell = p.cell_indicator(e, l).reshape(-1)
        coef = np.linalg.lstsq(dd[:, None], cell, rcond=None)[0][0]
        assert om == pytest.approx(coef, abs=1e-12)


def test_static_weights_sum_and_denominator_identity():
    rng = np.random.default_rng(1)
    for _ in range(30):
        p = random_panel(rng, never_share=0.15 * rng.integers(0, 2))
        w = static_weights(p)
        post = sum(v for (e, l), v in w.weights.items() if l >= 0)
        assert post == pytest.approx(1.0, abs=1e-8)
        dd = demean_two_way(p.treatment).values
        assert w.denominator == pytest.approx((p.treatment * dd).sum() / p.n_units, abs=1e-12)


def test_static_reconstruction_with_saturated():
    """The saturated model spans the static treatment indicator on 0..T-1."""
    rng = np.random.default_rng(2)
    for _ in range(10):
        p = random_panel(rng)
        win = tuple(range(p.T))
        w = static_weights(p, win)
        assert reconstruct_fe(w, saturated_catt(p)) == pytest.approx(static_fe(p, win)["gamma"], abs=1e-8)


def test_dynamic_weights_oracle_three_cohort():
    spec = dataclasses.replace(three_cohort_spec(), noise_sd=0.0)
    ev = np.repeat([1.0, 2.0, 3.0], 50)
    p = Panel(tuple(range(150)), mean_outcomes(spec, ev), ev)
    rel = (-1, 0, 1, 2)
    w = dynamic_weights(p, -1, relative_times=rel)
    D = np.stack([p.relative_time_indicator(l) for l in rel])
    for (e, lp), om in w.weights.items():
        aux = p.with_outcomes(p.cell_indicator(e, lp))
        assert om == pytest.approx(dummy_ols(aux, D)[0], abs=1e-9)
    # post-treatment cells load on the lead coefficient
    assert abs(w.weights[(1, 1)]) > 0.1
    assert sum(abs(om) > 0.1 for (e, lp), om in w.weights.items() if lp >= 0) >= 2
    assert w.sums[-1] == pytest.approx(1.0, abs=1e-10)
    for lp in (0, 1, 2):
        assert w.sums[lp] == pytest.approx(0.0, abs=1e-10)
    # on noiseless data the lead is exactly the weighted sum of true effects
    implied = sum(om * spec.effect(e, lp) for (e, lp), om in w.weights.items())
    assert implied == pytest.approx(dynamic_fe(p, relative_times=rel)["mu[-1]"], abs=1e-9)
    assert implied == pytest.approx(-47 / 16, abs=1e-9)


def test_dynamic_stationary_reconstruction():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = random_panel(rng)
        d = dynamic_fe(p)
        c = {l: rng.normal() for l in range(-p.T, p.T + 1)}
        for l in d.relative_times if hasattr(d, "relative_times") else [int(x[3:-1]) for x in d.labels]:
            if l < 0:
                continue
            w = dynamic_weights(p, l)
            # effects constant across cohorts; zero at the excluded leads
            val = sum(om * (c[lp] if lp >= 0 else 0.0) for (e, lp), om in w.weights.items())
            assert val == pytest.approx(c[l], abs=1e-8)


def _spanning(rng):
    p = random_panel(rng)
    win = tuple(range(p.T))
    return p, win


def test_reconstruction_identity_random():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p, win = _spanning(rng)
        catt = saturated_catt(p)
        fit = dynamic_fe(p, estimation_times=win)
        for lab in fit.labels:
            l = int(lab[3:-1])
            w = dynamic_weights(p, l, estimation_times=win)
            assert reconstruct_fe(w, catt) == pytest.approx(fit[lab], abs=1e-8)


def test_reconstruction_constant_and_zero_effects():
    p, win = _spanning(np.random.default_rng(5))
    cells = [(e, t - e) for e in p.layout().cohorts for t in win]
    w0 = dynamic_weights(p, 0, estimation_times=win)
    assert reconstruct_fe(w0, {c: 2.5 if c[1] >= 0 else 0.0 for c in cells}) == pytest.approx(2.5, abs=1e-8)
    lead = min(l for l in (-2, -3) if l in [int(x[3:-1]) for x in dynamic_fe(p, estimation_times=win).labels])
    wl = dynamic_weights(p, lead, estimation_times=win)
    assert reconstruct_fe(wl, {c: 0.0 for c in cells}) == 0.0


def test_reconstruction_sample_mismatch():
    p = random_panel(np.random.default_rng(6), T=3)
    w = dynamic_weights(p, 0)  # full window 0..3
    with pytest.raises(SampleMismatch):
        reconstruct_fe(w, saturated_catt(p))


def test_reconstruction_warns_without_spanning():
    p = random_panel(np.random.default_rng(7), N=150, T=3, never_share=0.25)
    win = (0, 1, 2)
    w = dynamic_weights(p, 0, estimation_times=win)
    with pytest.warns(SpanningWarning):
        reconstruct_fe(w, saturated_catt(p))


def test_excluded_lag_warning():
    p = random_panel(np.random.default_rng(8), T=3)
    with pytest.warns(ExcludedLagWarning):
        dynamic_weights(p, 0, relative_times=(-2, 0, 1))


def test_target_must_be_included():
    p = random_panel(np.random.default_rng(9), T=3)
    with pytest.raises(InputError):
        dynamic_weights(p, -1)


def test_csv_round_trip_and_filter():
    p = random_panel(np.random.default_rng(10), T=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w = dynamic_weights(p, 0)
    text = write_weights_csv(w)
    assert text.splitlines()[0] == "target_l,e,l_prime,weight,negative_flag"
    back = read_weights_csv(io.StringIO(text))
    assert back.target == ("DYNAMIC", 0)
    assert back.weights == w.weights
    neg = write_weights_csv(w, flag_negative=True).splitlines()[1:]
    assert len(neg) == len(w.negativity_flags) > 0
    assert all(line.endswith(",1") for line in neg)
