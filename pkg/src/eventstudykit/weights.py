"""Implicit cohort weights behind the static and dynamic FE estimators.

Every FE coefficient is a linear combination of the cohort-by-relative-time
effects.  The combination weights are obtained from projections, computed on
the sample at hand:

* static FE: the weight on cell ``(e, l)`` is the coefficient from
  regressing ``1{E=e} D^l`` on the demeaned treatment indicator, which is
  ``p_e * Dbar_{e,e+l} / sum_t E_N[D^2]`` with ``D`` two-way demeaned;
* dynamic FE, target ``l``: the weight on ``(e, l')`` is the coefficient on
  ``D^l`` when ``1{E=e} D^{l'}`` is regressed on all included relative-time
  indicators and both sets of fixed effects.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg

from .errors import ExcludedLagWarning, InputError, SampleMismatch, SpanningWarning
from .estimators import NORMALIZED_ZERO, ESTIMATED, CattTable
from .panel import DesignConfig, Panel, build_design, demean_two_way

STATIC = "STATIC"
DYNAMIC = "DYNAMIC"

NEGATIVE_TOL = 1e-12

CSV_COLUMNS = ("target_l", "e", "l_prime", "weight", "negative_flag")


@dataclass(frozen=True, eq=False)
class WeightDecomposition:
    """Weights ``omega[(e, l')]`` that an FE estimand places on each cell.

    Attributes
    ----------
    target : str or tuple
        ``"STATIC"`` or ``("DYNAMIC", l)``.
    weights : dict
        ``(e, l') -> omega``.
    sums : dict
        ``l' -> sum_e omega[(e, l')]``.
    negativity_flags : tuple
        Cells with a negative weight.
    denominator : float or dict
        ``sum_t E_N[Ddd^2]`` for the static target; auxiliary-regression
        metadata (included and excluded relative times) for dynamic targets.
    estimation_times : tuple
        Periods used by the FE regression.
    regressors : ndarray or None
        Demeaned FE regressors, kept to verify the spanning condition.
    """

    target: object
    weights: Mapping[tuple, float]
    sums: Mapping[int, float]
    negativity_flags: tuple
    denominator: object
    estimation_times: tuple = ()
    n_units: int | None = None
    regressors: np.ndarray = field(default=None, repr=False)

    @property
    def target_l(self):
        return None if self.target == STATIC else self.target[1]

    def rows(self, flag_negative: bool = False) -> list:
        flagged = set(self.negativity_flags)
        tl = "static" if self.target == STATIC else self.target[1]
        out = []
        for (e, lp), w in sorted(self.weights.items()):
            neg = (e, lp) in flagged
            if flag_negative and not neg:
                continue
            out.append({"target_l": tl, "e": e, "l_prime": lp, "weight": w, "negative_flag": int(neg)})
        return out


def _decomposition(target, weights, denominator, window, n_units, regressors):
    sums = {}
    for (e, lp), w in weights.items():
        sums[lp] = sums.get(lp, 0.0) + w
    flags = tuple(sorted(c for c, w in weights.items() if w < -NEGATIVE_TOL))
    return WeightDecomposition(
        target=target,
        weights=dict(sorted(weights.items())),
        sums=dict(sorted(sums.items())),
        negativity_flags=flags,
        denominator=denominator,
        estimation_times=tuple(window),
        n_units=n_units,
        regressors=regressors,
    )


def static_weights(panel: Panel, estimation_times=None) -> WeightDecomposition:
    """Weights behind the static FE coefficient.

    Computed from the explicitly demeaned treatment indicator.  Weights are
    reported for every cohort cell inside the window, leads included (their
    weights multiply effects that are zero under no anticipation); the
    post-treatment weights sum to one.
    """
    design = build_design(panel, DesignConfig("static", estimation_times=estimation_times))
    w = design.estimation_times
    dd = demean_two_way(panel.treatment, w).values
    n = panel.n_units
    denom = float((dd**2).sum() / n)
    layout = panel.layout()
    weights = {}
    for e in layout.cohorts:
        mask = panel.cohort_mask(e)
        p_e = layout.sizes[e] / n
        cohort_mean = dd[mask].mean(axis=0)
        for j, t in enumerate(w):
            weights[(e, t - e)] = float(p_e * cohort_mean[j] / denom)
    return _decomposition(STATIC, weights, denom, w, n, design.demeaned())


def dynamic_weights(panel: Panel, target_l: int, config: DesignConfig = None, **kwargs) -> WeightDecomposition:
    """Weights behind the dynamic FE coefficient on ``D^target_l``.

    All cell auxiliary regressions share one QR factorisation of the
    demeaned design.  Column sums equal one at ``target_l`` and zero at
    every other included relative time; at excluded relative times they are
    generally nonzero and are reported as they are.
    """
    if config is None:
        config = DesignConfig("dynamic", **kwargs)
    design = build_design(panel, config)
    target_l = int(target_l)
    if target_l not in design.relative_times:
        raise InputError(
            f"relative time {target_l} is not among the included indicators {list(design.relative_times)}"
        )
    lags_out = [l for l in design.excluded if l >= 0]
    if lags_out:
        warnings.warn(
            f"post-treatment relative times {lags_out} are excluded; their effects load onto the "
            "remaining coefficients through the reported weights",
            ExcludedLagWarning,
            stacklevel=2,
        )
    w = list(design.estimation_times)
    X = design.demeaned()
    layout = panel.layout()
    cells = []
    for e in layout.cohorts:
        for t in w:
            cells.append((e, t - e))
    C = np.stack([panel.cell_indicator(e, lp)[:, w].reshape(-1) for e, lp in cells], axis=1)
    q, r = np.linalg.qr(X)
    # D'C equals D'(demeaned C) because D is already demeaned
    coef = linalg.solve_triangular(r, q.T @ C)
    row = design.relative_times.index(target_l)
    weights = {cell: float(v) for cell, v in zip(cells, coef[row])}
    meta = {
        "included": list(design.relative_times),
        "excluded": list(design.excluded),
        "n_cells": len(cells),
    }
    return _decomposition((DYNAMIC, target_l), weights, meta, w, panel.n_units, X)


def _spans(inner: np.ndarray, outer: np.ndarray, tol: float = 1e-8) -> bool:
    """Whether every column of ``inner`` lies in the column span of ``outer``."""
    q, _ = np.linalg.qr(outer)
    resid = inner - q @ (q.T @ inner)
    scale = np.maximum(np.linalg.norm(inner, axis=0), 1.0)
    return bool(np.all(np.linalg.norm(resid, axis=0) <= tol * scale))


def reconstruct_fe(weights: WeightDecomposition, catt) -> float:
    """Inner product of FE weights with cohort effect estimates.

    ``catt`` is a :class:`CattTable` (the sum runs over its ESTIMATED and
    NORMALIZED_ZERO cells) or a mapping ``(e, l) -> estimate``.  When both
    come from the same sample and the saturated regressors span the FE
    regressors the result equals the FE coefficient exactly.
    """
    if isinstance(catt, CattTable):
        if weights.estimation_times and tuple(weights.estimation_times) != tuple(catt.estimation_times):
            raise SampleMismatch(
                f"weights use periods {list(weights.estimation_times)} but the effect table uses "
                f"{list(catt.estimation_times)}"
            )
        if weights.n_units is not None and weights.n_units != catt.fit.n_units:
            raise SampleMismatch("weights and effect table come from panels of different size")
        if weights.regressors is not None and catt.fit.regressors is not None:
            if not _spans(weights.regressors, catt.fit.regressors):
                warnings.warn(
                    "saturated regressors do not span the FE regressors; the reconstruction "
                    "is not an exact identity",
                    SpanningWarning,
                    stacklevel=2,
                )
        values = {
            c: cell.estimate for c, cell in catt.cells.items() if cell.status in (ESTIMATED, NORMALIZED_ZERO)
        }
    else:
        values = {tuple(int(v) for v in k): float(x) for k, x in catt.items()}
    return float(sum(w * values[c] for c, w in weights.weights.items() if c in values))


def write_weights_csv(weights: WeightDecomposition, dest=None, flag_negative: bool = False) -> str:
    """Write the weight table (columns ``target_l,e,l_prime,weight,negative_flag``).

    ``dest`` may be a path or a text stream; the CSV text is also returned.
    Weights are written with 17 significant digits.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in weights.rows(flag_negative):
        writer.writerow([r["target_l"], r["e"], r["l_prime"], repr(float(r["weight"])), r["negative_flag"]])
    text = buf.getvalue()
    if dest is not None:
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
    return text


def read_weights_csv(source) -> WeightDecomposition:
    """Re-read a weight table written by :func:`write_weights_csv`."""
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
        raise InputError(f"weight CSV must have columns {','.join(CSV_COLUMNS)}")
    weights, targets = {}, set()
    for row in reader:
        targets.add(row["target_l"])
        weights[(int(row["e"]), int(row["l_prime"]))] = float(row["weight"])
    if len(targets) > 1:
        raise InputError("weight CSV mixes several targets")
    tl = targets.pop() if targets else "static"
    target = STATIC if tl == "static" else (DYNAMIC, int(tl))
    return _decomposition(target, weights, None, (), None, None)
