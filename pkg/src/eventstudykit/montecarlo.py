"""Staggered-adoption data generating processes and replication studies.

Randomness is counter based: the generator for replication ``rep`` and
stream ``s`` is Philox keyed by ``SeedSequence(master_seed,
spawn_key=(rep, s))``.  Stream 0 draws event times and stream 1 the noise,
so a replication's panel depends only on ``(master_seed, rep)`` and results
do not depend on how replications are spread over workers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .errors import EventStudyError, InputError
from .estimators import dynamic_fe, iw_dynamic, pretrend_test, saturated_catt, static_fe
from .panel import NEVER, DesignConfig, Panel

COHORT_STREAM = 0
NOISE_STREAM = 1

EFFECT_RULES = ("index", "zero")


def _cohort_key(token):
    if isinstance(token, str):
        if token.strip().lower() in {"inf", "never", "infinity"}:
            return NEVER
        return int(token)
    return NEVER if token == NEVER else int(token)


@dataclass(frozen=True)
class DGPSpec:
    """Outcome model ``Y[i,t] = alpha_i + lambda_t + sum delta[e,l] 1{E_i=e} D^l + eps``.

    Parameters
    ----------
    n_units, T : int
        Panel dimensions (periods ``0..T``).
    cohort_distribution : mapping
        Probability of each event time in ``1..T`` or ``NEVER``.
    catt_grid : mapping
        ``(e, l) -> delta``; unlisted cells, and all leads unless listed,
        are zero.
    unit_effect, time_effect : {"index", "zero"}
        ``alpha_i = i`` (1-based unit index) and ``lambda_t = t``, or zero.
    noise_sd : float
        Standard deviation of the Gaussian noise.
    """

    n_units: int
    T: int
    cohort_distribution: Mapping
    catt_grid: Mapping = field(default_factory=dict)
    unit_effect: str = "index"
    time_effect: str = "index"
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.n_units < 1 or self.T < 1:
            raise InputError("n_units and T must be positive")
        dist = {}
        for k, p in self.cohort_distribution.items():
            k = _cohort_key(k)
            if k != NEVER and not 1 <= k <= self.T:
                raise InputError(f"cohort {k} outside 1..{self.T}")
            if p < 0:
                raise InputError(f"cohort {k} has negative probability")
            dist[k] = p
        exact = all(isinstance(p, (int, Fraction)) for p in dist.values())
        total = sum(dist.values(), Fraction(0)) if exact else math.fsum(float(p) for p in dist.values())
        if abs(float(total) - 1.0) > 1e-12 or (exact and total != 1):
            raise InputError(f"cohort probabilities sum to {float(total)!r}, not 1")
        grid = {}
        for (e, l), v in self.catt_grid.items():
            e, l = int(e), int(l)
            if not (1 <= e <= self.T and -e <= l <= self.T - e):
                raise InputError(f"cell ({e},{l}) is not reachable with T={self.T}")
            grid[(e, l)] = float(v)
        for rule in (self.unit_effect, self.time_effect):
            if rule not in EFFECT_RULES:
                raise InputError(f"unknown effect rule {rule!r}; use one of {EFFECT_RULES}")
        if not self.noise_sd >= 0:
            raise InputError("noise_sd must be nonnegative")
        object.__setattr__(self, "cohort_distribution", dict(sorted(dist.items())))
        object.__setattr__(self, "catt_grid", dict(sorted(grid.items())))

    def effect(self, e, l) -> float:
        return self.catt_grid.get((e, l), 0.0)

    def to_dict(self) -> dict:
        return {
            "n_units": self.n_units,
            "T": self.T,
            "cohort_distribution": {
                ("never" if k == NEVER else str(k)): str(p) if isinstance(p, Fraction) else p
                for k, p in self.cohort_distribution.items()
            },
            "catt_grid": [[e, l, v] for (e, l), v in self.catt_grid.items()],
            "unit_effect": self.unit_effect,
            "time_effect": self.time_effect,
            "noise_sd": self.noise_sd,
        }


def parse_spec(text: str) -> DGPSpec:
    """Parse the flat key-value spec format.

    One directive per line, ``#`` starts a comment::

        n_units 1000
        T 3
        noise_sd 1
        cohort 1 1/3
        cohort never 0
        catt 1 0 2

    ``unit_effect`` / ``time_effect`` take ``index`` or ``zero``.
    Probabilities may be fractions, which are summed exactly.
    """
    scalars, cohorts, grid = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0].lower()
        try:
            if key == "cohort" and len(parts) == 3:
                cohorts[_cohort_key(parts[1])] = Fraction(parts[2])
            elif key == "catt" and len(parts) == 4:
                grid[(int(parts[1]), int(parts[2]))] = float(parts[3])
            elif key in {"n_units", "t"} and len(parts) == 2:
                scalars[key] = int(parts[1])
            elif key == "noise_sd" and len(parts) == 2:
                scalars[key] = float(parts[1])
            elif key in {"unit_effect", "time_effect"} and len(parts) == 2:
                scalars[key] = parts[1].lower()
            else:
                raise InputError(f"line {lineno}: cannot parse {raw.strip()!r}")
        except (ValueError, ZeroDivisionError) as exc:
            raise InputError(f"line {lineno}: bad value in {raw.strip()!r}") from exc
    for req in ("n_units", "t"):
        if req not in scalars:
            raise InputError(f"spec is missing {req!r}")
    if not cohorts:
        raise InputError("spec lists no cohorts")
    return DGPSpec(
        n_units=scalars["n_units"],
        T=scalars["t"],
        cohort_distribution=cohorts,
        catt_grid=grid,
        unit_effect=scalars.get("unit_effect", "index"),
        time_effect=scalars.get("time_effect", "index"),
        noise_sd=scalars.get("noise_sd", 1.0),
    )


def load_spec(path) -> DGPSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())


def three_cohort_spec() -> DGPSpec:
    """The bundled three-cohort design with large, growing post-treatment effects."""
    text = resources.files("eventstudykit").joinpath("data/three_cohort.spec").read_text(encoding="utf-8")
    return parse_spec(text)


def rng_for(master_seed: int, rep: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(rep), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


def draw_event_times(spec: DGPSpec, rng: np.random.Generator) -> np.ndarray:
    keys = np.array([float(k) for k in spec.cohort_distribution], dtype=float)
    p = np.array([float(v) for v in spec.cohort_distribution.values()])
    return rng.choice(keys, size=spec.n_units, p=p / p.sum())


def mean_outcomes(spec: DGPSpec, event_times) -> np.ndarray:
    """Noise-free part of the outcome for given event times."""
    ev = np.asarray(event_times, dtype=float)
    n, T = ev.shape[0], spec.T
    alpha = np.arange(1, n + 1, dtype=float) if spec.unit_effect == "index" else np.zeros(n)
    lam = np.arange(T + 1, dtype=float) if spec.time_effect == "index" else np.zeros(T + 1)
    y = alpha[:, None] + lam[None, :]
    rel = np.arange(T + 1)[None, :] - ev[:, None]
    for (e, l), v in spec.catt_grid.items():
        y += v * ((ev[:, None] == e) & (rel == l))
    return y


def simulate_panel(spec: DGPSpec, seed: int, rep: int = 0, fixed_cohorts: bool = False) -> Panel:
    """Draw one panel.  Deterministic in ``(seed, rep)``.

    With ``fixed_cohorts`` the event times are the same for every ``rep``
    (they are drawn from replication 0's stream).
    """
    ev = draw_event_times(spec, rng_for(seed, 0 if fixed_cohorts else rep, COHORT_STREAM))
    y = mean_outcomes(spec, ev)
    if spec.noise_sd > 0:
        y = y + spec.noise_sd * rng_for(seed, rep, NOISE_STREAM).standard_normal(y.shape)
    return Panel(tuple(range(1, spec.n_units + 1)), y, ev)


# --------------------------------------------------------------------------
# replication studies


@dataclass(frozen=True)
class EstimatorConfig:
    """One estimator to run on every replication.

    ``model`` is ``static``, ``dynamic``, ``saturated`` or ``iw``.  With
    ``pretrend`` the joint lead Wald test is also recorded as ``wald_stat``,
    ``wald_p`` and ``reject_5pct``.
    """

    model: str
    name: str = None
    relative_times: tuple = None
    excluded: tuple = None
    estimation_times: tuple = None
    pretrend: bool = False

    def __post_init__(self):
        if self.model not in {"static", "dynamic", "saturated", "iw"}:
            raise InputError(f"unknown estimator model {self.model!r}")
        if self.name is None:
            object.__setattr__(self, "name", self.model)
        for attr in ("relative_times", "excluded", "estimation_times"):
            v = getattr(self, attr)
            if v is not None:
                object.__setattr__(self, attr, tuple(int(x) for x in v))

    @classmethod
    def coerce(cls, obj) -> "EstimatorConfig":
        if isinstance(obj, cls):
            return obj
        if isinstance(obj, str):
            return cls(obj)
        return cls(**obj)


def apply_estimator(panel: Panel, cfg: EstimatorConfig) -> dict:
    """Run one configured estimator; returns ``label -> value``."""
    if cfg.model == "static":
        fit = static_fe(panel, cfg.estimation_times)
        out = fit.as_dict()
    elif cfg.model == "dynamic":
        fit = dynamic_fe(
            panel,
            DesignConfig("dynamic", cfg.relative_times, cfg.excluded, cfg.estimation_times),
        )
        out = fit.as_dict()
    else:
        catt = saturated_catt(panel, cfg.estimation_times)
        if cfg.model == "saturated":
            fit = catt
            out = catt.fit.as_dict()
        else:
            iw = iw_dynamic(catt, relative_times=cfg.relative_times)
            fit = iw
            out = iw.estimates.as_dict()
            if iw.kappa is not None:
                out["kappa"] = iw.kappa
    if cfg.pretrend:
        w = pretrend_test(fit)
        out["wald_stat"] = w.statistic
        out["wald_p"] = w.p_value
        out["reject_5pct"] = float(w.p_value < 0.05)
    return out


def _replicate(args):
    spec, master_seed, rep, configs, fixed_cohorts = args
    panel = simulate_panel(spec, master_seed, rep, fixed_cohorts)
    results = {}
    for cfg in configs:
        try:
            results[cfg.name] = apply_estimator(panel, cfg)
        except EventStudyError as exc:
            results[cfg.name] = f"{type(exc).__name__}: {exc}"
    return results


@dataclass(frozen=True, eq=False)
class CoefficientSummary:
    mean: float
    sd: float
    mcse: float
    frac_negative: float
    n: int
    bin_edges: tuple
    counts: tuple
    values: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "sd": self.sd,
            "mcse": self.mcse,
            "frac_negative": self.frac_negative,
            "n": self.n,
            "histogram": {"edges": list(self.bin_edges), "counts": list(self.counts)},
        }


def summarize(values, bins: int = 20) -> CoefficientSummary:
    v = np.asarray(values, dtype=float)
    n = v.size
    mean = math.fsum(v) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2) / (n - 1)) if n > 1 else 0.0
    counts, edges = np.histogram(v, bins=bins)
    return CoefficientSummary(
        mean=mean,
        sd=sd,
        mcse=sd / math.sqrt(n),
        frac_negative=float(np.mean(v < 0)),
        n=n,
        bin_edges=tuple(float(x) for x in edges),
        counts=tuple(int(c) for c in counts),
        values=v,
    )


@dataclass(frozen=True, eq=False)
class StudySummary:
    """Per-estimator, per-coefficient Monte Carlo summaries."""

    spec: DGPSpec
    reps: int
    master_seed: int
    estimators: Mapping[str, Mapping[str, CoefficientSummary]]
    n_failed: Mapping[str, int]
    failures: Mapping[str, tuple] = field(repr=False, default_factory=dict)

    def __getitem__(self, key):
        name, label = key
        return self.estimators[name][label]

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "master_seed": self.master_seed,
            "spec": self.spec.to_dict(),
            "n_failed": dict(self.n_failed),
            "failures": {k: [list(f) for f in v] for k, v in self.failures.items()},
            "estimators": {
                name: {lab: s.to_dict() for lab, s in coefs.items()} for name, coefs in self.estimators.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["coefficient", "bin_left", "bin_right", "count"])
        for name, coefs in self.estimators.items():
            for lab, s in coefs.items():
                for j, c in enumerate(s.counts):
                    w.writerow([f"{name}:{lab}", repr(s.bin_edges[j]), repr(s.bin_edges[j + 1]), c])
        return buf.getvalue()


def default_workers() -> int:
    cap = os.environ.get("ESK_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise InputError(f"ESK_THREADS must be an integer, got {cap!r}") from None
    return n


def run_study(
    spec: DGPSpec,
    reps: int,
    estimator_configs: Sequence = ("dynamic",),
    master_seed: int = 0,
    workers: int = None,
    fixed_cohorts: bool = False,
    bins: int = 20,
) -> StudySummary:
    """Simulate ``reps`` panels and summarise every configured estimator.

    Replications that raise a library error are counted as failed for that
    estimator and left out of its summary.  The result is identical for any
    number of workers.
    """
    if reps < 1:
        raise InputError("reps must be at least 1")
    configs = tuple(EstimatorConfig.coerce(c) for c in estimator_configs)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise InputError(f"estimator names must be unique: {names}")
    workers = default_workers() if workers is None else max(1, int(workers))
    tasks = [(spec, master_seed, r, configs, fixed_cohorts) for r in range(reps)]
    if workers == 1 or reps == 1:
        results = [_replicate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, reps // (4 * workers))))
    estimators, n_failed, failures = {}, {}, {}
    for cfg in configs:
        values, fails = {}, []
        for r, res in enumerate(results):
            out = res[cfg.name]
            if isinstance(out, str):
                fails.append((r, out))
                continue
            for lab, v in out.items():
                values.setdefault(lab, []).append(v)
        estimators[cfg.name] = {lab: summarize(v, bins) for lab, v in values.items()}
        n_failed[cfg.name] = len(fails)
        failures[cfg.name] = tuple(fails)
    return StudySummary(spec, reps, master_seed, estimators, n_failed, failures)
