"""Parameter fitting for the tripping blocks.

The fit minimises the summed squared error between block output and
simulated active fractions, subject to box bounds, with a global-best
particle swarm.  Swarm evaluations are batched: one call simulates every
particle on every trace inside a compiled loop, which is what keeps a
100 x 100 swarm on ~55k samples per trace set within seconds.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numba import njit, prange

from .trip_models import (
    CODES,
    DERA_NAMES,
    TRV_DEFAULT,
    DerAParams,
    PiParams,
    _dera_update,
    _pi_update,
    filter_gain,
    pi_decision_names,
)

log = logging.getLogger(__name__)

# Objective value for parameter vectors whose spans are empty or inverted.
PENALTY = 1e6


@dataclass(frozen=True)
class SwarmConfig:
    swarm_size: int = 100
    max_iters: int = 100
    omega: float = 0.5
    phi_p: float = 0.5
    phi_g: float = 0.5
    min_step: float = 1e-8
    min_func_delta: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.swarm_size < 2:
            raise ValueError("swarm_size must be at least 2")
        if min(self.omega, self.phi_p, self.phi_g) <= 0:
            raise ValueError("omega, phi_p and phi_g must be positive")


@dataclass
class FitResult:
    x: np.ndarray
    fun: float
    history: list[float]
    wall_time: float
    n_iters: int
    n_evals: int
    stop_reason: str
    seed: int
    lower: np.ndarray
    upper: np.ndarray
    names: list[str] = field(default_factory=list)
    params: object = None

    def to_dict(self) -> dict:
        d = {
            "x": [float(v) for v in self.x],
            "names": list(self.names),
            "objective": float(self.fun),
            "history": [float(h) for h in self.history],
            "wall_time": self.wall_time,
            "n_iters": self.n_iters,
            "n_evals": self.n_evals,
            "stop_reason": self.stop_reason,
            "seed": self.seed,
            "bounds": {"lower": [float(v) for v in self.lower],
                       "upper": [float(v) for v in self.upper]},
        }
        if self.params is not None:
            d["params"] = asdict(self.params)
        return d

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def pso_minimize(fun: Callable, lower, upper, config: SwarmConfig = SwarmConfig(),
                 vectorized: bool = False) -> FitResult:
    """Minimise ``fun`` over the box ``[lower, upper]`` with a global-best swarm.

    ``fun`` takes one point, or an ``(n, d)`` array when ``vectorized``.
    Velocities start uniform in ``+-(upper - lower)``; after each move the
    positions are clipped to the box.  The run stops after ``max_iters``
    swarm updates, or as soon as an improvement of the global best is
    smaller than ``min_func_delta`` in value or ``min_step`` in position.
    """
    t0 = time.perf_counter()
    lb = np.asarray(lower, dtype=float)
    ub = np.asarray(upper, dtype=float)
    if lb.shape != ub.shape or np.any(lb > ub) or not np.all(np.isfinite(lb) & np.isfinite(ub)):
        raise ValueError("bounds must be finite with lower <= upper")
    rng = np.random.default_rng(config.seed)
    S, D = config.swarm_size, lb.size

    def evaluate(X):
        if vectorized:
            return np.asarray(fun(X), dtype=float)
        return np.array([fun(x) for x in X], dtype=float)

    span = ub - lb
    x = lb + rng.random((S, D)) * span
    v = -span + rng.random((S, D)) * 2 * span
    p = x.copy()
    fp = evaluate(p)
    n_evals = S
    i_best = int(np.argmin(fp))
    g, fg = p[i_best].copy(), float(fp[i_best])
    history = [fg]
    stop = "max_iters"

    it = 0
    while it < config.max_iters:
        rp = rng.random((S, D))
        rg = rng.random((S, D))
        v = config.omega * v + config.phi_p * rp * (p - x) + config.phi_g * rg * (g - x)
        x = np.clip(x + v, lb, ub)
        fx = evaluate(x)
        n_evals += S
        better = fx < fp
        p[better] = x[better]
        fp[better] = fx[better]
        it += 1
        i_best = int(np.argmin(fp))
        if fp[i_best] < fg:
            step = float(np.linalg.norm(g - p[i_best]))
            delta = abs(fg - float(fp[i_best]))
            g, fg = p[i_best].copy(), float(fp[i_best])
            history.append(fg)
            if delta <= config.min_func_delta:
                stop = "min_func_delta"
                break
            if step <= config.min_step:
                stop = "min_step"
                break
        else:
            history.append(fg)

    return FitResult(x=g, fun=fg, history=history, wall_time=time.perf_counter() - t0,
                     n_iters=it, n_evals=n_evals, stop_reason=stop, seed=config.seed,
                     lower=lb, upper=ub)


# ---------------------------------------------------------------------------
# Fit problems
# ---------------------------------------------------------------------------

# Default search boxes.
UNDER_V = (0.0, 1.0)
OVER_V = (1.0, 1.4)
TIME_CONST = (0.01, 10.0)
DWELL = (0.0, 10.0)


def default_bounds(family: str, side: str, reactivation: bool):
    if family == "pi":
        vlo, vhi = UNDER_V if side == "under" else OVER_V
        lower = [vlo] * 4 + [TIME_CONST[0]]
        upper = [vhi] * 4 + [TIME_CONST[1]]
        if reactivation:
            lower += [vlo, TIME_CONST[0]]
            upper += [vhi, TIME_CONST[1]]
        return np.array(lower), np.array(upper)
    if family == "dera":
        lower = [UNDER_V[0]] * 2 + [OVER_V[0]] * 2 + [DWELL[0]] * 4 + [0.0]
        upper = [UNDER_V[1]] * 2 + [OVER_V[1]] * 2 + [DWELL[1]] * 4 + [1.0]
        return np.array(lower), np.array(upper)
    raise ValueError(f"unknown family {family!r}")


@dataclass
class FitProblem:
    """Traces for one code (and side, for the PI family) plus the search box.

    ``voltages`` and ``targets`` are ``(n_traces, n_samples)`` arrays.
    """

    voltages: np.ndarray
    targets: np.ndarray
    dt: float
    family: str
    side: str
    code: str
    lower: np.ndarray
    upper: np.ndarray
    trv: float = TRV_DEFAULT

    def __post_init__(self):
        self.voltages = np.ascontiguousarray(np.atleast_2d(self.voltages), dtype=float)
        self.targets = np.ascontiguousarray(np.atleast_2d(self.targets), dtype=float)
        if self.voltages.shape != self.targets.shape or self.voltages.shape[0] == 0:
            raise ValueError("voltages and targets must be equal, non-empty 2-D arrays")
        if np.any(self.targets < 0) or np.any(self.targets > 1):
            raise ValueError("targets must lie in [0, 1]")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds exceed upper bounds")

    @property
    def reactivation(self) -> bool:
        return self.family == "pi" and self.code == "INV2020"

    @property
    def names(self) -> list[str]:
        if self.family == "pi":
            return pi_decision_names(self.side, self.reactivation)
        return list(DERA_NAMES)

    def to_params(self, x):
        if self.family == "pi":
            return PiParams.from_decision_vector(x, self.side, self.reactivation, self.trv)
        return DerAParams.from_decision_vector(x, self.trv)


def _violation(X: np.ndarray, family: str) -> np.ndarray:
    """Summed size of ordering violations per row (0 for feasible rows)."""
    if family == "pi":
        gaps = [X[:, 1] - X[:, 0], X[:, 3] - X[:, 2]]
    else:
        gaps = [X[:, 1] - X[:, 0], X[:, 2] - X[:, 1], X[:, 3] - X[:, 2]]
    return sum(np.where(g > 0, 0.0, 1e-3 - g) for g in gaps)


def _pi_rows(X: np.ndarray, side: str) -> np.ndarray:
    """Decision matrix -> kernel rows (negated-voltage coordinates)."""
    n = X.shape[0]
    rows = np.zeros((n, 7))
    if side == "under":
        rows[:, 0:4] = X[:, 0:4]
    else:
        rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3] = -X[:, 1], -X[:, 0], -X[:, 3], -X[:, 2]
    rows[:, 4] = X[:, 4]
    if X.shape[1] > 5:
        rows[:, 5] = X[:, 5] if side == "under" else -X[:, 5]
        rows[:, 6] = X[:, 6]
    else:
        rows[:, 5], rows[:, 6] = 0.0, 1.0
    return rows


@njit(cache=True, parallel=True)
def _pi_sse_batch(rows, sgn, react, alpha, dt, V, T, sse):
    for j in prange(rows.shape[0]):
        row = rows[j]
        acc = 0.0
        for i in range(V.shape[0]):
            p_del, p_rec, u_ext, v_filt = 0.0, 0.0, sgn * 1.0, 1.0
            for k in range(V.shape[1]):
                out, p_del, p_rec, u_ext, v_filt = _pi_update(
                    row, sgn, react, alpha, dt, p_del, p_rec, u_ext, v_filt, V[i, k])
                e = out - T[i, k]
                acc += e * e
        sse[j] = acc


@njit(cache=True, parallel=True)
def _dera_sse_batch(rows, alpha, dt, V, T, sse):
    for j in prange(rows.shape[0]):
        row = rows[j]
        acc = 0.0
        st = np.empty(9)
        for i in range(V.shape[0]):
            st[0] = 1.0
            st[1], st[2], st[3], st[4] = 1.0, 0.0, 0.0, 0.0
            st[5], st[6], st[7], st[8] = -1.0, 0.0, 0.0, 0.0
            for k in range(V.shape[1]):
                e = _dera_update(row, alpha, dt, st, V[i, k]) - T[i, k]
                acc += e * e
        sse[j] = acc


def objective_batch(X, problem: FitProblem) -> np.ndarray:
    """Summed squared error for each row of a decision matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    viol = _violation(X, problem.family)
    ok = viol == 0
    sse = np.full(X.shape[0], 0.0)
    sse[~ok] = PENALTY * (1.0 + viol[~ok])
    if np.any(ok):
        alpha = filter_gain(problem.dt, problem.trv)
        out = np.empty(int(ok.sum()))
        if problem.family == "pi":
            sgn = 1.0 if problem.side == "under" else -1.0
            _pi_sse_batch(_pi_rows(X[ok], problem.side), sgn, problem.reactivation, alpha,
                          problem.dt, problem.voltages, problem.targets, out)
        else:
            rows = np.array([DerAParams.from_decision_vector(x).kernel_row() for x in X[ok]])
            _dera_sse_batch(rows, alpha, problem.dt, problem.voltages, problem.targets, out)
        sse[ok] = out
    return sse


def objective(x, problem: FitProblem) -> float:
    return float(objective_batch(np.asarray(x, dtype=float)[None, :], problem)[0])


def make_problem(traces, side: str, code: str, family: str, dt: float,
                 bounds=None, trv: float = TRV_DEFAULT) -> FitProblem:
    """Build a :class:`FitProblem` from ``(voltage, target)`` pairs."""
    traces = list(traces)
    if not traces:
        raise ValueError(f"no traces to fit for {family}/{code}/{side}")
    if code not in CODES:
        raise ValueError(f"unknown grid code {code!r}")
    n = min(len(v) for v, _ in traces)
    if any(len(v) != n or len(t) != n for v, t in traces):
        raise ValueError("all traces must have equal length")
    react = family == "pi" and code == "INV2020"
    lower, upper = bounds if bounds is not None else default_bounds(family, side, react)
    return FitProblem(
        voltages=np.array([v for v, _ in traces]),
        targets=np.array([t for _, t in traces]),
        dt=dt, family=family, side=side, code=code,
        lower=np.asarray(lower, float), upper=np.asarray(upper, float), trv=trv,
    )


def fit_problem(problem: FitProblem, config: SwarmConfig = SwarmConfig()) -> FitResult:
    res = pso_minimize(lambda X: objective_batch(X, problem), problem.lower, problem.upper,
                       config, vectorized=True)
    res.names = problem.names
    res.params = problem.to_params(res.x)
    log.info("fit %s/%s/%s: sse=%.4g after %d iters (%s) in %.1fs", problem.family,
             problem.code, problem.side, res.fun, res.n_iters, res.stop_reason, res.wall_time)
    return res


def fit_code(traces, side: str, code: str, family: str,
             config: SwarmConfig = SwarmConfig(), dt: float = 1e-3, bounds=None) -> FitResult:
    """One swarm run for one grid code.

    PI blocks are fitted per side (5 variables without reactivation, 7
    with).  DER_A blocks share ``v_r_frac`` across sides, so the DER_A
    family is fitted once per code on traces from both sides (``side`` is
    then ``"both"``).
    """
    return fit_problem(make_problem(traces, side, code, family, dt, bounds), config)


def mae(predicted, actual) -> float:
    """Mean absolute error in percent over all samples of all traces."""
    p = np.concatenate([np.ravel(a) for a in predicted]) if isinstance(predicted, (list, tuple)) \
        else np.ravel(predicted)
    a = np.concatenate([np.ravel(x) for x in actual]) if isinstance(actual, (list, tuple)) \
        else np.ravel(actual)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.size} predicted vs {a.size} actual")
    return 100.0 * float(np.mean(np.abs(p - a)))


def set_threads_from_env() -> int:
    """Apply GRIDTRIP_THREADS to numba's thread pool; returns the cap in use."""
    import numba

    raw = os.environ.get("GRIDTRIP_THREADS")
    if raw:
        n = max(1, min(int(raw), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)
        return n
    return numba.get_num_threads()
