"""Aggregate fractional-tripping blocks.

Three families map the substation voltage to the fraction of active DERs:

* the proportional-integral (PI) block, one instance per side (under/over)
  and grid code;
* the DER_A block, a latched linear characteristic with a partial
  reactivation line;
* DERAEMO1, three DER_A blocks with per-code parameters.

The per-sample recurrences live in small numba kernels so that the same
code serves single steps, whole traces and batched objective evaluation
during calibration.  Over-voltage logic reuses the under-voltage kernels on
negated voltages: with ``u = -v`` a running maximum becomes a running
minimum and every span keeps its sign, and negation is exact in floating
point.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

CODES = ("INV2005", "INV2015", "INV2020")
SHARES = {"INV2005": 0.15, "INV2015": 0.5, "INV2020": 0.35}
SIDES = ("under", "over")

TRV_DEFAULT = 0.02


def _sign(side: str) -> float:
    if side == "under":
        return 1.0
    if side == "over":
        return -1.0
    raise ValueError(f"side must be 'under' or 'over', got {side!r}")


def filter_gain(dt: float, trv: float) -> float:
    """Per-step gain of the exact first-order filter; ``trv <= 0`` disables it."""
    if trv <= 0.0:
        return 1.0
    return 1.0 - math.exp(-dt / trv)


@njit(cache=True)
def _clamp01(x):
    return max(0.0, min(1.0, x))


# ---------------------------------------------------------------------------
# PI block
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PiParams:
    """Seven-parameter PI block for one side.

    ``v0_*`` is the threshold farther from nominal and ``v1_*`` the one
    closer to nominal, so for the under side ``v0 < v1`` and for the over
    side ``v0 > v1``.  ``v0_rec`` is where reactivation starts; its far end
    sits one deactivation span closer to nominal.
    """

    side: str
    v0_p: float
    v1_p: float
    v0_i: float
    v1_i: float
    t_deact: float
    v0_rec: float = 1.0
    t_rec: float = 1.0
    trv: float = TRV_DEFAULT
    reactivation: bool = False

    def __post_init__(self):
        s = _sign(self.side)
        if not s * (self.v1_p - self.v0_p) > 0:
            raise ValueError(f"proportional span must point toward nominal ({self.side})")
        if not s * (self.v1_i - self.v0_i) > 0:
            raise ValueError(f"integral span must point toward nominal ({self.side})")
        if not (self.t_deact > 0 and self.t_rec > 0):
            raise ValueError("integrator time constants must be positive")
        if self.trv < 0:
            raise ValueError("trv must be non-negative")

    @property
    def v1_rec(self) -> float:
        return self.v0_rec + (self.v1_i - self.v0_i)

    def kernel_row(self) -> np.ndarray:
        """Parameters in negated-voltage coordinates for the kernels."""
        s = _sign(self.side)
        return np.array(
            [s * self.v0_p, s * self.v1_p, s * self.v0_i, s * self.v1_i,
             self.t_deact, s * self.v0_rec, self.t_rec]
        )

    # decision-vector layout, ascending in voltage for both sides
    def decision_vector(self) -> np.ndarray:
        x = [self.v0_p, self.v1_p, self.v0_i, self.v1_i] if self.side == "under" \
            else [self.v1_p, self.v0_p, self.v1_i, self.v0_i]
        x.append(self.t_deact)
        if self.reactivation:
            x += [self.v0_rec, self.t_rec]
        return np.array(x, dtype=float)

    @classmethod
    def from_decision_vector(cls, x, side: str, reactivation: bool, trv: float = TRV_DEFAULT):
        x = [float(xi) for xi in x]
        if side == "under":
            v0_p, v1_p, v0_i, v1_i = x[:4]
        else:
            v1_p, v0_p, v1_i, v0_i = x[:4]
        kw = dict(side=side, v0_p=v0_p, v1_p=v1_p, v0_i=v0_i, v1_i=v1_i, t_deact=x[4],
                  trv=trv, reactivation=reactivation)
        if reactivation:
            kw.update(v0_rec=x[5], t_rec=x[6])
        return cls(**kw)


def pi_decision_names(side: str, reactivation: bool) -> list[str]:
    if side == "under":
        names = ["v_l0_p", "v_l1_p", "v_l0_i-", "v_l1_i-", "T_l_i-", "v_l0_i+", "T_l_i+"]
    else:
        names = ["v_h1_p", "v_h0_p", "v_h1_i-", "v_h0_i-", "T_h_i-", "v_h0_i+", "T_h_i+"]
    return names if reactivation else names[:5]


@dataclass(frozen=True)
class PiState:
    p_del: float = 0.0
    p_rec: float = 0.0
    v_extreme: float = 1.0
    v_filt: float = 1.0


@njit(cache=True)
def _pi_update(row, sgn, react, alpha, dt, p_del, p_rec, u_ext, v_filt, v):
    v_filt = v_filt + (v - v_filt) * alpha
    u = sgn * v_filt
    u_ext = min(u, u_ext)

    p_im = _clamp01((u_ext - row[0]) / (row[1] - row[0]))

    span = row[3] - row[2]
    p_del = p_del + _clamp01((row[3] - u) / span) * (dt / row[4])
    p_del = min(p_del, _clamp01((row[3] - u_ext) / span))

    if react:
        rec = _clamp01((u - row[5]) / span)
        p_rec = min(p_rec + rec * (dt / row[6]), rec)

    out = _clamp01(p_im - p_del + p_rec)
    return out, p_del, p_rec, u_ext, v_filt


@njit(cache=True)
def _pi_run(row, sgn, react, alpha, dt, state, v_trace, out):
    p_del, p_rec, u_ext, v_filt = state[0], state[1], sgn * state[2], state[3]
    for k in range(v_trace.shape[0]):
        out[k], p_del, p_rec, u_ext, v_filt = _pi_update(
            row, sgn, react, alpha, dt, p_del, p_rec, u_ext, v_filt, v_trace[k])
    state[0], state[1], state[2], state[3] = p_del, p_rec, sgn * u_ext, v_filt


def pi_step(params: PiParams, state: PiState, v_ss: float, dt: float) -> tuple[float, PiState]:
    """Advance one PI block by one sample of substation voltage."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = _sign(params.side)
    out, p_del, p_rec, u_ext, v_filt = _pi_update(
        params.kernel_row(), s, params.reactivation, filter_gain(dt, params.trv), dt,
        state.p_del, state.p_rec, s * state.v_extreme, state.v_filt, float(v_ss))
    return out, PiState(p_del, p_rec, s * u_ext, v_filt)


def pi_simulate(params: PiParams, voltage_trace, dt: float, state0: PiState | None = None,
                return_state: bool = False):
    """Fold :func:`pi_step` over a uniformly sampled voltage trace."""
    v = np.ascontiguousarray(voltage_trace, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("voltage trace must be a non-empty 1-D array")
    st = state0 or PiState()
    state = np.array([st.p_del, st.p_rec, st.v_extreme, st.v_filt])
    out = np.empty_like(v)
    _pi_run(params.kernel_row(), _sign(params.side), params.reactivation,
            filter_gain(dt, params.trv), dt, state, v, out)
    if return_state:
        return out, PiState(*state)
    return out


# ---------------------------------------------------------------------------
# DER_A block
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DerAParams:
    """Nine-parameter DER_A tripping characteristic (both sides)."""

    v_l0: float
    v_l1: float
    v_h1: float
    v_h0: float
    t_vl0: float
    t_vl1: float
    t_vh0: float
    t_vh1: float
    v_r_frac: float
    trv: float = TRV_DEFAULT

    def __post_init__(self):
        if not (self.v_l0 < self.v_l1 < self.v_h1 < self.v_h0):
            raise ValueError("DER_A thresholds must satisfy v_l0 < v_l1 < v_h1 < v_h0")
        if min(self.t_vl0, self.t_vl1, self.t_vh0, self.t_vh1) < 0:
            raise ValueError("DER_A timers must be non-negative")
        if not 0.0 <= self.v_r_frac <= 1.0:
            raise ValueError("v_r_frac must lie in [0, 1]")

    def kernel_row(self) -> np.ndarray:
        # per side: far threshold, near threshold, far timer, near timer (negated for over)
        return np.array([
            self.v_l0, self.v_l1, self.t_vl0, self.t_vl1,
            -self.v_h0, -self.v_h1, self.t_vh0, self.t_vh1,
            self.v_r_frac,
        ])

    def decision_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in DERA_NAMES])

    @classmethod
    def from_decision_vector(cls, x, trv: float = TRV_DEFAULT):
        return cls(**{n: float(xi) for n, xi in zip(DERA_NAMES, x)}, trv=trv)


DERA_NAMES = ["v_l0", "v_l1", "v_h1", "v_h0", "t_vl0", "t_vl1", "t_vh0", "t_vh1", "v_r_frac"]


@dataclass(frozen=True)
class DerAState:
    """State of one DER_A block; per-side arrays are ordered (under, over)."""

    v_filt: float = 1.0
    v_extreme: tuple[float, float] = (1.0, 1.0)
    t_near: tuple[float, float] = (0.0, 0.0)
    t_far: tuple[float, float] = (0.0, 0.0)
    latched: tuple[bool, bool] = (False, False)

    def to_array(self) -> np.ndarray:
        return np.array([
            self.v_filt,
            self.v_extreme[0], self.t_near[0], self.t_far[0], float(self.latched[0]),
            -self.v_extreme[1], self.t_near[1], self.t_far[1], float(self.latched[1]),
        ])

    @classmethod
    def from_array(cls, a) -> "DerAState":
        return cls(
            v_filt=float(a[0]),
            v_extreme=(float(a[1]), float(-a[5])),
            t_near=(float(a[2]), float(a[6])),
            t_far=(float(a[3]), float(a[7])),
            latched=(bool(a[4]), bool(a[8])),
        )


@njit(cache=True)
def _dera_side(u0, u1, tv0, tv1, vrf, dt, u, st, k):
    # st[k:k+4] = u_ext, t_near, t_far, latched
    if u < u1:
        st[k + 1] += dt
    else:
        st[k + 1] = 0.0
    if u < u0:
        st[k + 2] += dt
    else:
        st[k + 2] = 0.0
    st[k] = min(st[k], u)
    if (u < u1 and st[k + 1] >= tv1) or (u < u0 and st[k + 2] >= tv0):
        st[k + 3] = 1.0
    if st[k + 3] == 0.0:
        return 1.0
    f_ext = _clamp01((st[k] - u0) / (u1 - u0))
    return f_ext + vrf * (_clamp01((u - u0) / (u1 - u0)) - f_ext)


@njit(cache=True)
def _dera_update(row, alpha, dt, st, v):
    st[0] = st[0] + (v - st[0]) * alpha
    vf = st[0]
    under = _dera_side(row[0], row[1], row[2], row[3], row[8], dt, vf, st, 1)
    over = _dera_side(row[4], row[5], row[6], row[7], row[8], dt, -vf, st, 5)
    return under * over


@njit(cache=True)
def _dera_run(row, alpha, dt, st, v_trace, out):
    for k in range(v_trace.shape[0]):
        out[k] = _dera_update(row, alpha, dt, st, v_trace[k])


def dera_step(params: DerAParams, state: DerAState, v_ss: float, dt: float) -> tuple[float, DerAState]:
    """Advance one DER_A block by one sample; under and over sides multiply."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    st = state.to_array()
    out = _dera_update(params.kernel_row(), filter_gain(dt, params.trv), dt, st, float(v_ss))
    return out, DerAState.from_array(st)


def dera_simulate(params: DerAParams, voltage_trace, dt: float, state0: DerAState | None = None):
    v = np.ascontiguousarray(voltage_trace, dtype=float)
    st = (state0 or DerAState()).to_array()
    out = np.empty_like(v)
    _dera_run(params.kernel_row(), filter_gain(dt, params.trv), dt, st, v, out)
    return out


# ---------------------------------------------------------------------------
# Composite models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompositeModel:
    """Per-code blocks of one family combined with the fleet shares.

    For ``family == "pi"`` each code maps to a dict ``{"under": PiParams,
    "over": PiParams}`` (a missing side acts as identity).  For
    ``family == "dera"`` each code maps to a :class:`DerAParams`.
    """

    name: str
    family: str
    blocks: dict
    weights: dict = field(default_factory=lambda: dict(SHARES))

    def __post_init__(self):
        if self.family not in ("pi", "dera"):
            raise ValueError(f"unknown family {self.family!r}")
        if abs(sum(self.weights.values()) - 1.0) > 1e-12:
            raise ValueError("code weights must sum to 1")


def predict_code(model: CompositeModel, code: str, voltage_trace, dt: float) -> np.ndarray:
    block = model.blocks[code]
    v = np.asarray(voltage_trace, dtype=float)
    if model.family == "dera":
        return dera_simulate(block, v, dt)
    out = np.ones_like(v)
    for side in SIDES:
        if side in block and block[side] is not None:
            out = out * pi_simulate(block[side], v, dt)
    return out


def composite_predict(model: CompositeModel, voltage_trace, dt: float):
    """Return ``(per_code, weighted)`` fraction traces for a voltage trace."""
    missing = [c for c in model.weights if c not in model.blocks]
    if missing:
        raise ValueError(f"model {model.name!r} lacks blocks for {missing}")
    per_code = {c: predict_code(model, c, voltage_trace, dt) for c in model.weights}
    weighted = sum(model.weights[c] * per_code[c] for c in model.weights)
    return per_code, weighted


# Recommended tripping parameters (DER_A and DERAEMO1 per code).
_DERA_DEFAULT = dict(v_l0=0.44, v_l1=0.49, v_h1=1.15, v_h0=1.2, v_r_frac=0.35,
                     t_vl0=0.16, t_vl1=0.16, t_vh0=0.16, t_vh1=0.16)
_DERAEMO1_DEFAULT = {
    "INV2005": dict(v_l0=0.75, v_l1=0.9, v_h1=1.13, v_h0=1.18, v_r_frac=0.625,
                    t_vl0=1.58, t_vl1=0.027, t_vh0=0.88, t_vh1=1.94),
    "INV2015": dict(v_l0=0.5, v_l1=0.9, v_h1=1.13, v_h0=1.18, v_r_frac=0.713,
                    t_vl0=1.77, t_vl1=0.037, t_vh0=0.16, t_vh1=1.87),
    "INV2020": dict(v_l0=0.5, v_l1=0.9, v_h1=1.19, v_h0=1.21, v_r_frac=1.0,
                    t_vl0=1.77, t_vl1=0.037, t_vh0=0.16, t_vh1=1.87),
}


def make_default_models() -> dict[str, CompositeModel]:
    der_a = DerAParams(**_DERA_DEFAULT)
    return {
        "DER_A": CompositeModel("DER_A", "dera", {c: der_a for c in CODES}),
        "DERAEMO1": CompositeModel(
            "DERAEMO1", "dera", {c: DerAParams(**_DERAEMO1_DEFAULT[c]) for c in CODES}),
    }


# ---------------------------------------------------------------------------
# Parameter files
# ---------------------------------------------------------------------------


def params_record(family: str, code: str, side: str, params, **extra) -> dict:
    rec = {"family": family, "code": code, "side": side, "params": asdict(params)}
    rec.update(extra)
    return rec


def params_from_record(rec: dict):
    if rec["family"] == "pi":
        return PiParams(**rec["params"])
    if rec["family"] == "dera":
        return DerAParams(**rec["params"])
    raise ValueError(f"unknown family {rec['family']!r}")


def save_params(path, family: str, code: str, side: str, params, **extra) -> Path:
    path = Path(path)
    path.write_text(json.dumps(params_record(family, code, side, params, **extra), indent=2))
    return path


def load_params(path):
    """Read one parameter file; returns ``(record, params)``."""
    rec = json.loads(Path(path).read_text())
    return rec, params_from_record(rec)


def param_filename(family: str, code: str, side: str) -> str:
    return f"{family}_{code}_{side}.json"


def model_from_records(name: str, records: list[dict]) -> CompositeModel:
    """Assemble a composite model from parameter records of a single family."""
    families = {r["family"] for r in records}
    if len(families) != 1:
        raise ValueError(f"records mix families {sorted(families)}")
    family = families.pop()
    blocks: dict = {}
    for r in records:
        p = params_from_record(r)
        if family == "pi":
            blocks.setdefault(r["code"], {})[r["side"]] = p
        else:
            blocks[r["code"]] = p
    return CompositeModel(name, family, blocks)


def with_trv(params, trv: float):
    return replace(params, trv=trv)
