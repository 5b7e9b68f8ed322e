"""Detailed PV inverter model and the VRT state machine.

Each unit filters its terminal voltage, runs (for INV2020) delayed
Volt-VAr and Volt-Watt loops, tracks current references through
first-order lags and switches between four operating modes:

* continuous and mandatory operation count as *active*;
* momentary cessation (INV2020 only) and trip are *inactive*, and the
  output current is forced to zero while in them.  Trip is absorbing.

The arithmetic is written once over arrays (:class:`DerFleet`); the
single-unit helpers wrap a fleet of one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .trip_models import CODES, SHARES

CONTINUOUS, MANDATORY, MOMENTARY_CESSATION, TRIPPED = 0, 1, 2, 3
MODE_NAMES = ("continuous", "mandatory", "momentary_cessation", "tripped")


@dataclass(frozen=True)
class DerControlParams:
    trv: float = 0.02
    tg: float = 0.02
    tiq: float = 0.02
    tpord: float = 0.02
    volt_var: bool = False
    kqv1: float = 0.0
    kqv2: float = 0.0
    tqv: float = 6.0
    dbq1: float = 0.956
    dbq2: float = 1.043
    dbp1: float = 1.07
    dbp2: float = 1.1075
    tpv: float = 8.0
    q_max: float = 0.44
    p_floor: float = 0.2
    i_max: float = 1.2

    def __post_init__(self):
        if min(self.trv, self.tg, self.tiq, self.tpord, self.tqv, self.tpv) <= 0:
            raise ValueError("time constants must be positive")
        if not (self.dbq1 < self.dbq2 and self.dbp1 < self.dbp2):
            raise ValueError("deadband edges must be increasing")


# Volt-VAr / Volt-Watt are only active for the 2020 code.
CONTROL_PARAMS = {
    "INV2005": DerControlParams(),
    "INV2015": DerControlParams(),
    "INV2020": DerControlParams(volt_var=True, kqv1=7.78, kqv2=7.65),
}


@dataclass(frozen=True)
class VrtSettings:
    code: str
    v_l0: float
    v_l1: float
    v_h1: float
    v_h0: float
    t_l0: float
    t_l1: float
    t_h1: float
    t_h0: float
    v_h_mc: float = float("nan")
    mc_deact_delay: float = 0.0
    mc_react_delay: float = 0.0

    def __post_init__(self):
        if not (self.v_l0 < self.v_l1 < self.v_h1 <= self.v_h0):
            raise ValueError(f"{self.code}: thresholds must satisfy v_l0 < v_l1 < v_h1 <= v_h0")
        if min(self.t_l0, self.t_l1, self.t_h1, self.t_h0) < 0:
            raise ValueError("clearing times must be non-negative")
        if not (0.0 <= self.mc_deact_delay <= 0.1 and 0.0 <= self.mc_react_delay <= 0.4):
            raise ValueError("momentary cessation delays out of range")


# Sampling bounds per code: (low, high) pairs, or fixed values.
VRT_BOUNDS = {
    "INV2005": dict(v_l0=(0.2, 0.8), v_l1=(0.84, 0.92), v_h1=(1.08, 1.12), v_h0=(1.14, 1.20),
                    t_l0=0.0, t_l1=(0.0, 0.2), t_h1=(0.0, 1.6), t_h0=0.0),
    "INV2015": dict(v_l0=(0.1, 0.5), v_l1=(0.84, 0.92), v_h1=(1.12, 1.14), v_h0=(1.14, 1.16),
                    t_l0=0.0, t_l1=(0.0, 1.0), t_h1=(0.0, 1.0), t_h0=0.0),
    "INV2020": dict(v_l0=(0.29, 0.31), v_l1=(0.77, 0.79), v_h1=(1.14, 1.16), v_h0=(1.19, 1.21),
                    t_l0=(1.0, 2.0), t_l1=10.0, t_h1=(1.0, 2.0), t_h0=0.0,
                    v_h_mc=(1.12, 1.14), mc_deact_delay=(0.0, 0.1), mc_react_delay=(0.0, 0.4)),
}


@dataclass
class DerUnitState:
    mode: int = CONTINUOUS
    v_filt: float = 1.0
    q_vv: float = 0.0
    p_vw: float = 1.0
    p_ord: float = 1.0
    ip: float = 1.0
    iq: float = 0.0
    t_l0: float = 0.0
    t_l1: float = 0.0
    t_h1: float = 0.0
    t_h0: float = 0.0
    t_mc: float = 0.0
    t_react: float = 0.0


@dataclass
class DerUnit:
    code: str
    bus: str
    p_rated: float  # pu on the system base
    vrt: VrtSettings
    control: DerControlParams
    state: DerUnitState = field(default_factory=DerUnitState)

    @property
    def active(self) -> bool:
        return self.state.mode in (CONTINUOUS, MANDATORY)


@dataclass(frozen=True)
class FleetSpec:
    shares: dict = field(default_factory=lambda: dict(SHARES))
    pv_node_mw: float = 0.2
    std_frac: float = 0.2
    seed: int = 0
    system_mva: float = 100.0

    def __post_init__(self):
        if abs(sum(self.shares.values()) - 1.0) > 1e-12:
            raise ValueError("code shares must sum to 1")
        if self.pv_node_mw <= 0 or self.std_frac < 0:
            raise ValueError("invalid setpoint distribution")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path) -> "FleetSpec":
        return cls(**json.loads(Path(path).read_text()))


def sample_fleet(spec: FleetSpec, placement, seed: int | None = None) -> list[DerUnit]:
    """Draw one unit per placement entry.

    VRT settings are uniform within :data:`VRT_BOUNDS`; rated powers are
    normal around ``share * pv_node_mw`` and clipped from below (to a tiny
    positive floor so every unit keeps a weight).
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    units = []
    for pl in placement:
        mean = spec.shares[pl.code] * spec.pv_node_mw
        p_mw = max(rng.normal(mean, spec.std_frac * mean), 1e-6 * mean)
        draws = {}
        for name, b in VRT_BOUNDS[pl.code].items():
            draws[name] = float(rng.uniform(*b)) if isinstance(b, tuple) else float(b)
        units.append(DerUnit(pl.code, pl.bus, p_mw / spec.system_mva,
                             VrtSettings(code=pl.code, **draws), CONTROL_PARAMS[pl.code]))
    return units


def volt_var_ref(v_filt, params: DerControlParams):
    """Reactive current reference (positive = injection), limited to +-q_max."""
    v = np.asarray(v_filt, dtype=float)
    q = np.where(v < params.dbq1, params.kqv1 * (params.dbq1 - v),
                 np.where(v > params.dbq2, -params.kqv2 * (v - params.dbq2), 0.0))
    q = np.clip(q, -params.q_max, params.q_max)
    return q if q.ndim else float(q)


def volt_watt_ref(v_filt, params: DerControlParams):
    """Active power ceiling in pu of rated power."""
    v = np.asarray(v_filt, dtype=float)
    frac = np.clip((v - params.dbp1) / (params.dbp2 - params.dbp1), 0.0, 1.0)
    p = 1.0 - (1.0 - params.p_floor) * frac
    return p if p.ndim else float(p)


def _lag_gain(dt, T):
    return 1.0 - np.exp(-dt / T)


_STATE_FIELDS = [f.name for f in fields(DerUnitState)]
_VRT_FIELDS = ["v_l0", "v_l1", "v_h1", "v_h0", "t_l0", "t_l1", "t_h1", "t_h0",
               "v_h_mc", "mc_deact_delay", "mc_react_delay"]
_CTRL_FIELDS = [f.name for f in fields(DerControlParams)]


class DerFleet:
    """Array container for many units; the aggregation point of the fleet."""

    def __init__(self, units, bus_index: dict | None = None):
        self.units_meta = [(u.code, u.bus, u.vrt, u.control) for u in units]
        self.code = np.array([u.code for u in units])
        self.code_idx = np.array([CODES.index(u.code) for u in units])
        self.bus_id = np.array([u.bus for u in units])
        self.bus = np.array([bus_index[u.bus] for u in units]) if bus_index else None
        self.p_rated = np.array([u.p_rated for u in units], dtype=float)
        self.is2020 = self.code == "INV2020"
        for name in _VRT_FIELDS:
            setattr(self, "vrt_" + name, np.array([getattr(u.vrt, name) for u in units], dtype=float))
        for name in _CTRL_FIELDS:
            setattr(self, "c_" + name, np.array([getattr(u.control, name) for u in units],
                                                dtype=bool if name == "volt_var" else float))
        for name in _STATE_FIELDS:
            setattr(self, name, np.array([getattr(u.state, name) for u in units],
                                         dtype=int if name == "mode" else float))
        self.hi_cont = np.where(self.is2020, self.vrt_v_h_mc, self.vrt_v_h1)

    def __len__(self):
        return self.p_rated.size

    def to_units(self) -> list[DerUnit]:
        out = []
        for k, (code, bus, vrt, ctrl) in enumerate(self.units_meta):
            st = DerUnitState(**{n: (int if n == "mode" else float)(getattr(self, n)[k])
                                 for n in _STATE_FIELDS})
            out.append(DerUnit(code, bus, float(self.p_rated[k]), vrt, ctrl, st))
        return out

    # -- control laws -------------------------------------------------------

    def _q_ref(self, v):
        q = np.where(v < self.c_dbq1, self.c_kqv1 * (self.c_dbq1 - v),
                     np.where(v > self.c_dbq2, -self.c_kqv2 * (v - self.c_dbq2), 0.0))
        return np.where(self.c_volt_var, np.clip(q, -self.c_q_max, self.c_q_max), 0.0)

    def _p_ceiling(self, v):
        frac = np.clip((v - self.c_dbp1) / (self.c_dbp2 - self.c_dbp1), 0.0, 1.0)
        return np.where(self.c_volt_var, 1.0 - (1.0 - self.c_p_floor) * frac, 1.0)

    def _current_refs(self, v_filt, p_ord, q):
        ip_ref = p_ord / np.maximum(v_filt, 0.01)
        imax = self.c_i_max
        q_priority = self.c_volt_var & (v_filt < self.c_dbq1)
        iq_q = np.clip(q, -imax, imax)
        ip_q = np.minimum(ip_ref, np.sqrt(np.maximum(imax**2 - iq_q**2, 0.0)))
        ip_p = np.minimum(ip_ref, imax)
        iq_p = np.clip(q, -np.sqrt(imax**2 - ip_p**2), np.sqrt(imax**2 - ip_p**2))
        return np.where(q_priority, ip_q, ip_p), np.where(q_priority, iq_q, iq_p)

    def initialize(self, v_mag) -> np.ndarray:
        """Settle every state at terminal voltage magnitudes ``v_mag``.

        Returns the steady complex power injection per unit.
        """
        v = np.asarray(v_mag, dtype=float)
        self.v_filt = v.copy()
        self.q_vv = self._q_ref(v)
        self.p_vw = self._p_ceiling(v)
        self.p_ord = np.minimum(1.0, self.p_vw)
        self.ip, self.iq = self._current_refs(v, self.p_ord, self.q_vv)
        for name in ("t_l0", "t_l1", "t_h1", "t_h0", "t_mc", "t_react"):
            setattr(self, name, np.zeros_like(v))
        cont = (v >= self.vrt_v_l1) & (v <= self.hi_cont)
        self.mode = np.where(cont, CONTINUOUS, MANDATORY)
        return self.p_rated * v * (self.ip + 1j * self.iq)

    # -- VRT state machine --------------------------------------------------

    def vrt_update(self, v, dt):
        """Advance region timers and modes for filtered voltages ``v``."""
        cont = (v >= self.vrt_v_l1) & (v <= self.hi_cont)
        below1, below0 = v < self.vrt_v_l1, v < self.vrt_v_l0
        above1, above0 = v > self.vrt_v_h1, v > self.vrt_v_h0

        self.t_l1 = np.where(cont, 0.0, self.t_l1 + np.where(below1, dt, 0.0))
        self.t_l0 = np.where(cont, 0.0, self.t_l0 + np.where(below0, dt, 0.0))
        self.t_h1 = np.where(cont, 0.0, self.t_h1 + np.where(above1, dt, 0.0))
        self.t_h0 = np.where(cont, 0.0, self.t_h0 + np.where(above0, dt, 0.0))
        trip = ((below1 & (self.t_l1 >= self.vrt_t_l1)) | (below0 & (self.t_l0 >= self.vrt_t_l0))
                | (above1 & (self.t_h1 >= self.vrt_t_h1)) | (above0 & (self.t_h0 >= self.vrt_t_h0)))

        mc_region = self.is2020 & (below0 | (v > self.vrt_v_h_mc))
        self.t_mc = np.where(mc_region, self.t_mc + dt, 0.0)
        in_mc = self.mode == MOMENTARY_CESSATION
        self.t_react = np.where(in_mc & cont, self.t_react + dt, 0.0)
        leave_mc = in_mc & cont & (self.t_react >= self.vrt_mc_react_delay)
        enter_mc = ~in_mc & mc_region & (self.t_mc >= self.vrt_mc_deact_delay)

        mode = np.where(cont, CONTINUOUS, MANDATORY)
        mode = np.where((in_mc & ~leave_mc) | enter_mc, MOMENTARY_CESSATION, mode)
        mode = np.where(trip | (self.mode == TRIPPED), TRIPPED, mode)
        self.t_react = np.where(leave_mc, 0.0, self.t_react)
        self.mode = mode

    # -- one time step ------------------------------------------------------

    def step(self, v_terminal, dt) -> np.ndarray:
        """Advance all units by ``dt``; returns complex current injections (system pu)."""
        v_terminal = np.asarray(v_terminal, dtype=complex)
        vm = np.abs(v_terminal)
        self.v_filt = self.v_filt + (vm - self.v_filt) * _lag_gain(dt, self.c_trv)
        vf = self.v_filt
        self.vrt_update(vf, dt)

        self.q_vv = self.q_vv + (self._q_ref(vf) - self.q_vv) * _lag_gain(dt, self.c_tqv)
        self.p_vw = self.p_vw + (self._p_ceiling(vf) - self.p_vw) * _lag_gain(dt, self.c_tpv)
        active = (self.mode == CONTINUOUS) | (self.mode == MANDATORY)
        p_target = np.minimum(1.0, self.p_vw)
        self.p_ord = np.where(active, self.p_ord + (p_target - self.p_ord) * _lag_gain(dt, self.c_tpord), 0.0)
        ip_ref, iq_ref = self._current_refs(vf, self.p_ord, self.q_vv)
        self.ip = np.where(active, self.ip + (ip_ref - self.ip) * _lag_gain(dt, self.c_tg), 0.0)
        self.iq = np.where(active, self.iq + (iq_ref - self.iq) * _lag_gain(dt, self.c_tiq), 0.0)
        return self.current(v_terminal)

    def current(self, v_terminal) -> np.ndarray:
        v_terminal = np.asarray(v_terminal, dtype=complex)
        # the angle stays finite for subnormal phasors, where v / |v| overflows
        unit = np.exp(1j * np.angle(v_terminal))
        return self.p_rated * (self.ip - 1j * self.iq) * unit

    # -- accounting ---------------------------------------------------------

    def active_mask(self) -> np.ndarray:
        return (self.mode == CONTINUOUS) | (self.mode == MANDATORY)

    def code_fractions(self) -> np.ndarray:
        """Rated-power-weighted active fraction per code, in ``CODES`` order."""
        w_all = np.bincount(self.code_idx, weights=self.p_rated, minlength=len(CODES))
        w_act = np.bincount(self.code_idx, weights=self.p_rated * self.active_mask(), minlength=len(CODES))
        with np.errstate(invalid="ignore", divide="ignore"):
            return w_act / w_all


def vrt_update(unit: DerUnit, v_filt: float, dt: float) -> DerUnit:
    if dt <= 0:
        raise ValueError("dt must be positive")
    fleet = DerFleet([unit])
    fleet.vrt_update(np.array([float(v_filt)]), dt)
    fleet.v_filt = np.array([float(v_filt)])
    return fleet.to_units()[0]


def der_step(unit: DerUnit, v_terminal: complex, dt: float) -> tuple[complex, DerUnit]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    fleet = DerFleet([unit])
    i = fleet.step(np.array([v_terminal]), dt)
    return complex(i[0]), fleet.to_units()[0]


def initialize_unit(unit: DerUnit, v_mag: float) -> DerUnit:
    fleet = DerFleet([unit])
    fleet.initialize(np.array([float(v_mag)]))
    return fleet.to_units()[0]


def fleet_active_fraction(units, code: str | None = None, shares=None) -> float:
    """Active fraction of one code, or the share-weighted total when ``code`` is None."""
    units = list(units)
    if code is None:
        shares = shares or SHARES
        return sum(w * fleet_active_fraction(units, c) for c, w in shares.items())
    group = [u for u in units if u.code == code]
    if not group:
        raise ValueError(f"no units of code {code}")
    total = sum(u.p_rated for u in group)
    return sum(u.p_rated for u in group if u.active) / total


def with_state(unit: DerUnit, **changes) -> DerUnit:
    return replace(unit, state=replace(unit.state, **changes))
