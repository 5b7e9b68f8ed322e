"""Phasor-domain network: admittance assembly, power flow, disturbances.

All quantities are per-unit on the 100 MVA system base.  Bus identifiers
are strings; matrices are indexed by bus position in ``PhasorNetwork.buses``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

SYSTEM_BASE_MVA = 100.0
SUBSTATION_BUS = "5"


class NetworkError(ValueError):
    """Invalid network data or an unsolvable network state."""


class PowerFlowError(RuntimeError):
    """Newton iteration failed to converge or hit a singular Jacobian."""


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str = "load"  # slack | generator | load
    base_kv: float = 1.0
    shunt: complex = 0j

    def __post_init__(self):
        if self.kind not in ("slack", "generator", "load"):
            raise NetworkError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not self.base_kv > 0:
            raise NetworkError(f"bus {self.id}: base_kv must be positive")


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    z: complex
    b: float = 0.0
    tap: float = 1.0

    def __post_init__(self):
        if self.z == 0:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus}: zero series impedance")
        if not self.tap > 0:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus}: tap ratio must be positive")


def build_admittance(buses, branches) -> np.ndarray:
    """Dense bus admittance matrix (pi branch model, off-nominal tap on the from side)."""
    index = _index(buses)
    n = len(index)
    Y = np.zeros((n, n), dtype=complex)
    for bus in buses:
        Y[index[bus.id], index[bus.id]] += bus.shunt
    for br in branches:
        try:
            i, j = index[br.from_bus], index[br.to_bus]
        except KeyError as exc:
            raise NetworkError(f"branch {br.from_bus}-{br.to_bus}: unknown bus {exc.args[0]}") from None
        y = 1.0 / br.z
        ych = 0.5j * br.b
        Y[i, i] += (y + ych) / br.tap**2
        Y[j, j] += y + ych
        Y[i, j] -= y / br.tap
        Y[j, i] -= y / br.tap
    return Y


def _index(buses) -> dict[str, int]:
    index: dict[str, int] = {}
    for k, bus in enumerate(buses):
        if bus.id in index:
            raise NetworkError(f"duplicate bus id {bus.id!r}")
        index[bus.id] = k
    return index


@dataclass(frozen=True)
class PhasorNetwork:
    buses: tuple
    branches: tuple
    Y: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        Y = build_admittance(self.buses, self.branches) if self.Y is None else np.array(self.Y)
        Y.flags.writeable = False
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "index", _index(self.buses))

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def slack(self) -> int:
        slack = [k for k, b in enumerate(self.buses) if b.kind == "slack"]
        if len(slack) != 1:
            raise NetworkError(f"expected exactly one slack bus, found {len(slack)}")
        return slack[0]

    def kinds(self) -> np.ndarray:
        return np.array([b.kind for b in self.buses])

    def with_shunts(self, extra) -> "PhasorNetwork":
        """Copy with per-bus shunt admittances added (e.g. folded loads)."""
        extra = np.asarray(extra, dtype=complex)
        buses = tuple(replace(b, shunt=b.shunt + complex(extra[k])) for k, b in enumerate(self.buses))
        return PhasorNetwork(buses, self.branches, self.Y + np.diag(extra))


# ---------------------------------------------------------------------------
# Power flow
# ---------------------------------------------------------------------------


@dataclass
class PowerFlowResult:
    V: np.ndarray
    S: np.ndarray  # computed net injections
    iterations: int
    max_mismatch: float


def solve_power_flow(network: PhasorNetwork, s_inj, v_set=None, v0=None,
                     tol: float = 1e-8, max_iter: int = 50) -> PowerFlowResult:
    """Newton-Raphson power flow in polar coordinates.

    ``s_inj`` holds the scheduled net complex injection per bus (reactive
    part ignored at generator and slack buses).  ``v_set`` maps bus index to
    a voltage magnitude for slack and generator buses; unset buses keep the
    magnitude of ``v0`` (flat start by default).
    """
    Y = network.Y
    n = network.n
    s_inj = np.asarray(s_inj, dtype=complex)
    if not np.all(np.isfinite(s_inj)):
        raise NetworkError("injection setpoints must be finite")
    slack = network.slack
    kinds = network.kinds()
    V = np.ones(n, dtype=complex) if v0 is None else np.array(v0, dtype=complex)
    if v_set:
        for k, vm in dict(v_set).items():
            V[k] = vm * np.exp(1j * np.angle(V[k]))

    pv = np.flatnonzero(kinds == "generator")
    pq = np.flatnonzero(kinds == "load")
    ang = np.r_[pv, pq]
    mag = pq

    for it in range(max_iter + 1):
        I = Y @ V
        S = V * np.conj(I)
        mis = S - s_inj
        F = np.r_[mis.real[ang], mis.imag[mag]]
        worst = float(np.max(np.abs(F))) if F.size else 0.0
        if worst <= tol:
            return PowerFlowResult(V, S, it, worst)
        if it == max_iter:
            break
        Vm = np.abs(V)
        En = V / Vm
        dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(I) - Y @ np.diag(V))
        dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(En)) + np.diag(np.conj(I)) @ np.diag(En)
        J = np.block([
            [dS_dVa.real[np.ix_(ang, ang)], dS_dVm.real[np.ix_(ang, mag)]],
            [dS_dVa.imag[np.ix_(mag, ang)], dS_dVm.imag[np.ix_(mag, mag)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("singular Jacobian") from exc
        Va = np.angle(V)
        Va[ang] += dx[: ang.size]
        Vm[mag] += dx[ang.size:]
        V = Vm * np.exp(1j * Va)
        if not np.all(np.isfinite(V)):
            raise PowerFlowError("power flow diverged")
    raise PowerFlowError(f"no convergence after {max_iter} iterations (mismatch {worst:.3g})")


# ---------------------------------------------------------------------------
# Disturbances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DisturbanceEvent:
    kind: str  # fault | injection_step
    bus: str
    t_start: float
    t_clear: float | None = None
    g_sc: float = 0.0
    dP: float = 0.0
    dQ: float = 0.0

    def __post_init__(self):
        if self.kind == "fault":
            if self.t_clear is None or not self.t_clear > self.t_start:
                raise NetworkError("fault needs t_clear > t_start")
            if self.g_sc < 0:
                raise NetworkError("fault conductance must be non-negative")
        elif self.kind != "injection_step":
            raise NetworkError(f"unknown disturbance kind {self.kind!r}")
        if self.t_start < 0:
            raise NetworkError("t_start must be non-negative")

    @property
    def t_end(self) -> float:
        return self.t_clear if self.kind == "fault" else self.t_start

    def active(self, t: float) -> bool:
        if self.kind == "fault":
            return self.t_start <= t < self.t_clear
        return t >= self.t_start


@dataclass(frozen=True)
class Overlay:
    """Additive changes on top of a base network: admittance diagonal and injections."""

    dY: tuple = ()  # ((bus index, admittance), ...)
    dS: tuple = ()  # ((bus index, complex power), ...)

    @property
    def is_identity(self) -> bool:
        return not self.dY and not self.dS

    def admittance(self, Y) -> np.ndarray:
        out = np.array(Y, dtype=complex)
        for k, y in self.dY:
            out[k, k] += y
        return out

    def injection(self, S) -> np.ndarray:
        out = np.array(S, dtype=complex)
        for k, s in self.dS:
            out[k] += s
        return out

    def __add__(self, other: "Overlay") -> "Overlay":
        return Overlay(self.dY + other.dY, self.dS + other.dS)


def apply_disturbance(network: PhasorNetwork, event: DisturbanceEvent, t: float) -> Overlay:
    """Overlay describing ``event`` at time ``t``; the network itself is untouched."""
    if t < 0:
        raise NetworkError("t must be non-negative")
    if event.bus not in network.index:
        raise NetworkError(f"disturbance at unknown bus {event.bus!r}")
    if not event.active(t):
        return Overlay()
    k = network.index[event.bus]
    if event.kind == "fault":
        return Overlay(dY=((k, complex(event.g_sc)),))
    return Overlay(dS=((k, complex(event.dP, event.dQ)),))


def overlay_at(network: PhasorNetwork, events, t: float) -> Overlay:
    total = Overlay()
    for ev in events:
        total = total + apply_disturbance(network, ev, t)
    return total


def solve_network_step(Y, I) -> np.ndarray:
    """Solve ``Y V = I`` for the bus voltages."""
    Y = np.asarray(Y, dtype=complex)
    I = np.asarray(I, dtype=complex)
    try:
        V = np.linalg.solve(Y, I)
    except np.linalg.LinAlgError as exc:
        raise NetworkError("singular network admittance") from exc
    resid = np.max(np.abs(Y @ V - I)) if V.size else 0.0
    scale = max(1.0, float(np.max(np.abs(I))) if I.size else 1.0)
    if not np.all(np.isfinite(V)) or resid > 1e-8 * scale:
        raise NetworkError(f"network solution unreliable (residual {resid:.3g})")
    return V


# ---------------------------------------------------------------------------
# Fixtures and the combined test system
# ---------------------------------------------------------------------------


def _read_fixture(name: str, fixtures_dir=None) -> dict:
    if fixtures_dir is not None:
        path = Path(fixtures_dir) / name
        if not path.exists():
            raise FileNotFoundError(f"missing fixture {path}")
        return json.loads(path.read_text())
    return json.loads(resources.files("gridtrip").joinpath("fixtures", name).read_text())


def load_ieee9(fixtures_dir=None):
    """Return ``(buses, branches, raw_fixture)`` for the 9-bus system."""
    d = _read_fixture("ieee9.json", fixtures_dir)
    buses = [Bus(b["id"], b["kind"], b["base_kv"], complex(b.get("g_sh", 0.0), b.get("b_sh", 0.0)))
             for b in d["buses"]]
    branches = [Branch(b["from"], b["to"], complex(b["r"], b["x"]), b["b"], b.get("tap", 1.0))
                for b in d["branches"]]
    return buses, branches, d


@dataclass(frozen=True)
class UnitPlacement:
    feeder: int
    node: str
    bus: str
    code: str


@dataclass(frozen=True)
class TestSystem:
    """Combined transmission-distribution system before load folding."""

    network: PhasorNetwork
    load: np.ndarray  # consumed complex power per bus (pu)
    gen_p: dict  # bus index -> scheduled active power (pu)
    v_set: dict  # bus index -> voltage magnitude setpoint
    placement: tuple  # UnitPlacement per inverter
    pv_node_mw: float
    n_dg: int
    seed: int
    substation: int
    feeder_heads: tuple = ()

    __test__ = False  # not a pytest class

    @property
    def n_inverters(self) -> int:
        return len(self.placement)


def assemble_test_system(n_dg: int, seed: int = 0, fixtures_dir=None,
                         codes=("INV2005", "INV2015", "INV2020")) -> TestSystem:
    """IEEE 9-bus system with ``n_dg`` CIGRE LV feeders attached at bus 5.

    Every PV node of every feeder hosts one unit per grid code.  Feeder
    node loads are sampled around the fixture setpoint (normal, clipped at
    zero) with a generator seeded from ``seed``.
    """
    if n_dg < 1:
        raise NetworkError("n_dg must be at least 1")
    buses, branches, d9 = load_ieee9(fixtures_dir)
    feeder = _read_fixture("cigre_lv_feeder.json", fixtures_dir)
    rng = np.random.default_rng(seed)

    base_eff = feeder["base_mva"] * feeder["aggregation"]
    zscale = SYSTEM_BASE_MVA / base_eff
    tr = feeder["substation_transformer"]
    sp = feeder["node_setpoints"]
    tan_phi = np.tan(np.arccos(sp["load_pf"]))

    loads: dict[str, complex] = {b["id"]: complex(b.get("p_load", 0.0), b.get("q_load", 0.0))
                                 for b in d9["buses"]}
    placement = []
    heads = []
    for k in range(1, n_dg + 1):
        name = lambda node: f"F{k}.{node}"  # noqa: E731
        for fb in feeder["buses"]:
            buses.append(Bus(name(fb["id"]), "load", fb["base_kv"]))
        heads.append(name(feeder["head"]))
        branches.append(Branch(SUBSTATION_BUS, name(feeder["head"]),
                               complex(tr["r"], tr["x"]) * zscale, 0.0, tr.get("tap", 1.0)))
        for fb in feeder["branches"]:
            branches.append(Branch(name(fb["from"]), name(fb["to"]),
                                   complex(fb["r"], fb["x"]) * zscale, fb["b"] / zscale, fb["tap"]))
        for node in feeder["pv_nodes"]:
            p_mw = max(0.0, rng.normal(sp["load_mw"], sp["std_frac"] * sp["load_mw"]))
            loads[name(node)] = complex(p_mw, p_mw * tan_phi) / SYSTEM_BASE_MVA
            for code in codes:
                placement.append(UnitPlacement(k, node, name(node), code))

    net = PhasorNetwork(buses, branches)
    load = np.array([loads.get(b.id, 0j) for b in net.buses])
    gen_p = {net.index[b["id"]]: b["p_gen"] for b in d9["buses"] if b["kind"] == "generator"}
    v_set = {net.index[b["id"]]: b["v_set"] for b in d9["buses"] if "v_set" in b}
    return TestSystem(net, load, gen_p, v_set, tuple(placement), sp["pv_mw"], n_dg, seed,
                      net.index[SUBSTATION_BUS], tuple(heads))


def fold_loads(network: PhasorNetwork, V, load) -> PhasorNetwork:
    """Convert consumed power ``load`` at voltages ``V`` into constant admittances."""
    V = np.asarray(V, dtype=complex)
    return network.with_shunts(np.conj(np.asarray(load, dtype=complex)) / np.abs(V) ** 2)
