"""Co-simulation runs, disturbance suites, trace persistence and model evaluation.

One run couples three pieces at a fixed step:

1. the network, solved algebraically for bus voltages given the machine
   Norton terms and the DER current injections;
2. the machines and exciters, advanced with Heun's method;
3. the DER fleet, advanced with exact exponential lags.

The recorded quantities are the filtered substation voltage and the
active fraction of each grid code.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .calibrate import mae
from .der_fleet import DerFleet, FleetSpec, sample_fleet
from .machines import MachineBank, build_bank
from .network import (
    SUBSTATION_BUS,
    DisturbanceEvent,
    NetworkError,
    PhasorNetwork,
    TestSystem,
    assemble_test_system,
    fold_loads,
    solve_power_flow,
)
from .trip_models import CODES, SHARES, SIDES, TRV_DEFAULT, CompositeModel, composite_predict

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("t", "v_ss_filt", "frac_2005", "frac_2015", "frac_2020", "frac_weighted")

# Disturbance sweeps.  Injection magnitudes are the active-power part in pu
# on the system base; the reactive part follows the suite ratio.  Fault
# conductances are in pu.  Both ranges were chosen so outcomes run from no
# trips to almost all units tripped on the default system.
UNDER_STEP_DP = (0.15, 0.3, 0.45, 0.6, 0.75, 0.9)
OVER_STEP_DP = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
UNDER_FAULT_G = (3.0, 6.0, 12.0, 25.0, 60.0)

SUITE_SETTINGS = {
    "in_sample": dict(q_ratio=2.0, fault_duration=0.060),
    "out_of_sample": dict(q_ratio=0.8, fault_duration=0.120),
}


@dataclass(frozen=True)
class ScenarioSpec:
    """One disturbance run.

    ``disturbance`` is a single event or a tuple of events applied
    together (a temporary over-voltage is an injection step and its
    reversal).
    """

    disturbance: object
    side: str
    horizon: float = 5.0
    dt: float = 1e-3
    n_dg: int = 2
    seed: int = 0
    label: str = "in_sample"
    name: str = ""

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        if self.label not in SUITE_SETTINGS:
            raise ValueError(f"label must be one of {tuple(SUITE_SETTINGS)}")
        if self.events and self.horizon <= max(ev.t_end for ev in self.events):
            raise ValueError("horizon must extend past the end of the disturbance")

    @property
    def events(self) -> tuple:
        d = self.disturbance
        if d is None:
            return ()
        return (d,) if isinstance(d, DisturbanceEvent) else tuple(d)

    def to_dict(self) -> dict:
        return dict(side=self.side, horizon=self.horizon, dt=self.dt, n_dg=self.n_dg,
                    seed=self.seed, label=self.label, name=self.name,
                    events=[asdict(ev) for ev in self.events])

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        events = tuple(DisturbanceEvent(**ev) for ev in d["events"])
        return cls(events, d["side"], d["horizon"], d["dt"], d["n_dg"], d["seed"], d["label"], d["name"])


@dataclass
class SimulationTrace:
    t: np.ndarray
    v_ss_filt: np.ndarray
    fractions: np.ndarray  # (n, 3) in CODES order
    weighted: np.ndarray
    meta: dict = field(default_factory=dict)
    bus_vm: np.ndarray | None = None  # optional |V| history, not persisted

    @property
    def dt(self) -> float:
        return float(self.meta.get("dt", self.t[1] - self.t[0]))

    @property
    def side(self) -> str:
        return self.meta.get("side", "under")

    def fraction(self, code: str) -> np.ndarray:
        return self.fractions[:, CODES.index(code)]

    def columns(self) -> np.ndarray:
        return np.column_stack([self.t, self.v_ss_filt, self.fractions, self.weighted])


def weighted_fraction(fractions, shares=None) -> np.ndarray:
    shares = shares or SHARES
    return sum(shares[c] * np.asarray(fractions)[:, i] for i, c in enumerate(CODES))


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


@dataclass
class InitialCondition:
    system: TestSystem
    network: PhasorNetwork  # loads folded in
    V0: np.ndarray
    S0: np.ndarray
    bank: MachineBank
    x0: np.ndarray
    fleet: DerFleet


def _bus_sum(idx, values, n):
    return (np.bincount(idx, weights=values.real, minlength=n)
            + 1j * np.bincount(idx, weights=values.imag, minlength=n))


def initialize(system: TestSystem, fleet: DerFleet, fixtures_dir=None,
               max_outer: int = 20, tol: float = 1e-10) -> InitialCondition:
    """Power flow with DER injections, load folding and equilibrium back-initialisation.

    DER reactive output depends on the terminal voltage (Volt-VAr), so the
    power flow is repeated until the DER injections stop changing.
    """
    net = system.network
    n = net.n
    base = -np.asarray(system.load, dtype=complex)
    for k, p in system.gen_p.items():
        base[k] += p
    V = np.ones(n, dtype=complex)
    for k, vm in system.v_set.items():
        V[k] = vm
    s_der = np.zeros(n, dtype=complex)
    for _ in range(max_outer):
        pf = solve_power_flow(net, base + s_der, system.v_set, v0=V)
        V = pf.V
        new = _bus_sum(fleet.bus, fleet.initialize(np.abs(V[fleet.bus])), n)
        done = np.max(np.abs(new - s_der)) <= tol
        s_der = new
        if done:
            break
    else:
        raise NetworkError("DER/power-flow initialisation did not settle")
    pf = solve_power_flow(net, base + s_der, system.v_set, v0=V)
    folded = fold_loads(net, pf.V, system.load)
    bank, x0 = build_bank(net, pf.V, pf.S, fixtures_dir)
    fleet.initialize(np.abs(pf.V[fleet.bus]))
    return InitialCondition(system, folded, pf.V, pf.S, bank, x0, fleet)


# ---------------------------------------------------------------------------
# Network solution in real form with a low-rank machine correction
# ---------------------------------------------------------------------------


class _NetworkSolver:
    """Solves ``Y V = I_machine(V) + I_der`` for the real and imaginary parts.

    The machine currents are affine in their own terminal voltages, so the
    factorisation of the passive network is reused and only a small dense
    system on the machine terminals is solved per call.
    """

    def __init__(self, Y, machine_buses):
        n = Y.shape[0]
        G, B = Y.real, Y.imag
        A = np.block([[G, -B], [B, G]])
        self.n = n
        self.idx = np.ravel(np.column_stack([machine_buses, machine_buses + n]))
        self.lu = lu_factor(A)
        E = np.zeros((2 * n, self.idx.size))
        E[self.idx, np.arange(self.idx.size)] = 1.0
        self.Z = lu_solve(self.lu, E)
        self.ZE = self.Z[self.idx]

    def solve(self, M, c, i_inj):
        n = self.n
        m = M.shape[0]
        Mb = np.zeros((2 * m, 2 * m))
        for k in range(m):
            Mb[2 * k:2 * k + 2, 2 * k:2 * k + 2] = M[k]
        cb = c.reshape(-1)
        x0 = lu_solve(self.lu, np.r_[i_inj.real, i_inj.imag])
        xE = np.linalg.solve(np.eye(2 * m) - self.ZE @ Mb, x0[self.idx] + self.ZE @ cb)
        x = x0 + self.Z @ (Mb @ xE + cb)
        V = x[:n] + 1j * x[n:]
        if not np.all(np.isfinite(V)):
            raise NetworkError("non-finite network solution")
        return V


def _event_admittances(events, index, V0, t) -> tuple:
    """Diagonal admittance changes of all events active at ``t``.

    Injection steps are represented as constant admittances sized at the
    pre-disturbance voltage.
    """
    out = []
    for ev in events:
        if not ev.active(t):
            continue
        k = index[ev.bus]
        if ev.kind == "fault":
            out.append((k, complex(ev.g_sc)))
        else:
            out.append((k, -np.conj(complex(ev.dP, ev.dQ)) / abs(V0[k]) ** 2))
    return tuple(out)


# ---------------------------------------------------------------------------
# Time loop
# ---------------------------------------------------------------------------


def run_cosimulation(system: TestSystem, fleet: DerFleet, scenario: ScenarioSpec,
                     fixtures_dir=None, trv: float = TRV_DEFAULT,
                     record_buses: bool = False) -> SimulationTrace:
    """Fixed-step co-simulation of one scenario; ``fleet`` is advanced in place."""
    ic = initialize(system, fleet, fixtures_dir)
    net, bank = ic.network, ic.bank
    n = net.n
    dt = scenario.dt
    n_steps = int(round(scenario.horizon / dt))
    ss = net.index[SUBSTATION_BUS]
    for ev in scenario.events:
        if ev.bus not in net.index:
            raise NetworkError(f"disturbance at unknown bus {ev.bus!r}")

    solvers: dict[tuple, _NetworkSolver] = {}

    def solver_at(t):
        # evaluate at mid-step so event edges land exactly on grid points
        key = _event_admittances(scenario.events, net.index, ic.V0, t + 0.5 * dt)
        if key not in solvers:
            Y = np.array(net.Y)
            for k, y in key:
                Y[k, k] += y
            solvers[key] = _NetworkSolver(Y, bank.buses)
        return solvers[key]

    def network(x, i_der, t):
        M, c = bank.norton(x)
        return solver_at(t).solve(M, c, i_der)

    x = ic.x0.copy()
    i_der = _bus_sum(fleet.bus, fleet.current(ic.V0[fleet.bus]), n)
    t_grid = np.arange(n_steps + 1) * dt
    V = network(x, i_der, 0.0)

    v_raw = np.empty(n_steps + 1)
    fr = np.empty((n_steps + 1, len(CODES)))
    vm_hist = np.empty((n_steps + 1, n)) if record_buses else None
    v_raw[0] = abs(V[ss])
    fr[0] = fleet.code_fractions()
    if record_buses:
        vm_hist[0] = np.abs(V)

    for k in range(n_steps):
        t_next = t_grid[k + 1]
        k1 = bank.derivatives(x, V[bank.buses])
        x_pred = bank.clamp(x + dt * k1)
        V_pred = network(x_pred, i_der, t_next)
        k2 = bank.derivatives(x_pred, V_pred[bank.buses])
        x = bank.clamp(x + 0.5 * dt * (k1 + k2))

        i_der = _bus_sum(fleet.bus, fleet.step(V[fleet.bus], dt), n)
        V = network(x, i_der, t_next)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite machine state at t={t_next:.4f}")
        v_raw[k + 1] = abs(V[ss])
        fr[k + 1] = fleet.code_fractions()
        if record_buses:
            vm_hist[k + 1] = np.abs(V)

    a = 1.0 - np.exp(-dt / trv) if trv > 0 else 1.0
    v_filt = np.empty_like(v_raw)
    v_filt[0] = v_raw[0]
    for k in range(1, v_raw.size):
        v_filt[k] = v_filt[k - 1] + (v_raw[k] - v_filt[k - 1]) * a

    meta = dict(scenario.to_dict(), n_inverters=len(fleet), n_buses=n,
                shares=dict(SHARES), trv=trv)
    return SimulationTrace(t_grid, v_filt, fr, weighted_fraction(fr), meta, vm_hist)


def simulate_scenario(scenario: ScenarioSpec, fleet_spec: FleetSpec | None = None,
                      fixtures_dir=None, record_buses: bool = False) -> SimulationTrace:
    """Build the system and fleet for ``scenario`` (seeded) and run it."""
    system = assemble_test_system(scenario.n_dg, scenario.seed, fixtures_dir)
    spec = fleet_spec or FleetSpec(seed=scenario.seed)
    units = sample_fleet(spec, system.placement, seed=scenario.seed)
    fleet = DerFleet(units, system.network.index)
    return run_cosimulation(system, fleet, scenario, fixtures_dir, record_buses=record_buses)


def _run_job(args):
    scenario, fleet_spec, fixtures_dir = args
    return simulate_scenario(scenario, fleet_spec, fixtures_dir)


def worker_count() -> int:
    raw = os.environ.get("GRIDTRIP_THREADS")
    cap = int(raw) if raw else (os.cpu_count() or 1)
    return max(1, min(cap, os.cpu_count() or 1))


def run_suite(scenarios, fleet_spec: FleetSpec | None = None, fixtures_dir=None,
              workers: int | None = None) -> list[SimulationTrace]:
    """Run independent scenarios, in worker processes when more than one is allowed."""
    jobs = [(s, fleet_spec, fixtures_dir) for s in scenarios]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def generate_suite(kind: str, n_dg: int = 2, seed: int = 0, n_steps: int = 6, n_faults: int = 5,
                   horizon: float = 5.0, dt: float = 1e-3, t_start: float = 0.5,
                   bus: str = SUBSTATION_BUS) -> list[ScenarioSpec]:
    """Disturbance sweep for one suite kind (``in_sample`` or ``out_of_sample``).

    ``n_steps`` injection steps are generated for each sign: load steps
    (negative injection) give under-voltage events and capacitive steps
    give over-voltage events.  The ``n_faults`` three-phase faults only
    depress the voltage, so they all belong to the under-voltage side.
    """
    kind = kind.replace("-", "_")
    if kind not in SUITE_SETTINGS:
        raise ValueError(f"unknown suite kind {kind!r}")
    cfg = SUITE_SETTINGS[kind]
    ratio, dur = cfg["q_ratio"], cfg["fault_duration"]

    def sweep(values, count):
        values = np.asarray(values, dtype=float)
        if count == values.size:
            return values
        return np.interp(np.linspace(0, values.size - 1, count), np.arange(values.size), values)

    common = dict(horizon=horizon, dt=dt, n_dg=n_dg, seed=seed, label=kind)
    out = []
    for i, dp in enumerate(sweep(UNDER_STEP_DP, n_steps)):
        ev = DisturbanceEvent("injection_step", bus, t_start, dP=-dp, dQ=-ratio * dp)
        out.append(ScenarioSpec(ev, "under", name=f"under_step_{i}", **common))
    for i, g in enumerate(sweep(UNDER_FAULT_G, n_faults)):
        ev = DisturbanceEvent("fault", bus, t_start, t_start + dur, g_sc=g)
        out.append(ScenarioSpec(ev, "under", name=f"under_fault_{i}", **common))
    for i, dp in enumerate(sweep(OVER_STEP_DP, n_steps)):
        ev = DisturbanceEvent("injection_step", bus, t_start, dP=dp, dQ=ratio * dp)
        out.append(ScenarioSpec(ev, "over", name=f"over_step_{i}", **common))
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class SuiteReport:
    mae: dict  # model -> side -> percent
    per_scenario: dict  # model -> scenario name -> percent
    config: dict = field(default_factory=dict)

    def table(self) -> str:
        models = list(self.mae)
        width = max([5] + [len(m) for m in models])
        lines = ["side   " + "  ".join(f"{m:>{width}}" for m in models)]
        for side in SIDES:
            cells = [self.mae[m].get(side, float("nan")) for m in models]
            lines.append(f"{side:<6} " + "  ".join(f"{c:>{width}.2f}" for c in cells))
        return "\n".join(lines)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(dict(mae=self.mae, per_scenario=self.per_scenario,
                                              config=self.config), indent=2))


def predict_trace(model: CompositeModel, trace: SimulationTrace):
    return composite_predict(model, trace.v_ss_filt, trace.dt)


def evaluate_models(traces, models: dict) -> SuiteReport:
    """MAE (percent) of each model's weighted prediction, grouped by trace side."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to evaluate")
    dts = {round(tr.dt, 12) for tr in traces}
    if len(dts) > 1:
        raise ValueError(f"traces use different time steps: {sorted(dts)}")
    table, per = {}, {}
    for name, model in models.items():
        preds = {side: ([], []) for side in SIDES}
        per[name] = {}
        for i, tr in enumerate(traces):
            _, w = predict_trace(model, tr)
            preds[tr.side][0].append(w)
            preds[tr.side][1].append(tr.weighted)
            per[name][tr.meta.get("name") or f"trace_{i}"] = mae(w, tr.weighted)
        table[name] = {side: mae(p, a) for side, (p, a) in preds.items() if p}
    return SuiteReport(table, per, dict(n_traces=len(traces), dt=dts.pop()))


def fit_targets(traces, side: str, code: str):
    """``(voltage, target)`` pairs of one code from the traces of one side (or both)."""
    return [(tr.v_ss_filt, tr.fraction(code)) for tr in traces if side == "both" or tr.side == side]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


class TraceFormatError(ValueError):
    pass


def write_traces(traces, directory) -> list[Path]:
    """One CSV and one JSON sidecar per trace, plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, tr in enumerate(traces):
        stem = tr.meta.get("name") or f"trace_{i:03d}"
        np.savetxt(d / f"{stem}.csv", tr.columns(), delimiter=",", fmt="%.17g",
                   header=",".join(TRACE_COLUMNS), comments="")
        (d / f"{stem}.json").write_text(json.dumps(tr.meta, indent=2, sort_keys=True))
        names.append(stem)
    manifest = dict(traces=names, n_traces=len(names),
                    n_inverters=traces[0].meta.get("n_inverters") if traces else 0,
                    columns=list(TRACE_COLUMNS))
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return [d / f"{s}.csv" for s in names]


def read_trace(csv_path) -> SimulationTrace:
    p = Path(csv_path)
    with p.open() as fh:
        header = fh.readline().strip().split(",")
    if len(header) != len(TRACE_COLUMNS):
        raise TraceFormatError(f"{p.name}: expected {len(TRACE_COLUMNS)} columns, got {len(header)}")
    for want, got in zip(TRACE_COLUMNS, header):
        if want != got:
            raise TraceFormatError(f"{p.name}: column {got!r} where {want!r} was expected")
    try:
        data = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise TraceFormatError(f"{p.name}: {exc}") from exc
    side_car = p.with_suffix(".json")
    meta = json.loads(side_car.read_text()) if side_car.exists() else {}
    return SimulationTrace(data[:, 0], data[:, 1], data[:, 2:5], data[:, 5], meta)


def read_traces(directory) -> list[SimulationTrace]:
    """Read every trace in ``directory`` (manifest order when present)."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"trace directory {d} does not exist")
    manifest = d / "manifest.json"
    if manifest.exists():
        files = [d / f"{s}.csv" for s in json.loads(manifest.read_text())["traces"]]
    else:
        files = sorted(d.glob("*.csv"))
    if not files:
        warnings.warn(f"no traces found in {d}", stacklevel=2)
        return []
    return [read_trace(f) for f in files]
