"""Two-axis synchronous machines with IEEE DC1A excitation.

Stator convention: ``Vd + jVq = V exp(-j(delta - pi/2))`` and the stator
current leaving the machine is ``(Id + jIq) exp(j(delta - pi/2))``; with
zero armature resistance

    Vd = Ed' + Xq' Iq,        Vq = Eq' - Xd' Id.

Functions accept scalars or equally shaped arrays in every field, so the
same code advances one machine or a whole bank.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

OMEGA_S = 2 * np.pi * 60.0


@dataclass(frozen=True)
class SyncMachineParams:
    H: float
    D: float
    Xd: float
    Xq: float
    Xd_p: float
    Xq_p: float
    Td0_p: float
    Tq0_p: float
    base_mva: float = 100.0

    def __post_init__(self):
        a = {f.name: np.asarray(getattr(self, f.name), dtype=float) for f in fields(self)}
        if not np.all(a["H"] > 0):
            raise ValueError("H must be positive")
        if not (np.all(a["Xd"] >= a["Xd_p"]) and np.all(a["Xd_p"] > 0)):
            raise ValueError("need Xd >= Xd' > 0")
        if not (np.all(a["Xq"] >= a["Xq_p"]) and np.all(a["Xq_p"] > 0)):
            raise ValueError("need Xq >= Xq' > 0")
        if not (np.all(a["Td0_p"] > 0) and np.all(a["Tq0_p"] > 0)):
            raise ValueError("open-circuit time constants must be positive")

    def on_base(self, system_mva: float) -> "SyncMachineParams":
        k = self.base_mva / system_mva
        return SyncMachineParams(self.H * k, self.D * k, self.Xd / k, self.Xq / k,
                                 self.Xd_p / k, self.Xq_p / k, self.Td0_p, self.Tq0_p, system_mva)

    @classmethod
    def stack(cls, items) -> "SyncMachineParams":
        return cls(**{f.name: np.array([getattr(p, f.name) for p in items], dtype=float)
                      for f in fields(cls)})


@dataclass(frozen=True)
class SyncMachineState:
    delta: float
    d_omega: float
    eq_p: float
    ed_p: float


@dataclass(frozen=True)
class Dc1aParams:
    Ka: float = 20.0
    Ta: float = 0.2
    Ke: float = 1.0
    Te: float = 0.314
    Kf: float = 0.063
    Tf: float = 0.35
    Vr_min: float = -5.0
    Vr_max: float = 5.0
    se_a: float = 0.0
    se_b: float = 0.0

    def __post_init__(self):
        if min(self.Ta, self.Te, self.Tf) <= 0:
            raise ValueError("exciter time constants must be positive")
        if not self.Vr_min < self.Vr_max:
            raise ValueError("need Vr_min < Vr_max")

    def saturation(self, efd):
        return self.se_a * np.exp(self.se_b * np.asarray(efd))


@dataclass(frozen=True)
class Dc1aState:
    efd: float
    vr: float
    vf: float
    vref: float


def dq_voltage(v_terminal, delta):
    vdq = np.asarray(v_terminal) * np.exp(-1j * (np.asarray(delta) - np.pi / 2))
    return vdq.real, vdq.imag


def stator_currents(state: SyncMachineState, v_terminal, params: SyncMachineParams):
    vd, vq = dq_voltage(v_terminal, state.delta)
    i_d = (state.eq_p - vq) / params.Xd_p
    i_q = (vd - state.ed_p) / params.Xq_p
    return i_d, i_q


def machine_current_injection(state: SyncMachineState, v_terminal, params: SyncMachineParams):
    """Stator current in the network frame for a given terminal voltage."""
    i_d, i_q = stator_currents(state, v_terminal, params)
    return (i_d + 1j * i_q) * np.exp(1j * (np.asarray(state.delta) - np.pi / 2))


def electrical_power(state: SyncMachineState, i_d, i_q, params: SyncMachineParams):
    return state.ed_p * i_d + state.eq_p * i_q + (params.Xq_p - params.Xd_p) * i_d * i_q


def machine_derivatives(state: SyncMachineState, exciter: Dc1aState, v_terminal, pm,
                        params: SyncMachineParams, omega_s: float = OMEGA_S) -> SyncMachineState:
    """Time derivatives of the two-axis machine states."""
    i_d, i_q = stator_currents(state, v_terminal, params)
    pe = electrical_power(state, i_d, i_q, params)
    return SyncMachineState(
        delta=omega_s * state.d_omega,
        d_omega=(pm - pe - params.D * state.d_omega) / (2 * params.H),
        eq_p=(-state.eq_p - (params.Xd - params.Xd_p) * i_d + exciter.efd) / params.Td0_p,
        ed_p=(-state.ed_p + (params.Xq - params.Xq_p) * i_q) / params.Tq0_p,
    )


def avr_derivatives(exciter: Dc1aState, v_mag, params: Dc1aParams) -> Dc1aState:
    """DC1A derivatives; the regulator integrator freezes at its limits (anti-windup)."""
    efd, vr, vf = exciter.efd, exciter.vr, exciter.vf
    d_efd = (-(params.Ke + params.saturation(efd)) * efd + vr) / params.Te
    d_vf = (params.Kf * d_efd - vf) / params.Tf
    d_vr = (params.Ka * (exciter.vref - np.asarray(v_mag) - vf) - vr) / params.Ta
    d_vr = np.where((vr >= params.Vr_max) & (d_vr > 0), 0.0, d_vr)
    d_vr = np.where((vr <= params.Vr_min) & (d_vr < 0), 0.0, d_vr)
    return Dc1aState(efd=d_efd, vr=d_vr, vf=d_vf, vref=np.zeros_like(d_vr))


def init_equilibrium(v_terminal, s_gen, params: SyncMachineParams, exc: Dc1aParams):
    """Back-initialise machine and exciter states from a power-flow point.

    Returns ``(SyncMachineState, Dc1aState, Pm)``.
    """
    v = np.asarray(v_terminal, dtype=complex)
    i = np.conj(np.asarray(s_gen, dtype=complex) / v)
    delta = np.angle(v + 1j * params.Xq * i)
    rot = np.exp(-1j * (delta - np.pi / 2))
    idq, vdq = i * rot, v * rot
    i_d, i_q = idq.real, idq.imag
    vd, vq = vdq.real, vdq.imag
    ed_p = vd - params.Xq_p * i_q
    eq_p = vq + params.Xd_p * i_d
    efd = eq_p + (params.Xd - params.Xd_p) * i_d
    pm = vd * i_d + vq * i_q
    vr = (exc.Ke + exc.saturation(efd)) * efd
    if np.any(vr > exc.Vr_max) or np.any(vr < exc.Vr_min):
        raise ValueError("initial field voltage outside exciter limits")
    vref = np.abs(v) + vr / exc.Ka
    zero = np.zeros_like(delta)
    return (SyncMachineState(delta, zero.copy(), eq_p, ed_p),
            Dc1aState(efd, vr, zero.copy(), vref), pm)


def norton_terms(state: SyncMachineState, params: SyncMachineParams):
    """Stator current as an affine map of the terminal voltage, in real form.

    Returns ``(M, c)`` with shapes ``(n, 2, 2)`` and ``(n, 2)`` such that
    ``[Re I, Im I] = M @ [Re V, Im V] + c``.  Saliency (``Xd' != Xq'``)
    makes the map real-linear rather than complex-linear.
    """
    phi = np.atleast_1d(state.delta) - np.pi / 2
    c, s = np.cos(phi), np.sin(phi)
    gd, gq = 1.0 / np.atleast_1d(params.Xd_p), 1.0 / np.atleast_1d(params.Xq_p)
    M = np.empty((phi.size, 2, 2))
    M[:, 0, 0] = c * s * (gd - gq)
    M[:, 0, 1] = -(c * c * gd + s * s * gq)
    M[:, 1, 0] = s * s * gd + c * c * gq
    M[:, 1, 1] = c * s * (gq - gd)
    eq, ed = np.atleast_1d(state.eq_p), np.atleast_1d(state.ed_p)
    k = np.stack([c * eq * gd + s * ed * gq, s * eq * gd - c * ed * gq], axis=1)
    return M, k


@dataclass
class MachineBank:
    """Machines and exciters of one system, with states packed in a matrix.

    Columns of the state matrix: delta, d_omega, Eq', Ed', Efd, Vr, Vf.
    """

    buses: np.ndarray
    params: SyncMachineParams
    exciter: Dc1aParams
    pm: np.ndarray
    vref: np.ndarray
    omega_s: float = OMEGA_S

    def unpack(self, x):
        return (SyncMachineState(x[:, 0], x[:, 1], x[:, 2], x[:, 3]),
                Dc1aState(x[:, 4], x[:, 5], x[:, 6], self.vref))

    def derivatives(self, x, v_terminal):
        m, e = self.unpack(x)
        dm = machine_derivatives(m, e, v_terminal, self.pm, self.params, self.omega_s)
        de = avr_derivatives(e, np.abs(v_terminal), self.exciter)
        return np.column_stack([dm.delta, dm.d_omega, dm.eq_p, dm.ed_p, de.efd, de.vr, de.vf])

    def clamp(self, x):
        x[:, 5] = np.clip(x[:, 5], self.exciter.Vr_min, self.exciter.Vr_max)
        return x

    def norton(self, x):
        m, _ = self.unpack(x)
        return norton_terms(m, self.params)

    def currents(self, x, v_terminal):
        m, _ = self.unpack(x)
        return machine_current_injection(m, v_terminal, self.params)


def load_machine_fixture(fixtures_dir=None) -> dict:
    if fixtures_dir is not None:
        path = Path(fixtures_dir) / "machines_ieee9.json"
        if not path.exists():
            raise FileNotFoundError(f"missing fixture {path}")
        return json.loads(path.read_text())
    return json.loads(resources.files("gridtrip").joinpath("fixtures", "machines_ieee9.json").read_text())


def build_bank(network, V, S, fixtures_dir=None, system_mva: float = 100.0) -> tuple[MachineBank, np.ndarray]:
    """Initialise the machine bank at the power-flow point ``(V, S)``.

    Returns the bank and its initial state matrix.
    """
    d = load_machine_fixture(fixtures_dir)
    buses = np.array([network.index[m["bus"]] for m in d["machines"]])
    params = SyncMachineParams.stack([
        SyncMachineParams(**{k: m[k] for k in ("H", "D", "Xd", "Xq", "Xd_p", "Xq_p", "Td0_p",
                                               "Tq0_p", "base_mva")}).on_base(system_mva)
        for m in d["machines"]])
    exc = Dc1aParams(**d["exciter"])
    m0, e0, pm = init_equilibrium(V[buses], S[buses], params, exc)
    bank = MachineBank(buses, params, exc, pm, e0.vref)
    x0 = np.column_stack([m0.delta, m0.d_omega, m0.eq_p, m0.ed_p, e0.efd, e0.vr, e0.vf])
    return bank, x0
