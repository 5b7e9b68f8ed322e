import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtrip.machines import (
    OMEGA_S,
    Dc1aParams,
    Dc1aState,
    MachineBank,
    SyncMachineParams,
    SyncMachineState,
    avr_derivatives,
    build_bank,
    dq_voltage,
    electrical_power,
    init_equilibrium,
    machine_current_injection,
    machine_derivatives,
    stator_currents,
)
from gridtrip.network import PhasorNetwork, load_ieee9, solve_power_flow
from gridtrip.scenarios import ScenarioSpec, simulate_scenario

GEN = SyncMachineParams(H=6.4, D=2.0, Xd=0.8958, Xq=0.8645, Xd_p=0.1198, Xq_p=0.1969,
                        Td0_p=6.0, Tq0_p=0.535)
EXC = Dc1aParams()


@pytest.fixture(scope="module")
def ieee9_point():
    buses, branches, raw = load_ieee9()
    net = PhasorNetwork(buses, branches)
    s = np.zeros(net.n, dtype=complex)
    v_set = {}
    for b in raw["buses"]:
        k = net.index[b["id"]]
        s[k] = b.get("p_gen", 0.0) - b.get("p_load", 0.0) - 1j * b.get("q_load", 0.0)
        if "v_set" in b:
            v_set[k] = b["v_set"]
    pf = solve_power_flow(net, s, v_set)
    return net, pf


def equilibrium(v=1.02 * np.exp(0.1j), s=0.8 + 0.2j):
    return init_equilibrium(v, s, GEN, EXC)


def test_equilibrium_derivatives_vanish():
    m, e, pm = equilibrium()
    v = 1.02 * np.exp(0.1j)
    dm = machine_derivatives(m, e, v, pm, GEN)
    de = avr_derivatives(e, abs(v), EXC)
    for d in (dm.delta, dm.d_omega, dm.eq_p, dm.ed_p, de.efd, de.vr, de.vf):
        assert abs(d) <= 1e-10


def test_bank_equilibrium_on_ieee9(ieee9_point):
    net, pf = ieee9_point
    bank, x0 = build_bank(net, pf.V, pf.S)
    assert np.max(np.abs(bank.derivatives(x0, pf.V[bank.buses]))) <= 1e-9
    S = pf.V[bank.buses] * np.conj(bank.currents(x0, pf.V[bank.buses]))
    assert np.max(np.abs(S - pf.S[bank.buses])) <= 1e-6


def test_speed_deviation_drives_angle():
    m, e, pm = equilibrium()
    m = SyncMachineState(m.delta, 0.01, m.eq_p, m.ed_p)
    d = machine_derivatives(m, e, 1.02 * np.exp(0.1j), pm, GEN)
    assert d.delta == pytest.approx(0.01 * OMEGA_S)


def test_mechanical_step_accelerates():
    m, e, pm = equilibrium()
    d = machine_derivatives(m, e, 1.02 * np.exp(0.1j), pm + 0.1, GEN)
    assert d.d_omega == pytest.approx(0.1 / (2 * GEN.H), abs=1e-10)


def test_avr_settled_at_reference():
    e = Dc1aState(efd=1.5, vr=1.5, vf=0.0, vref=1.0 + 1.5 / EXC.Ka)
    d = avr_derivatives(e, 1.0, EXC)
    assert max(abs(d.efd), abs(d.vr), abs(d.vf)) <= 1e-12


def test_avr_regulator_lag():
    e = Dc1aState(efd=1.0, vr=1.0, vf=0.0, vref=1.0)
    d = avr_derivatives(e, 0.95, EXC)
    assert d.vr == pytest.approx((EXC.Ka * 0.05 - 1.0) / EXC.Ta)


def test_avr_anti_windup():
    e = Dc1aState(efd=1.0, vr=EXC.Vr_max, vf=0.0, vref=1.0)
    assert avr_derivatives(e, 0.5, EXC).vr == 0.0
    e = Dc1aState(efd=1.0, vr=EXC.Vr_min, vf=0.0, vref=1.0)
    assert avr_derivatives(e, 1.5, EXC).vr == 0.0
    # inward motion is still allowed
    assert avr_derivatives(e, 0.9, EXC).vr > 0


def test_no_emf_difference_gives_zero_current():
    v = 1.03 * np.exp(0.4j)
    m = SyncMachineState(delta=0.4, d_omega=0.0, eq_p=1.03, ed_p=0.0)
    assert abs(machine_current_injection(m, v, GEN)) <= 1e-14


def test_frame_rotation():
    m, _, _ = equilibrium()
    v = 1.02 * np.exp(0.1j)
    i0 = machine_current_injection(m, v, GEN)
    m90 = SyncMachineState(m.delta + np.pi / 2, 0.0, m.eq_p, m.ed_p)
    i90 = machine_current_injection(m90, v * 1j, GEN)
    assert i90 == pytest.approx(i0 * 1j, abs=1e-12)


def test_unloaded_machine_has_no_mechanical_power():
    _, _, pm = equilibrium(s=0j)
    assert pm == pytest.approx(0.0, abs=1e-14)


def test_efd_outside_limits_rejected():
    with pytest.raises(ValueError):
        init_equilibrium(1.0, 0.5 + 3.0j, GEN, Dc1aParams(Vr_max=1.0))


@pytest.mark.parametrize("kw", [dict(H=0), dict(Xd_p=1.0), dict(Xq_p=0.0), dict(Td0_p=0.0)])
def test_invalid_params(kw):
    base = dict(H=6.4, D=2.0, Xd=0.8958, Xq=0.8645, Xd_p=0.1198, Xq_p=0.1969, Td0_p=6.0, Tq0_p=0.535)
    with pytest.raises(ValueError):
        SyncMachineParams(**{**base, **kw})


def test_on_base_round_trip():
    p = GEN.on_base(247.5).on_base(100.0)
    assert p.Xd == pytest.approx(GEN.Xd) and p.H == pytest.approx(GEN.H)


def dpe_ddelta(m, v, p):
    """Hand-differentiated Pe(delta) for fixed terminal voltage and EMFs."""
    vd, vq = dq_voltage(v, m.delta)
    i_d, i_q = (m.eq_p - vq) / p.Xd_p, (vd - m.ed_p) / p.Xq_p
    did, diq = vd / p.Xd_p, vq / p.Xq_p
    return m.ed_p * did + m.eq_p * diq + (p.Xq_p - p.Xd_p) * (did * i_q + i_d * diq)


@settings(max_examples=100, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(0.8, 1.2), st.floats(0.6, 1.4), st.floats(-0.5, 0.5))
def test_pe_finite_difference(delta, vm, eq, ed):
    v = vm * np.exp(0.2j)
    m = SyncMachineState(delta, 0.0, eq, ed)

    def pe(d):
        s = SyncMachineState(d, 0.0, eq, ed)
        return electrical_power(s, *stator_currents(s, v, GEN), GEN)

    h = 1e-6
    fd = (pe(delta + h) - pe(delta - h)) / (2 * h)
    exact = dpe_ddelta(m, v, GEN)
    assert fd == pytest.approx(exact, rel=1e-6, abs=1e-6)


def test_regulator_stays_within_limits_in_deep_dip():
    m, e, pm = equilibrium()
    params = SyncMachineParams.stack([GEN])
    bank = MachineBank(np.array([0]), params, EXC, np.atleast_1d(pm), np.atleast_1d(e.vref))
    x = np.array([[m.delta, 0.0, m.eq_p, m.ed_p, e.efd, e.vr, e.vf]])
    v = np.array([0.3 * np.exp(0.1j)])
    hit = False
    for _ in range(2000):
        x = bank.clamp(x + 1e-3 * bank.derivatives(x, v))
        assert EXC.Vr_min <= x[0, 5] <= EXC.Vr_max
        hit |= x[0, 5] == EXC.Vr_max
    assert hit


def test_one_second_drift():
    tr = simulate_scenario(ScenarioSpec(None, "under", horizon=1.0, n_dg=1), record_buses=True)
    assert np.max(np.abs(tr.bus_vm - tr.bus_vm[0])) <= 1e-6
