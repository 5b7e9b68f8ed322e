import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtrip.trip_models import (
    CODES,
    SHARES,
    CompositeModel,
    DerAParams,
    DerAState,
    PiParams,
    PiState,
    composite_predict,
    dera_simulate,
    dera_step,
    load_params,
    make_default_models,
    model_from_records,
    params_record,
    pi_decision_names,
    pi_simulate,
    pi_step,
    save_params,
)

from oracles import pi_reference_over, pi_reference_under

HAND = PiParams("under", v0_p=0.0, v1_p=0.5, v0_i=0.8, v1_i=0.9, t_deact=1.0, trv=0.0)


def run_steps(params, state, v, n, dt):
    out = None
    for _ in range(n):
        out, state = pi_step(params, state, v, dt)
    return out, state


def test_nominal_voltage_keeps_everything_active():
    p = PiParams("under", 0.2, 0.6, 0.7, 0.9, 0.5)
    out = pi_simulate(p, np.ones(2000), 1e-3)
    assert np.all(out == 1.0)


def test_hand_example_deactivation():
    out, st = run_steps(HAND, PiState(), 0.85, 500, 1e-3)
    assert st.p_del == pytest.approx(0.25, abs=1e-9)
    assert out == pytest.approx(0.75, abs=1e-9)


def test_hand_example_reactivation():
    p = PiParams("under", 0.0, 0.5, 0.8, 0.9, 1.0, v0_rec=0.85, t_rec=1.0, trv=0.0,
                 reactivation=True)
    _, st = run_steps(p, PiState(), 0.85, 500, 1e-3)
    out, st = run_steps(p, st, 1.0, 100, 1e-3)
    assert st.p_rec == pytest.approx(0.1, abs=1e-9)
    assert out == pytest.approx(0.85, abs=1e-9)


def test_sustained_dip_saturates_integrator():
    v = np.full(3000, 0.7)
    out = pi_simulate(HAND, v, 1e-3)
    assert out[-1] == pytest.approx(0.0, abs=1e-12)


def test_substep_consistency():
    p = PiParams("under", 0.3, 0.6, 0.75, 0.9, 0.4, trv=0.02)
    v = np.r_[np.ones(100), np.full(400, 0.78), np.full(500, 0.95)]
    coarse = pi_simulate(p, v, 1e-3)
    fine = pi_simulate(p, np.repeat(v, 10), 1e-4)[9::10]
    assert np.max(np.abs(coarse - fine)) < 0.02


def test_over_side_mirrors_under_side():
    under = PiParams("under", 0.6, 0.8, 0.85, 0.95, 0.5)
    over = PiParams("over", 1.4, 1.2, 1.15, 1.05, 0.5)
    rng = np.random.default_rng(3)
    v = 1.0 + np.repeat(rng.uniform(-0.4, 0.0, 20), 50)
    assert np.allclose(pi_simulate(under, v, 1e-3), pi_simulate(over, 2.0 - v, 1e-3), atol=1e-12)


@pytest.mark.parametrize("side", ["under", "over"])
def test_matches_scalar_reference(side):
    rng = np.random.default_rng(11)
    for _ in range(50):
        if side == "under":
            a, b, c, d = np.sort(rng.uniform(0.0, 1.0, 4))
            p = PiParams("under", a, c, b, d, rng.uniform(0.01, 1), v0_rec=rng.uniform(0.5, 1),
                         t_rec=rng.uniform(0.01, 1), trv=0.02, reactivation=True)
            ref_p = dict(v_l0_p=a, v_l1_p=c, v_l0_i=b, v_l1_i=d, T_del=p.t_deact,
                         v_l0_rec=p.v0_rec, T_rec=p.t_rec)
            ref = pi_reference_under
            v = 1.0 - np.repeat(rng.uniform(0, 0.8, 10), 30) * rng.integers(0, 2, 300)
        else:
            a, b, c, d = np.sort(rng.uniform(1.0, 1.4, 4))
            p = PiParams("over", d, b, c, a, rng.uniform(0.01, 1), v0_rec=rng.uniform(1, 1.4),
                         t_rec=rng.uniform(0.01, 1), trv=0.02, reactivation=True)
            ref_p = dict(v_h0_p=d, v_h1_p=b, v_h0_i=c, v_h1_i=a, T_del=p.t_deact,
                         v_h0_rec=p.v0_rec, T_rec=p.t_rec)
            ref = pi_reference_over
            v = 1.0 + np.repeat(rng.uniform(0, 0.4, 10), 30)
        expected, _ = ref(ref_p, v, 1e-3, 0.02)
        assert np.max(np.abs(pi_simulate(p, v, 1e-3) - expected)) <= 1e-12


def test_decision_vector_round_trip():
    for side, p in (("under", PiParams("under", 0.1, 0.5, 0.7, 0.8, 0.3, 0.75, 0.5, reactivation=True)),
                    ("over", PiParams("over", 1.3, 1.15, 1.2, 1.05, 0.3, 1.19, 0.5, reactivation=True))):
        x = p.decision_vector()
        assert x[0] < x[1] and x[2] < x[3]
        assert PiParams.from_decision_vector(x, side, True) == p
    assert len(pi_decision_names("under", True)) == 7
    assert len(pi_decision_names("under", False)) == 5


@pytest.mark.parametrize("kwargs", [
    dict(side="under", v0_p=0.5, v1_p=0.4, v0_i=0.7, v1_i=0.8, t_deact=1.0),
    dict(side="under", v0_p=0.1, v1_p=0.4, v0_i=0.8, v1_i=0.8, t_deact=1.0),
    dict(side="over", v0_p=1.1, v1_p=1.2, v0_i=1.2, v1_i=1.1, t_deact=1.0),
    dict(side="under", v0_p=0.1, v1_p=0.4, v0_i=0.7, v1_i=0.8, t_deact=0.0),
    dict(side="sideways", v0_p=0.1, v1_p=0.4, v0_i=0.7, v1_i=0.8, t_deact=1.0),
])
def test_invalid_pi_params_rejected(kwargs):
    with pytest.raises(ValueError):
        PiParams(**kwargs)


def test_pi_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        pi_step(HAND, PiState(), 1.0, 0.0)


# -- DER_A --------------------------------------------------------------------

DERA = make_default_models()["DER_A"].blocks["INV2005"]


def test_dera_nominal():
    assert np.all(dera_simulate(DERA, np.ones(1000), 1e-3) == 1.0)


def test_dera_hand_examples():
    v = np.r_[np.full(300, 0.465), np.ones(300)]
    out = dera_simulate(DERA, v, 1e-3)
    assert out[299] == pytest.approx(0.5, abs=1e-4)
    assert out[-1] == pytest.approx(0.675, abs=1e-4)


def test_dera_short_dip_does_not_latch():
    v = np.r_[np.full(100, 0.3), np.ones(500)]  # 0.1 s < 0.16 s dwell timers
    out = dera_simulate(DERA, v, 1e-3)
    assert np.all(out == 1.0)


def test_dera_step_matches_simulate():
    v = np.r_[np.full(250, 0.46), np.full(250, 1.17), np.ones(100)]
    ref = dera_simulate(DERA, v, 1e-3)
    st, outs = DerAState(), []
    for x in v:
        o, st = dera_step(DERA, st, x, 1e-3)
        outs.append(o)
    assert np.array_equal(np.array(outs), ref)


def test_dera_sides_multiply():
    p = DerAParams(0.44, 0.49, 1.15, 1.2, 0.0, 0.0, 0.0, 0.0, 0.35, trv=0.0)
    v = np.r_[np.full(10, 0.465), np.full(10, 1.175)]
    out = dera_simulate(p, v, 1e-3)
    # under latched at 0.5 then recovers 0.35 of the way; over latched at 0.5
    assert out[-1] == pytest.approx((0.5 + 0.35 * 0.5) * 0.5)


def test_dera_invalid_ordering():
    with pytest.raises(ValueError):
        DerAParams(0.5, 0.4, 1.1, 1.2, 0.1, 0.1, 0.1, 0.1, 0.5)


# -- composite and defaults ------------------------------------------------------


def test_default_tables():
    m = make_default_models()
    assert (m["DER_A"].blocks["INV2015"].v_l0, m["DER_A"].blocks["INV2015"].v_l1) == (0.44, 0.49)
    assert m["DERAEMO1"].blocks["INV2020"].v_h0 == 1.21
    assert m["DERAEMO1"].blocks["INV2020"].v_r_frac == 1.0
    assert m["DERAEMO1"].blocks["INV2005"].t_vl0 == 1.58


def test_composite_weighting():
    rng = np.random.default_rng(0)
    v = 1.0 - np.repeat(rng.uniform(0, 0.6, 5), 200)
    per, w = composite_predict(make_default_models()["DERAEMO1"], v, 1e-3)
    assert np.allclose(w, sum(SHARES[c] * per[c] for c in CODES), atol=1e-15)


def test_composite_product_with_identity_side():
    under = PiParams("under", 0.0, 0.5, 0.8, 0.9, 1.0, trv=0.0)
    m = CompositeModel("x", "pi", {c: {"under": under} for c in CODES})
    v = np.full(200, 0.85)
    per, w = composite_predict(m, v, 1e-3)
    assert np.array_equal(per["INV2005"], pi_simulate(under, v, 1e-3))
    m2 = CompositeModel("x", "pi", {c: {"under": under, "over": PiParams("over", 1.3, 1.2, 1.2, 1.1, 1.0)}
                                    for c in CODES})
    assert np.array_equal(composite_predict(m2, v, 1e-3)[1], w)


def test_composite_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        CompositeModel("x", "dera", {}, {"INV2005": 0.5})


def test_parameter_files_round_trip(tmp_path):
    pi = PiParams("over", 1.3, 1.15, 1.2, 1.05, 0.3, 1.19, 0.5, reactivation=True)
    save_params(tmp_path / "p.json", "pi", "INV2020", "over", pi, objective=1.5)
    rec, back = load_params(tmp_path / "p.json")
    assert back == pi and rec["objective"] == 1.5
    dera = make_default_models()["DERAEMO1"].blocks["INV2015"]
    rec = json.loads(json.dumps(params_record("dera", "INV2015", "both", dera)))
    m = model_from_records("m", [dict(rec, code=c) for c in CODES])
    assert m.blocks["INV2015"] == dera


# -- properties ----------------------------------------------------------------------

voltages = st.lists(st.floats(0.0, 1.5, allow_nan=False), min_size=1, max_size=200)


@st.composite
def under_params(draw):
    a = draw(st.floats(0.0, 0.3))
    b, c, d = np.cumsum([a] + [draw(st.floats(0.02, 0.23)) for _ in range(3)])[1:]
    return PiParams("under", a, c, b, d, draw(st.floats(0.01, 10)),
                    v0_rec=draw(st.floats(0.0, 1.0)), t_rec=draw(st.floats(0.01, 10)),
                    trv=draw(st.sampled_from([0.0, 0.02])), reactivation=draw(st.booleans()))


@settings(max_examples=200, deadline=None)
@given(under_params(), voltages, st.sampled_from([5e-5, 1e-3, 1e-2]))
def test_pi_output_and_integrators_bounded(p, v, dt):
    st_ = PiState()
    for x in v:
        out, st_ = pi_step(p, st_, x, dt)
        assert 0.0 <= out <= 1.0
        assert 0.0 <= st_.p_del <= 1.0 and 0.0 <= st_.p_rec <= 1.0


@settings(max_examples=200, deadline=None)
@given(under_params(), voltages)
def test_running_minimum_monotone(p, v):
    st_, prev = PiState(), 1.0
    for x in v:
        _, st_ = pi_step(p, st_, x, 1e-3)
        assert st_.v_extreme <= prev
        prev = st_.v_extreme


@settings(max_examples=100, deadline=None)
@given(under_params(), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=100))
def test_non_increasing_without_reactivation(p, v):
    p = PiParams("under", p.v0_p, p.v1_p, p.v0_i, p.v1_i, p.t_deact, trv=0.0)
    v = np.minimum(np.asarray(v), p.v1_i - 1e-9)
    out = pi_simulate(p, v, 1e-3)
    assert np.all(np.diff(out) <= 1e-15)


@settings(max_examples=100, deadline=None)
@given(under_params(), voltages, st.floats(-0.3, 0.3))
def test_shift_invariance(p, v, shift):
    shifted = PiParams("under", p.v0_p + shift, p.v1_p + shift, p.v0_i + shift, p.v1_i + shift,
                       p.t_deact, trv=0.0)
    base = PiParams("under", p.v0_p, p.v1_p, p.v0_i, p.v1_i, p.t_deact, trv=0.0)
    v = np.minimum(np.asarray(v), 1.0)
    a = pi_simulate(base, v, 1e-3)
    b = pi_simulate(shifted, v + shift, 1e-3, state0=PiState(v_extreme=1.0 + shift, v_filt=1.0 + shift))
    assert np.allclose(a, b, atol=1e-9)
