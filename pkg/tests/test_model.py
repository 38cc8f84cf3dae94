import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiotwin.model import (
    DEFAULT_RANGES,
    FIXED_VALUES,
    LEARNABLE,
    ElastanceSpec,
    LvadParams,
    OmegaSchedule,
    ParameterError,
    PatientParams,
    diode_flows,
    elastance,
    elastance_values,
    initial_state,
    pressure_volume,
    r_k,
    rhs5,
    rhs6,
)

REF_SPEC = ElastanceSpec(2.0, 0.05, 0.8)

specs = st.builds(
    lambda e_min, gap, t_c: (e_min + gap, e_min, t_c),
    st.floats(0.02, 0.1), st.floats(0.01, 3.5), st.floats(0.4, 1.7),
)


# -- elastance ------------------------------------------------------------------

def test_elastance_at_zero_is_e_min():
    assert elastance(REF_SPEC, 0.0) == 0.05


def test_elastance_periodic():
    assert elastance(REF_SPEC, 0.3) == pytest.approx(elastance(REF_SPEC, 0.3 + 0.8), abs=1e-12)


def test_elastance_reference_value():
    # t_max = 0.32, t = 0.224 puts t_n at 0.7, where the rising bracket is 1/2
    assert REF_SPEC.t_max == pytest.approx(0.32)
    assert elastance(REF_SPEC, 0.224) == pytest.approx(1.95 * 1.55 * 0.5 + 0.05, rel=1e-3)
    assert elastance(REF_SPEC, 0.224) == pytest.approx(1.561, abs=1e-3)


def test_t_max_tracks_t_c():
    assert ElastanceSpec(2.0, 0.05, 1.2).t_max == pytest.approx(0.2 + 0.15 * 1.2)


@settings(max_examples=200, deadline=None)
@given(specs, st.floats(0, 50), st.integers(1, 20))
def test_elastance_range_and_periodicity(spec, t, k):
    e_max, e_min, t_c = spec
    e = elastance_values(e_max, e_min, t_c, t)
    assert e_min <= e <= e_max
    assert elastance_values(e_max, e_min, t_c, t + k * t_c) == pytest.approx(e, rel=1e-9, abs=1e-12)


def test_elastance_vectorised_matches_scalar():
    t = np.linspace(0, 3, 101)
    vec = elastance(REF_SPEC, t)
    assert np.allclose(vec, [elastance(REF_SPEC, float(x)) for x in t], rtol=1e-14, atol=0)


# -- parameters ------------------------------------------------------------------

def test_reference_params_fixed_values():
    p = PatientParams.reference()
    for k, v in FIXED_VALUES.items():
        assert getattr(p, k) == v


def test_params_reject_nonpositive_and_ordering():
    with pytest.raises(ParameterError):
        PatientParams.reference(r_m=0.0)
    with pytest.raises(ParameterError):
        PatientParams.reference(c_a=-1.0)
    with pytest.raises(ParameterError):
        PatientParams.reference(e_max=0.05, e_min=0.05)
    with pytest.raises(ParameterError):
        PatientParams.reference(t_c=float("nan"))


def test_start_v_zero_allowed():
    assert PatientParams.reference(start_v=0.0).start_v == 0.0


def test_theta_round_trip():
    p = PatientParams.reference()
    assert PatientParams.from_theta(p.theta()) == p
    assert list(LEARNABLE) == ["r_m", "r_a", "e_max", "e_min", "v_d", "t_c", "start_v"]
    with pytest.raises(ParameterError):
        PatientParams.from_theta([1.0, 2.0])


def test_reference_inside_default_ranges():
    p = PatientParams.reference()
    for k, (lo, hi) in DEFAULT_RANGES.items():
        assert lo <= getattr(p, k) <= hi


def test_params_json_round_trip_and_unknown_keys():
    p = PatientParams.reference(r_m=0.0123456789)
    assert PatientParams.from_json(p.to_json()) == p
    data = json.loads(p.to_json())
    data["bogus"] = 1
    with pytest.raises(ParameterError):
        PatientParams.from_dict(data)
    del data["bogus"], data["r_m"]
    with pytest.raises(ParameterError):
        PatientParams.from_dict(data)


def test_lvad_defaults_and_round_trip():
    lvad = LvadParams().with_omega(OmegaSchedule.ramp(0, 9000, 2.0))
    assert lvad.denominator == pytest.approx(-0.0524)
    assert LvadParams.from_json(lvad.to_json()) == lvad
    with pytest.raises(ParameterError):
        LvadParams(l_i=0.0, l_o=0.0, beta1=0.0)
    data = json.loads(lvad.to_json())
    data["extra"] = 0
    with pytest.raises(ParameterError):
        LvadParams.from_dict(data)


def test_omega_schedule():
    assert OmegaSchedule.constant(5000)(1.23) == 5000
    ramp = OmegaSchedule.ramp(0, 1000, 2.0)
    assert ramp(1.0) == pytest.approx(500)
    assert ramp(10.0) == pytest.approx(1000)
    with pytest.raises(ParameterError):
        OmegaSchedule.constant(-1)
    with pytest.raises(ParameterError):
        OmegaSchedule(kind="sine")


# -- state and right-hand sides ------------------------------------------------------

def test_initial_state_reference():
    p = PatientParams.reference()
    assert np.allclose(initial_state(p), [140, 7.0, 75, 75, 0])
    x6 = initial_state(p, LvadParams())
    assert len(x6) == 6 and x6[5] == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 300), st.floats(0.02, 0.1), st.floats(60, 100))
def test_initial_state_structure(start_v, e_min, pao):
    p = PatientParams.reference(start_v=start_v, e_min=e_min, start_pao=pao)
    x = initial_state(p)
    assert x[4] == 0 and x[2] == x[3]


def test_rhs5_at_initial_state():
    p = PatientParams.reference()
    d = rhs5(0.0, initial_state(p), p)
    assert d[0] == 0.0
    assert d[4] == 0.0
    assert d[1] == pytest.approx((75 - 7) / (1.0 * 4.4), rel=1e-12)
    assert d[1] == pytest.approx(15.4545, abs=1e-4)


def test_r_k_examples():
    lvad = LvadParams()
    spec = REF_SPEC
    e0 = elastance(spec, 0.0)
    assert r_k(0.0, 0.5 / e0, spec, lvad) == pytest.approx(1.75)
    assert r_k(0.0, 1.0 / e0, spec, lvad) == 0.0
    assert r_k(0.0, 10.0 / e0, spec, lvad) == 0.0


def test_rhs6_reduces_to_rhs5_at_zero_omega():
    p = PatientParams.reference()
    lvad = LvadParams()
    y = initial_state(p, lvad)
    d6 = rhs6(0.0, y, p, lvad)
    assert np.allclose(d6[:5], rhs5(0.0, y[:5], p), rtol=0, atol=0)
    assert d6[5] == pytest.approx((-7 + 75) / -0.0524, rel=1e-12)
    assert d6[5] == pytest.approx(-1297.7, abs=0.1)


def test_rhs6_row6_zero_when_pressures_balance():
    p = PatientParams.reference()
    lvad = LvadParams()
    t = 0.2
    e_t = elastance(p.elastance_spec(), t)
    y = np.array([100.0, 10.0, 80.0, 100.0 * e_t, 0.0, 0.0])
    assert rhs6(t, y, p, lvad)[5] == pytest.approx(0.0, abs=1e-12)


states5 = st.lists(st.floats(-50, 300), min_size=5, max_size=5)


@settings(max_examples=200, deadline=None)
@given(states5, st.floats(-40, 40), st.floats(0, 3))
def test_flow_balance_and_diodes(x, x6, t):
    p = PatientParams.reference()
    lvad = LvadParams().with_omega(8000)
    x = np.array(x)
    e_t = elastance(p.elastance_spec(), t)
    p1, p2 = diode_flows(x, e_t, p.r_m, p.r_a)
    assert p1 >= 0 and p2 >= 0
    assert rhs5(t, x, p)[0] == pytest.approx(p1 - p2, rel=1e-12, abs=1e-9)
    y = np.append(x, x6)
    assert rhs6(t, y, p, lvad)[0] == pytest.approx(p1 - p2 - x6, rel=1e-12, abs=1e-9)


def test_rhs_lipschitz_on_bounded_box(rng):
    p = PatientParams.reference()
    lvad = LvadParams().with_omega(10000)
    lo = np.array([0, 0, 40, 40, -200, -200])
    hi = np.array([250, 40, 140, 140, 600, 600])
    worst5 = worst6 = 0.0
    for _ in range(2000):
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        t = rng.uniform(0, 2)
        d = np.linalg.norm(a - b)
        worst5 = max(worst5, np.linalg.norm(rhs5(t, a[:5], p) - rhs5(t, b[:5], p)) / np.linalg.norm(a[:5] - b[:5]))
        worst6 = max(worst6, np.linalg.norm(rhs6(t, a, p, lvad) - rhs6(t, b, p, lvad)) / d)
    assert math.isfinite(worst5) and math.isfinite(worst6)
    # bounded by the stiffest coupling (aortic valve into the small compliance)
    assert worst5 < 1e5 and worst6 < 1e5


def test_rhs_broadcasts_over_cohort():
    from cardiotwin.model import stack_params

    ps = [PatientParams.reference(), PatientParams.reference(r_m=0.01, t_c=1.0)]
    x = np.stack([initial_state(q) for q in ps])
    out = rhs5(0.1, x, stack_params(ps))
    for i, q in enumerate(ps):
        assert np.allclose(out[i], rhs5(0.1, x[i], q), rtol=1e-14)


def test_rhs_wrong_dimension():
    p = PatientParams.reference()
    with pytest.raises(ValueError):
        rhs5(0.0, np.zeros(6), p)
    with pytest.raises(ValueError):
        rhs6(0.0, np.zeros(5), p, LvadParams())


# -- pressure/volume ----------------------------------------------------------------

def test_pressure_volume_examples():
    p = PatientParams.reference()
    assert pressure_volume([130, 0, 0, 0, 0], 0.0, p)[1] == 140
    assert pressure_volume([140, 0, 0, 0, 0], 0.0, p)[0] == pytest.approx(140 * 0.05)
    e_224 = elastance(p.elastance_spec(), 0.224)
    pres, _ = pressure_volume([100, 0, 0, 0, 0], 0.224, p)
    assert pres == pytest.approx(100 * e_224)
    assert pres == pytest.approx(156.1, abs=0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(3, 25), st.floats(0.1, 10))
def test_v_d_shift_changes_only_volume(v_d, delta):
    p = PatientParams.reference(v_d=v_d)
    q = p.replace(v_d=v_d + delta)
    xs = np.column_stack([np.linspace(50, 150, 7), np.zeros((7, 4))])
    t = np.linspace(0, 0.8, 7)
    pp, vp = pressure_volume(xs, t, p)
    pq, vq = pressure_volume(xs, t, q)
    assert np.array_equal(pp, pq)
    assert np.allclose(vq - vp, delta, rtol=0, atol=1e-12)
