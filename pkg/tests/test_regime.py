import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cases import floating_case, mixed_case
from floatbound.curves import ModelSpec, ParamCurve, PiecewiseCurve
from floatbound.errors import DomainError
from floatbound.regime import (BAND_BELOW_K, BAND_BELOW_KRQ, BAND_BETWEEN, BAND_EMPTY, classify_point,
                               rate_functions, segment_timeline, switch_times, timeline_csv)

E = ParamCurve.exp_affine
C = ParamCurve.constant


@pytest.mark.parametrize("r, q, expected", [
    (-0.02, -0.05, (2, BAND_BETWEEN)),
    (0.05, 0.02, (1, BAND_BELOW_K)),
    (-0.02, -0.01, (0, BAND_EMPTY)),
    (0.02, 0.05, (1, BAND_BELOW_KRQ)),
    (0.05, -0.02, (1, BAND_BELOW_K)),
    (0.0, -0.01, (1, BAND_BELOW_K)),
    (0.0, 0.01, (0, BAND_EMPTY)),
    (-0.02, 0.03, (0, BAND_EMPTY)),
])
def test_classify_point(r, q, expected):
    assert classify_point(r, q) == expected


def test_classify_rejects_nan():
    with pytest.raises(DomainError):
        classify_point(float("nan"), 0.0)


@given(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
def test_exercise_benefit_sign_agrees_with_classification(r, q):
    """Near maturity exercise happens below K where r K - q x > 0."""
    n, band = classify_point(r, q)
    xs = np.linspace(1e-6, 1.0 - 1e-9, 4001)  # x / K
    positive = r - q * xs > 0.0
    if n == 0:
        assert not positive.any() or positive.mean() < 1e-3
    elif band == BAND_BELOW_K:
        assert positive[:-1].all()
    elif band == BAND_BELOW_KRQ:
        assert np.all(positive == (xs < r / q))
    else:
        assert np.all(positive[xs > r / q * (1 + 1e-9)])
        assert not positive[xs < r / q * (1 - 1e-9)].any()


def model(r, q, sigma=0.3):
    return ModelSpec("gbm", 100.0, 1.0, r=r, q=q, sigma=sigma)


def test_constant_rates_single_segment():
    segs = segment_timeline(model(C(0.05), C(0.02)))
    assert len(segs) == 1
    s = segs[0]
    assert (s.t_start, s.t_end, s.n_boundaries, s.band) == (0.0, 1.0, 1, BAND_BELOW_K)


def test_floating_case_switch():
    segs = segment_timeline(floating_case(0.3))
    tau = math.log(5.0 / 3.0)
    assert [s.n_boundaries for s in segs] == [1, 2]
    assert segs[0].t_end == pytest.approx(tau, abs=1e-12)
    assert segs[0].band == BAND_BELOW_K and segs[1].band == BAND_BETWEEN


def test_mixed_case_switch():
    segs = segment_timeline(mixed_case())
    assert [s.n_boundaries for s in segs] == [2, 1]
    assert segs[0].t_end == pytest.approx(math.log(2.0) / 1.4, abs=1e-12)
    assert segs[0].t_end == pytest.approx(0.495105, abs=1e-6)


def test_tangency_is_not_a_switch():
    # r(t) = 0.05 - 0.1 t + 0.05 t^2 touches zero at t = 1 only; use a
    # piecewise curve that touches zero and turns back inside (0, 1).
    r = PiecewiseCurve((0.0, 0.5, 1.0), (E(0.05, 0.0, -0.1), E(-0.05, 0.0, 0.1)))
    # r = -0.05 on [0, .5) and +0.05 after: one switch at 0.5
    assert switch_times(model(r, C(-0.1))) == pytest.approx([0.5], abs=1e-9)
    touch = PiecewiseCurve((0.0, 0.5, 1.0), (C(0.05), C(0.05)))
    assert switch_times(model(touch, C(0.02))) == []


def test_timeline_csv_round_trip():
    segs = segment_timeline(mixed_case())
    text = timeline_csv(segs)
    lines = text.strip().splitlines()
    assert lines[0] == "t_start,t_end,n_boundaries,band"
    assert len(lines) == 1 + len(segs)
    assert float(lines[1].split(",")[1]) == segs[0].t_end


curve_params = st.tuples(st.floats(-0.2, 0.2), st.floats(-3.0, 3.0), st.floats(-0.2, 0.2))


@given(curve_params, curve_params)
def test_segments_are_sign_homogeneous(rp, qp):
    m = model(E(*rp), E(*qp))
    segs = segment_timeline(m)
    # partition of [t0, T)
    assert segs[0].t_start == m.t0 and segs[-1].t_end == m.T
    for a, b in zip(segs, segs[1:]):
        assert a.t_end == b.t_start
    r, q = rate_functions(m)
    for s in segs:
        assert s.t_start < s.t_end
        width = s.t_end - s.t_start
        ts = np.linspace(s.t_start + 1e-3 * width, s.t_end - 1e-3 * width, 200)
        labels = {classify_point(rv, qv) for rv, qv in zip(r(ts), q(ts))}
        # rates exactly at zero on a whole segment only for degenerate inputs
        assert len(labels) == 1 or np.any(np.isclose(r(ts), 0.0)) or np.any(np.isclose(q(ts), 0.0))
        assert (s.n_boundaries, s.band) in labels


@given(curve_params, curve_params)
def test_switch_set_invariant_under_time_reversal(rp, qp):
    m = model(E(*rp), E(*qp))
    fwd = switch_times(m)
    # the same curves traversed backwards: r~(s) = r(T - s)
    A, B, Cc = rp
    rr = E(A * math.exp(-B * 1.0), -B, Cc)
    A, B, Cc = qp
    qr = E(A * math.exp(-B * 1.0), -B, Cc)
    back = switch_times(model(rr, qr))
    assert sorted(1.0 - t for t in back) == pytest.approx(fwd, abs=1e-9)


def test_ou_effective_rates_feed_timeline():
    m = ModelSpec("ou", 100.0, 1.0, r=C(0.02), sigma=C(20.0), kappa=C(1.0), theta=C(90.0))
    segs = segment_timeline(m)
    # r_bar = 0.92, q_bar = 1.02: one boundary below K r_bar / q_bar
    assert len(segs) == 1 and segs[0].band == BAND_BELOW_KRQ


def test_root_tolerance_must_be_positive():
    with pytest.raises(DomainError):
        switch_times(mixed_case(), root_tol=0.0)
