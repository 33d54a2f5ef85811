import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cn2lab import builtins as bi
from cn2lab.errors import Blowup, NotCN2Point
from cn2lab.splitting import (adapted_frame, classify_matrix, divergence_check, integrate_riccati,
                              riccati_closed_form, riccati_report, splitting_tensor,
                              trace_det_evolution)
from oracles import cone_splitting, riccati_2x2, riccati_trace_det

entries = st.floats(-1.0, 1.0)
matrices = st.lists(entries, min_size=4, max_size=4).map(lambda v: np.array(v).reshape(2, 2))


@settings(max_examples=80, deadline=None)
@given(matrices, st.floats(0.0, 0.4))
def test_closed_form_matches_oracle(C0, t):
    np.testing.assert_allclose(riccati_closed_form(C0, t), riccati_2x2(C0, t), atol=1e-12)
    tr, det = trace_det_evolution(C0, t)
    tr2, det2 = riccati_trace_det(C0, t)
    assert tr == pytest.approx(tr2, abs=1e-12)
    assert det == pytest.approx(det2, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(matrices)
def test_integrator_agrees_with_closed_form(C0):
    ts = np.linspace(0, 0.4, 5)
    for t, C in zip(ts, integrate_riccati(C0, ts)):
        np.testing.assert_allclose(C, riccati_closed_form(C0, t), atol=1e-9)


def test_blowup_reports_singular_time():
    C0 = np.diag([2.0, -1.0])
    with pytest.raises(Blowup) as info:
        riccati_closed_form(C0, 0.5)
    assert info.value.singular_times == pytest.approx((-1.0, 0.5))
    with pytest.raises(Blowup):
        trace_det_evolution(C0, 0.5)


def test_report_marks_blowup_sample():
    rep = riccati_report(np.diag([2.0, 0.0]), [0.0, 0.5, 0.6])
    assert rep["samples"][1] == {"t": 0.5, "blowup": True}
    assert "C" in rep["samples"][2]


@pytest.mark.parametrize("C,kind", [
    (np.zeros((2, 2)), "zero"),
    ([[0.0, 1.0], [0.0, 0.0]], "nilpotent"),
    ([[0.0, -1.0], [1.0, 0.0]], "complex_eigen"),
    ([[1.0, 0.0], [0.0, 2.0]], "real_eigen"),
])
def test_classify_matrix(C, kind):
    assert classify_matrix(C) == kind


def test_nilpotent_is_stationary():
    N = np.array([[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_allclose(riccati_closed_form(N, 3.0), N)


def test_cone_splitting_tensor():
    r0 = 1.3
    f = bi.cone()
    frame = adapted_frame(f, [r0, 1.0, 0.5], orientation_hint=[1.0, 0.0, 0.0])
    C = splitting_tensor(f, [r0, 1.0, 0.5], frame)
    np.testing.assert_allclose(C.C, cone_splitting(r0, 0.0), atol=1e-6)
    assert C.kind == "real_eigen"


def test_divergence_identity_on_cone():
    assert divergence_check(bi.cone(), [1.0, 1.1, 0.3]) < 1e-5


def test_splitting_needs_cn2_point():
    with pytest.raises(NotCN2Point):
        adapted_frame(bi.round_sphere(3), [1.0, 1.0, 1.0])
    with pytest.raises(NotCN2Point):
        adapted_frame(bi.flat(3), [0.0, 0.0, 0.0])
