import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cn2lab.exprfield import (BinOp, Call, Const, DomainError, ExprSyntaxError, Neg, Pow,
                              UnknownIdentifier, Var, bump, differentiate, eval_jet2, evaluate,
                              parse, to_source)

COORDS = ("x", "y", "z")

leaves = st.one_of(
    st.floats(0.0, 5.0, allow_nan=False).map(Const),
    st.sampled_from([Var(c, i) for i, c in enumerate(COORDS)]),
)


def _extend(children):
    return st.one_of(
        st.builds(BinOp, st.sampled_from("+-*"), children, children),
        children.map(Neg),
        st.builds(Pow, children, st.integers(0, 3)),
        st.builds(Call, st.sampled_from(["sin", "cos", "tanh"]), children),
    )


exprs = st.recursive(leaves, _extend, max_leaves=8)
points = st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3)


@given(exprs)
def test_print_parse_round_trip(e):
    assert parse(to_source(e), COORDS) == e


@settings(max_examples=60, deadline=None)
@given(exprs, points)
def test_ad_matches_central_differences(e, p):
    p = np.array(p)
    jet = eval_jet2(e, p)
    h = 1e-5
    scale = 1.0 + abs(float(jet.value))
    for i in range(3):
        d = np.zeros(3)
        d[i] = h
        fd = (evaluate(e, p + d) - evaluate(e, p - d)) / (2 * h)
        assert abs(jet.gradient[i] - fd) <= 1e-5 * (scale + np.abs(jet.gradient).max())


@settings(max_examples=40, deadline=None)
@given(exprs, points)
def test_symbolic_derivative_agrees_with_ad(e, p):
    p = np.array(p)
    jet = eval_jet2(e, p)
    for i in range(3):
        assert evaluate(differentiate(e, i), p) == pytest.approx(jet.gradient[i], rel=1e-9, abs=1e-9)


def test_hessian_of_product():
    jet = eval_jet2(parse("x^2*y + sin(z)", COORDS), [1.0, 2.0, 0.5])
    assert jet.value == pytest.approx(2 + math.sin(0.5))
    np.testing.assert_allclose(jet.gradient, [4.0, 1.0, math.cos(0.5)])
    np.testing.assert_allclose(jet.hessian, [[4, 2, 0], [2, 0, 0], [0, 0, -math.sin(0.5)]])


def test_vectorised_evaluation():
    e = parse("exp(x) - y/2", COORDS)
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])
    np.testing.assert_allclose(evaluate(e, pts), [1.0, math.e - 1.0])


def test_bump_support_and_centre():
    assert bump(0.0) == pytest.approx(1.0)
    assert bump(1.0) == 0.0
    assert bump(-1.5) == 0.0
    jet = eval_jet2(parse("bump(x)", COORDS), [0.99, 0.0, 0.0])
    assert jet.value > 0


def test_pi_constant():
    assert evaluate(parse("2*pi", COORDS), [0, 0, 0]) == pytest.approx(2 * math.pi)


def test_syntax_error_offset():
    with pytest.raises(ExprSyntaxError) as info:
        parse("x + * y", COORDS)
    assert info.value.offset == 5


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifier) as info:
        parse("x + w", COORDS)
    assert info.value.name == "w"


def test_domain_error():
    with pytest.raises(DomainError):
        evaluate(parse("log(x)", COORDS), [-1.0, 0.0, 0.0])
