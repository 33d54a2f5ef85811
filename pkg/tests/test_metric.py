import numpy as np
import pytest

from cn2lab import builtins as bi
from cn2lab.errors import BadParams, NotPositiveDefinite, OutOfDomain, SupportViolation
from cn2lab.exprfield import parse
from cn2lab.metric import (ChartSpec, MetricField, canonicalize, fd_jet, make_block, metric_at,
                           metric_jet)


def test_every_example_atlas_validates():
    for atlas in (bi.ex1(), bi.ex2(), bi.ex3(3), bi.ex4()):
        atlas.validate()


def test_canonicalize_crosses_into_neighbour():
    # the x-faces of block 0 meet block 1 with a quarter turn in the (y, z) plane
    b, x, v = canonicalize(bi.ex1(), (0, [1.1, 0.2, -0.3]), [0.0, 0.0, 1.0])
    assert b == 1
    np.testing.assert_allclose(x, [-0.9, 0.3, 0.2], atol=1e-12)
    np.testing.assert_allclose(v, [0.0, -1.0, 0.0], atol=1e-12)


def test_canonicalize_is_idempotent():
    atlas = bi.ex1()
    rng = np.random.default_rng(3)
    for _ in range(50):
        b = int(rng.integers(len(atlas.blocks)))
        chart = atlas.blocks[b].chart
        x = rng.uniform(chart.lo_array, chart.hi_array)
        a = int(rng.integers(3))
        x[a] = (chart.hi[a] if rng.random() < 0.5 else chart.lo[a]) + rng.normal(scale=0.05)
        once = canonicalize(atlas, (b, x))
        twice = canonicalize(atlas, once)
        assert once[0] == twice[0]
        np.testing.assert_allclose(once[1], twice[1], atol=1e-12)


def test_canonicalize_is_identity_inside():
    b, x = canonicalize(bi.ex1(), (0, [0.2, 0.1, -0.3]))
    assert b == 0
    np.testing.assert_allclose(x, [0.2, 0.1, -0.3])


def test_support_violation_in_collar():
    with pytest.raises(SupportViolation):
        make_block([1.0, 1.0, 1.0], "0.1*x", 0.2)


def test_bad_margin():
    with pytest.raises(BadParams):
        make_block([1.0, 1.0, 1.0], "0", 1.5)


def test_bumped_block_is_flat_in_collar():
    blk = make_block([1.0, 1.0, 1.0], "0.1*bump(x/0.5)*bump(y/0.5)", 0.3)
    np.testing.assert_allclose(metric_at(blk.field, [0.9, 0.0, 0.0]), np.eye(3))


def test_analytic_jet_matches_finite_differences():
    f = bi.cone()
    pts = np.array([[1.0, 1.2, 0.4], [2.0, 0.7, 3.0]])
    g, dg, ddg = f.jet(pts)
    g2, dg2, ddg2 = fd_jet(f, pts)
    np.testing.assert_allclose(g, g2, atol=1e-12)
    np.testing.assert_allclose(dg, dg2, atol=1e-7)
    np.testing.assert_allclose(ddg, ddg2, atol=1e-5)


def test_metric_jet_shapes():
    g, dg, ddg = metric_jet(bi.sphere_product(), [1.0, 0.5, 0.5])
    assert g.shape == (3, 3) and dg.shape == (3, 3, 3) and ddg.shape == (3, 3, 3, 3)


def test_not_positive_definite():
    chart = ChartSpec(("x", "y"), (-1.0, -1.0), (1.0, 1.0))
    f = MetricField.from_entries(chart, {(0, 0): parse("x", chart.coords)})
    with pytest.raises(NotPositiveDefinite):
        metric_at(f, [-0.5, 0.0])


def test_out_of_domain():
    with pytest.raises(OutOfDomain):
        metric_at(bi.cone(), [10.0, 1.0, 1.0])
