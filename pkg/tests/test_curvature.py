import math

import numpy as np
import pytest

from cn2lab import builtins as bi
from cn2lab.curvature import (PointClass, classify, curvature_batch, nullity, principal_angles,
                              riemann_scal, subspace_angle, symmetry_residual)
from oracles import SPHERE_PRODUCT_SCAL, cone_scal


def test_flat_space_has_zero_tensor():
    rep = riemann_scal(bi.flat(3), [0.1, 0.2, 0.3])
    assert rep.norm == 0.0
    assert classify(bi.flat(3), [0.1, 0.2, 0.3]) is PointClass.FLAT


@pytest.mark.parametrize("space,point", [
    (bi.cone(), [1.3, 1.0, 2.0]),
    (bi.round_sphere(3), [1.0, 1.2, 0.7]),
    (bi.hypersurface_graph("x^2/2 + y^2/4"), [0.3, -0.2, 0.1]),
])
def test_algebraic_symmetries(space, point):
    assert symmetry_residual(riemann_scal(space, point).riemann_lowered) < 1e-10


def test_round_sphere_constant_curvature():
    # K = 1 in dimension 3: Ric = 2 g and scal = 6
    rep = riemann_scal(bi.round_sphere(3), [1.0, 1.2, 0.7])
    g = bi.round_sphere(3).values(np.array([1.0, 1.2, 0.7]))
    np.testing.assert_allclose(rep.ricci, 2 * g, atol=1e-9)
    assert rep.scal == pytest.approx(6.0)
    assert rep.nullity_dim == 0
    assert classify(bi.round_sphere(3), [1.0, 1.2, 0.7]) is PointClass.NOT_CN2


def test_sphere_product_nullity_is_line_axis():
    mu, null, conull, _ = nullity(bi.sphere_product(), [1.1, 0.4, 0.2])
    assert mu == 1
    assert subspace_angle(null, [[0.0, 0.0, 1.0]]) < 1e-8
    assert conull.shape == (2, 3)
    assert riemann_scal(bi.sphere_product(), [1.1, 0.4, 0.2]).scal == pytest.approx(SPHERE_PRODUCT_SCAL)


def test_cone_scal_across_radii():
    c = 1 / math.sqrt(2)
    for r in (0.7, 1.0, 2.5):
        assert riemann_scal(bi.cone(c), [r, 1.0, 0.5]).scal == pytest.approx(cone_scal(c, r), rel=1e-8)


def test_batch_matches_pointwise():
    f = bi.cone()
    pts = np.array([[1.0, 1.2, 0.4], [2.0, 0.9, 1.0]])
    cb = curvature_batch(f, pts)
    for i, p in enumerate(pts):
        assert cb.scal[i] == pytest.approx(riemann_scal(f, p).scal)


def test_principal_angles_known_pair():
    A = [[1.0, 0, 0], [0, 1.0, 0]]
    th = 0.3
    B = [[1.0, 0, 0], [0, math.cos(th), math.sin(th)]]
    np.testing.assert_allclose(principal_angles(A, B), [0.0, th], atol=1e-12)


def test_principal_angles_tiny_angle_resolved():
    th = 1e-9
    ang = principal_angles([[1.0, 0.0]], [[math.cos(th), math.sin(th)]])
    assert ang[0] == pytest.approx(th, rel=1e-6)


def test_principal_angles_weighted():
    g = np.diag([4.0, 1.0])
    # e1 and e1+2e2 are at 45 degrees when |e1| = 2
    assert subspace_angle([[1.0, 0.0]], [[1.0, 2.0]], g) == pytest.approx(math.pi / 4)


def test_report_json_round_trip():
    import json
    d = json.loads(riemann_scal(bi.cone(), [1.0, 1.0, 1.0]).to_json())
    assert d["nullity_dim"] == 1
    assert len(d["riemann_lowered"]) == 3
