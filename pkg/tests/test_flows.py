import math

import numpy as np
import pytest

from cn2lab import builtins as bi
from cn2lab.errors import BadParams, LeftDomain
from cn2lab.flows import (PlaneSection, holonomy_bound_check, integrate_geodesic, jacobi_check,
                          parallel_transport, transport_plane)
from oracles import band_holonomy, cone_jacobi_deviation


def test_great_circle_closes():
    s = bi.round_sphere(2, theta_margin=0.05)
    path = integrate_geodesic(s, [math.pi / 2, 0.0], [0.0, 1.0], 2 * math.pi)
    _, x, v = path.end
    assert x[0] == pytest.approx(math.pi / 2, abs=1e-8)
    assert math.remainder(x[1], 2 * math.pi) == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(v, [0.0, 1.0], atol=1e-8)


def test_geodesic_speed_conserved():
    f = bi.cone()
    path = integrate_geodesic(f, [1.0, 1.0, 0.5], [0.3, 0.5, 0.2], 1.5)
    g = f.values(path.positions)
    speed = np.einsum("ni,nij,nj->n", path.velocities, g, path.velocities)
    assert np.ptp(speed) < 1e-8 * speed[0]


def test_transport_preserves_inner_products():
    f = bi.sphere_product()
    p, v = np.array([1.0, 0.5, 0.0]), np.array([0.2, 0.7, 0.1])
    w1, w2 = np.array([1.0, 0.0, 0.3]), np.array([0.0, 1.0, -0.2])
    path = integrate_geodesic(f, p, v, 2.0, transport=[w1, w2])
    _, x, _ = path.end
    g0, g1 = f.values(p), f.values(x)
    W = path.transported
    for a, b, c, d in ((w1, w1, 0, 0), (w1, w2, 0, 1), (w2, w2, 1, 1)):
        assert W[c] @ g1 @ W[d] == pytest.approx(a @ g0 @ b, abs=1e-8)


def test_polyline_loop_flat_is_trivial():
    w = parallel_transport(bi.flat(3), [[0, 0, 0], [0.5, 0, 0], [0.5, 0.5, 0], [0, 0, 0]],
                           [1.0, 2.0, 3.0])
    np.testing.assert_allclose(w, [1.0, 2.0, 3.0], atol=1e-12)


def test_transport_plane_keeps_orthonormal_basis():
    f = bi.cone()
    x = np.array([1.0, 1.0, 1.0])
    plane = PlaneSection(0, x, np.array([[1.0, 0, 0], [0, 1 / (1 / math.sqrt(2)), 0]]))
    out = transport_plane(f, [x, x + [0.5, 0.2, 0.0]], plane)
    g = f.values(out.point)
    np.testing.assert_allclose(out.basis @ g @ out.basis.T, np.eye(2), atol=1e-8)


def test_zero_velocity_rejected():
    with pytest.raises(BadParams):
        integrate_geodesic(bi.cone(), [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 1.0)


def test_leaving_open_face_keeps_partial_path():
    with pytest.raises(LeftDomain) as info:
        integrate_geodesic(bi.cone(), [3.5, 1.0, 1.0], [1.0, 0.0, 0.0], 5.0)
    assert info.value.path is not None and not info.value.path.complete


def test_band_holonomy_gauss_bonnet():
    a, b = 0.2, 0.9
    rep = holonomy_bound_check(bi.round_sphere(2, theta_margin=0.05), [a, 0.0], (0, 1),
                               ((a, b), (0.0, 2 * math.pi - 1e-9)), [0.0, 1.0], safety=1.0)
    assert rep.angle == pytest.approx(band_holonomy(a, b), abs=1e-6)


def test_cone_jacobi_field():
    r0, t = 1.0, 2.0
    dev = jacobi_check(bi.cone(), [r0, 1.2, 0.5], [1, 0, 0], [0, math.sqrt(2) / r0, 0], t)
    assert dev == pytest.approx(cone_jacobi_deviation(r0, t), abs=1e-4)
