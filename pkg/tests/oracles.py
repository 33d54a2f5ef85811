"""Reference values computed independently of the package.

Closed forms are written out by hand here; the quadrature value was
computed once with scipy.integrate.quad and is frozen.
"""

import math

import numpy as np

# dr^2 + f(r)^2 g_S2 with f = c r: planes containing d/dr have K = -f''/f = 0,
# the tangential plane has K = (1 - f'^2)/f^2 = (1 - c^2)/(c r)^2, and
# scal is twice the sum of the three sectional curvatures.
def cone_scal(c, r):
    return 2.0 * (1.0 - c * c) / (c * c * r * r)


CONE_SCAL_R1 = 2.0  # cone_scal(1/sqrt(2), 1)
CONE_SCAL_STATED = 4.0  # value printed in the acceptance list; disagrees with the formula above

SPHERE_PRODUCT_SCAL = 2.0  # unit S^2 x R

# frozen: quad(exp(-1/(2(1-r^2))), -0.95, 0.95) * sqrt(2 pi) erf(6/sqrt 2)
STRIP_AREA = 2.1525478714811768
STRIP_R_FACTOR = 0.8587423582164
STRIP_T_FACTOR = 2.5066282696849833


def riccati_2x2(C0, t):
    """C0 (I - t C0)^{-1} via the explicit 2x2 inverse."""
    a, b, c, d = (1 - t * C0[0, 0], -t * C0[0, 1], -t * C0[1, 0], 1 - t * C0[1, 1])
    det = a * d - b * c
    inv = np.array([[d, -b], [-c, a]]) / det
    return C0 @ inv


def riccati_trace_det(C0, t):
    tr, det = np.trace(C0), np.linalg.det(C0)
    den = 1 - t * tr + t * t * det
    return (tr - 2 * t * det) / den, det / den


def cone_splitting(r0, t):
    """Splitting tensor along a cone ray: -I/(r0 + t)."""
    return -np.eye(2) / (r0 + t)


def cone_jacobi_deviation(r0, t, j0=1.0):
    return ((r0 + t) / r0 - 1.0) * j0


def band_holonomy(th_a, th_b):
    """Curvature enclosed by the unit-sphere band th_a <= th <= th_b."""
    return 2 * math.pi * (math.cos(th_a) - math.cos(th_b))
