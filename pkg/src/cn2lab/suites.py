"""Named invariant suites run by ``cn2lab verify --suite NAME``.

Each suite is a small seeded batch of checks against closed forms; the
acceptance tests run the same kinds of checks at full size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import builtins as bi
from .curvature import curvature_batch, riemann_scal, subspace_angle
from .flows import holonomy_bound_check, jacobi_check
from .graphdetect import detect, volume
from .splitting import (divergence_check, integrate_riccati, riccati_closed_form,
                        riccati_field_check, scal_evolution_check, trace_det_evolution)


@dataclass
class Check:
    name: str
    value: float
    bound: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.bound)


@dataclass
class SuiteResult:
    name: str
    seed: int
    checks: list = field(default_factory=list)

    def add(self, name, value, bound):
        self.checks.append(Check(name, float(value), float(bound)))

    @property
    def n_passed(self) -> int:
        return sum(c.passed for c in self.checks)

    @property
    def n_failed(self) -> int:
        return len(self.checks) - self.n_passed

    @property
    def passed(self) -> bool:
        return self.n_failed == 0

    def to_json(self) -> str:
        return json.dumps({"suite": self.name, "seed": self.seed, "passed": self.n_passed,
                           "failed": self.n_failed,
                           "checks": [{"name": c.name, "value": c.value, "bound": c.bound,
                                       "passed": c.passed} for c in self.checks]},
                          sort_keys=True)


def cone_scal(c: float, r: float) -> float:
    """Scalar curvature of dr^2 + (c r)^2 g_S2: 2 (1 - c^2) / (c r)^2."""
    return 2.0 * (1.0 - c * c) / (c * c * r * r)


def random_nonflat_points(space, count: int, rng, tau: float = 1e-6, block: int = 0):
    """Uniform points of a block (or chart) whose curvature norm exceeds ``tau``."""
    field_ = space.blocks[block].field if hasattr(space, "blocks") else space
    chart = field_.chart
    lo, hi = chart.lo_array, chart.hi_array
    out = []
    while len(out) < count:
        x = lo + (hi - lo) * rng.random((4 * count, chart.dimension))
        cb = curvature_batch(field_, x)
        out.extend(x[cb.norm > tau])
    return np.array(out[:count])


def suite_curvature(seed: int, count: int) -> SuiteResult:
    res = SuiteResult("curvature", seed)
    rng = np.random.default_rng(seed)
    f = bi.flat(3)
    res.add("flat3 |R|", curvature_batch(f, rng.uniform(-1, 1, (count, 3))).norm.max(), 1e-12)
    s = bi.sphere_product()
    pts = np.column_stack([rng.uniform(0.5, 2.6, count), rng.uniform(0, 6, count),
                           rng.uniform(0, 2, count)])
    res.add("sphere_product scal-2", np.abs(curvature_batch(s, pts).scal - 2).max(), 1e-8)
    c = 1 / math.sqrt(2)
    res.add("cone scal vs warped product",
            abs(riemann_scal(bi.cone(c), [1.0, 1.2, 0.4]).scal - cone_scal(c, 1.0)), 1e-6)
    return res


def suite_nullity(seed: int, count: int) -> SuiteResult:
    res = SuiteResult("nullity", seed)
    rng = np.random.default_rng(seed)
    ex1 = bi.ex1()
    cases = [("ex1", ex1.blocks[0].field, ex1.blocks[0].known_nullity()),
             ("sphere_product", bi.sphere_product(), np.array([[0.0, 0, 1]])),
             ("cone", bi.cone(), np.array([[1.0, 0, 0]]))]
    for name, fld, known in cases:
        pts = random_nonflat_points(fld, count, rng)
        cb = curvature_batch(fld, pts)
        worst = 0.0
        for i in range(len(pts)):
            if cb.mu[i] != 1:
                worst = np.inf
                break
            worst = max(worst, subspace_angle(cb.nullity_basis(i), known, cb.g[i]))
        res.add(f"{name} nullity angle", worst, 1e-6)
    n3 = bi.round_sphere(3)
    mu = riemann_scal(n3, [1.0, 1.0, 1.0]).nullity_dim
    res.add("round 3-sphere nullity dim (expect 0)", mu, 0)
    return res


def random_c0(rng, radius: float = 2.0):
    C = rng.normal(size=(2, 2))
    rho = max(abs(np.linalg.eigvals(C)))
    return C * (radius * rng.random() / rho)


def suite_riccati(seed: int, count: int) -> SuiteResult:
    res = SuiteResult("riccati", seed)
    rng = np.random.default_rng(seed)
    ts = np.linspace(0.0, 0.4, 9)
    worst_c = worst_td = 0.0
    for _ in range(count):
        C0 = random_c0(rng)
        num = integrate_riccati(C0, ts)
        for t, C in zip(ts, num):
            worst_c = max(worst_c, np.abs(C - riccati_closed_form(C0, t)).max())
            tr, det = trace_det_evolution(C0, t)
            ref = riccati_closed_form(C0, t)
            worst_td = max(worst_td, abs(tr - np.trace(ref)), abs(det - np.linalg.det(ref)))
    res.add("integrated vs closed form", worst_c, 1e-8)
    res.add("trace/det evolution", worst_td, 1e-10)
    N = np.array([[0.0, 1.0], [0.0, 0.0]])
    res.add("nilpotent stays constant", np.abs(integrate_riccati(N, ts)[-1] - N).max(), 1e-12)
    return res


def suite_field(seed: int, count: int) -> SuiteResult:
    res = SuiteResult("field", seed)
    cone = bi.cone()
    p = [1.0, 1.1, 0.3]
    res.add("cone Riccati field", riccati_field_check(cone, p, 2.0, samples=max(count, 4)), 1e-5)
    res.add("cone Scal (r0+t)^2", scal_evolution_check(cone, p, 2.0, samples=max(count, 4)), 1e-5)
    res.add("cone div T + tr C", divergence_check(cone, p), 1e-5)
    ex1 = bi.ex1()
    res.add("ex1 div T + tr C", divergence_check(ex1.blocks[0].field, [0.1, -0.2, 0.3]), 1e-5)
    return res


def suite_holonomy(seed: int, count: int) -> SuiteResult:
    res = SuiteResult("holonomy", seed)
    rng = np.random.default_rng(seed)
    spaces = [bi.sphere_product(), bi.cone(), bi.ex1()]
    worst = -np.inf
    for k in range(count):
        sp = spaces[k % len(spaces)]
        fld = sp.blocks[0].field if hasattr(sp, "blocks") else sp
        chart = fld.chart
        lo, hi = chart.lo_array, chart.hi_array
        axes = tuple(sorted(rng.choice(chart.dimension, 2, replace=False)))
        base = lo + (hi - lo) * (0.2 + 0.6 * rng.random(chart.dimension))
        ranges = []
        for a in axes:
            w = 0.15 * (hi[a] - lo[a]) * (0.2 + rng.random())
            ranges.append((base[a], min(base[a] + w, hi[a] - 1e-6)))
        xi = rng.normal(size=chart.dimension)
        rep = holonomy_bound_check(sp, base, axes, ranges, xi)
        worst = max(worst, rep.angle - rep.bound)
    res.add("angle - (k-1) delta Area", worst, 1e-6)
    # the loop runs round the band th_a <= th <= th_b, enclosing curvature 2 pi (cos th_a - cos th_b)
    th_a, th_b = 0.05, 1.0
    cap = holonomy_bound_check(bi.round_sphere(2, theta_margin=0.05), [th_a, 0.0],
                               (0, 1), ((th_a, th_b), (0.0, 2 * math.pi - 1e-9)), [0.0, 1.0],
                               safety=1.0)
    enclosed = 2 * math.pi * (math.cos(th_a) - math.cos(th_b))
    res.add("spherical band vs Gauss-Bonnet", abs(cap.angle - enclosed), 1e-6)
    return res


def suite_jacobi(seed: int, count: int) -> SuiteResult:
    res = SuiteResult("jacobi", seed)
    ex1 = bi.ex1()
    res.add("ex1 deviation", jacobi_check(ex1, [0.1, 0.2, 0.0], [0, 0, 1], [1, 0, 0], 2.0), 1e-6)
    r0, t = 1.0, 2.0
    dev = jacobi_check(bi.cone(), [r0, 1.2, 0.5], [1, 0, 0], [0, 1 / (r0 / math.sqrt(2)), 0], t)
    res.add("cone deviation vs closed form", abs(dev - ((r0 + t) / r0 - 1)), 1e-4)
    return res


def suite_volume(seed: int, count: int) -> SuiteResult:
    res = SuiteResult("volume", seed)
    v, _ = volume(bi.flat(3, box=([0, 0, 0], [2, 2, 2])), 0.25)
    res.add("flat [0,2]^3", abs(v - 8), 1e-10)
    strip = bi.strip_cylinder()
    v1, e1 = volume(strip, 1 / 64, adapt=True)
    v2, e2 = volume(strip, 1 / 128, adapt=True)
    # second order: halving h divides the error estimate by about 4
    res.add("strip area Richardson ratio - 4", abs(e1 / e2 - 4), 0.2)
    return res


def suite_graph(seed: int, count: int) -> SuiteResult:
    res = SuiteResult("graph", seed)
    rep = detect(bi.ex1(), 1 / 8, kappa=4)
    res.add("ex1 verdict is GeometricGraphManifold", rep.verdict != "GeometricGraphManifold", 0)
    res.add("ex1 node count - 2", abs(len(rep.nodes) - 2), 0)
    res.add("ex1 edge count - 2", abs(len(rep.edges) - 2), 0)
    return res


SUITES = {
    "curvature": suite_curvature,
    "nullity": suite_nullity,
    "riccati": suite_riccati,
    "field": suite_field,
    "holonomy": suite_holonomy,
    "jacobi": suite_jacobi,
    "volume": suite_volume,
    "graph": suite_graph,
}


def run_suite(name: str, seed: int = 0, count: int = 10) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](seed, count)
