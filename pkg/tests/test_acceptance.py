"""Acceptance criteria 1-11, one test each, against the oracles in oracles.py."""

import json
import math
import time

import numpy as np
import pytest

import oracles
from cn2lab import builtins as bi
from cn2lab import graphdetect as gd
from cn2lab.curvature import curvature_batch, riemann_scal, subspace_angle
from cn2lab.flows import holonomy_bound_check, jacobi_check
from cn2lab.splitting import (divergence_check, integrate_riccati, riccati_field_check,
                              scal_evolution_check)

SEED = 20240611


def nonflat_points(fld, count, rng, tau=1e-9):
    lo, hi = fld.chart.lo_array, fld.chart.hi_array
    out = []
    while len(out) < count:
        x = lo + (hi - lo) * rng.random((2 * count, fld.chart.dimension))
        out.extend(x[curvature_batch(fld, x).norm > tau])
    return np.array(out[:count])


# 1 ---------------------------------------------------------------------------


def test_c01_curvature_correctness(criterion):
    rng = np.random.default_rng(SEED)
    flat_norm = curvature_batch(bi.flat(3), rng.uniform(-1, 1, (200, 3))).norm.max()
    sp = bi.sphere_product()
    pts = np.column_stack([rng.uniform(0.35, 2.75, 200), rng.uniform(0, 2 * np.pi, 200),
                           rng.uniform(0, 2, 200)])
    sp_err = np.abs(curvature_batch(sp, pts).scal - oracles.SPHERE_PRODUCT_SCAL).max()
    c = 1 / math.sqrt(2)
    cone_val = riemann_scal(bi.cone(c), [1.0, 1.1, 0.7]).scal
    cone_err = abs(cone_val - oracles.cone_scal(c, 1.0))
    ok = flat_norm <= 1e-12 and sp_err <= 1e-8 and cone_err <= 1e-6
    criterion(1, ok, f"flat |R|={flat_norm:.1e}, S2xR scal err={sp_err:.1e}, "
                     f"cone scal={cone_val:.9f} vs warped-product {oracles.CONE_SCAL_R1} "
                     f"(listed value {oracles.CONE_SCAL_STATED} is inconsistent with that formula)")
    assert flat_norm <= 1e-12
    assert sp_err <= 1e-8
    assert cone_err <= 1e-6


@pytest.mark.xfail(strict=True, reason="the listed cone value 4 contradicts the warped-product "
                                       "formula it cites, which gives 2")
def test_c01_cone_listed_value():
    assert abs(riemann_scal(bi.cone(), [1.0, 1.1, 0.7]).scal - oracles.CONE_SCAL_STATED) <= 1e-6


# 2 ---------------------------------------------------------------------------


def test_c02_nullity_detection(criterion):
    rng = np.random.default_rng(SEED + 2)
    ex1 = bi.ex1()
    cases = [("ex1", ex1.blocks[0].field, ex1.blocks[0].known_nullity()),
             ("sphere_product", bi.sphere_product(), np.array([[0.0, 0.0, 1.0]])),
             ("cone", bi.cone(), np.array([[1.0, 0.0, 0.0]]))]
    worst = {}
    mu_ok = True
    for name, fld, known in cases:
        pts = nonflat_points(fld, 1000, rng)
        cb = curvature_batch(fld, pts)
        mu_ok &= bool(np.all(cb.mu == 1))
        worst[name] = max(subspace_angle(cb.nullity_basis(i), known, cb.g[i])
                          for i in range(len(pts)))
    s3 = riemann_scal(bi.round_sphere(3), [1.0, 1.3, 0.2])
    s3_not_cn2 = s3.norm > 1e-9 and s3.nullity_dim < 1
    ok = mu_ok and max(worst.values()) <= 1e-6 and s3_not_cn2
    criterion(2, ok, "max angles " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
              + f"; S3 nullity dim={s3.nullity_dim}")
    assert mu_ok
    assert max(worst.values()) <= 1e-6
    assert s3_not_cn2


# 3 ---------------------------------------------------------------------------


def test_c03_riccati_suite(criterion):
    rng = np.random.default_rng(SEED + 3)
    ts = np.linspace(0.0, 0.4, 41)
    err_c = err_td = 0.0
    for _ in range(100):
        C = rng.normal(size=(2, 2))
        C *= 2.0 * rng.random() / max(abs(np.linalg.eigvals(C)))
        num = integrate_riccati(C, ts)
        for t, Ct in zip(ts, num):
            err_c = max(err_c, np.abs(Ct - oracles.riccati_2x2(C, t)).max())
            tr, det = oracles.riccati_trace_det(C, t)
            ref = oracles.riccati_2x2(C, t)
            err_td = max(err_td, abs(np.trace(ref) - tr), abs(np.linalg.det(ref) - det))
    N = np.array([[0.0, 1.7], [0.0, 0.0]])
    nil = np.abs(integrate_riccati(N, ts) - N).max()
    ok = err_c <= 1e-8 and err_td <= 1e-10 and nil <= 1e-12
    criterion(3, ok, f"flow err={err_c:.1e}, trace/det err={err_td:.1e}, nilpotent drift={nil:.1e}")
    assert err_c <= 1e-8
    assert err_td <= 1e-10
    assert nil <= 1e-12


# 4 ---------------------------------------------------------------------------


def test_c04_field_riccati_on_cone(criterion):
    cone = bi.cone()
    r0, p = 1.0, [1.0, 1.2, 0.4]
    rep = riccati_field_check(cone, p, 2.0, samples=20, details=True)
    c_err = max(np.abs(np.array(s["C"]) - oracles.cone_splitting(r0, s["t"])).max()
                for s in rep["samples"])
    C0 = np.array(rep["C0"])
    tr_err = max(abs(np.trace(np.array(s["C"])) - oracles.riccati_trace_det(C0, s["t"])[0])
                 for s in rep["samples"])
    sc = scal_evolution_check(cone, p, 2.0, samples=20, details=True)
    prod = [s["scal"] * (r0 + s["t"]) ** 2 for s in sc["samples"]]
    prod_err = max(abs(v - prod[0]) for v in prod)
    full = rep["truncated_at"] is None and len(rep["samples"]) == 21
    ok = full and c_err <= 1e-5 and tr_err <= 1e-5 and prod_err <= 1e-5
    criterion(4, ok, f"C err={c_err:.1e}, tr err={tr_err:.1e}, Scal(r0+t)^2 spread={prod_err:.1e}")
    assert full
    assert c_err <= 1e-5
    assert tr_err <= 1e-5
    assert prod_err <= 1e-5


# 5 ---------------------------------------------------------------------------


def test_c05_divergence_identity(criterion):
    rng = np.random.default_rng(SEED + 5)
    cone = bi.cone()
    ex1 = bi.ex1().blocks[0].field
    worst = {}
    for name, fld in (("cone", cone), ("ex1", ex1)):
        pts = nonflat_points(fld, 100, rng, tau=1e-6)
        worst[name] = max(divergence_check(fld, x) for x in pts)
    ok = max(worst.values()) <= 1e-5
    criterion(5, ok, ", ".join(f"{k} max |div T + tr C|={v:.1e}" for k, v in worst.items()))
    assert ok


# 6 ---------------------------------------------------------------------------


def _random_rectangle(rng, fld):
    chart = fld.chart
    lo, hi = chart.lo_array, chart.hi_array
    axes = tuple(sorted(int(a) for a in rng.choice(chart.dimension, 2, replace=False)))
    base = lo + (hi - lo) * (0.05 + 0.6 * rng.random(chart.dimension))
    ranges = []
    for a in axes:
        w = (hi[a] - lo[a]) * (0.05 + 0.25 * rng.random())
        ranges.append((base[a], min(base[a] + w, hi[a] - 1e-9)))
    return base, axes, ranges, rng.normal(size=chart.dimension)


def test_c06_holonomy_bound(criterion):
    rng = np.random.default_rng(SEED + 6)
    spaces = [bi.sphere_product(), bi.cone(), bi.ex1(), bi.round_sphere(3),
              bi.strip_cylinder(), bi.hypersurface_graph("x^2/2 + y^2/4")]
    worst = -np.inf
    for k in range(200):
        sp = spaces[k % len(spaces)]
        fld = sp.blocks[0].field if hasattr(sp, "blocks") else sp
        base, axes, ranges, xi = _random_rectangle(rng, fld)
        rep = holonomy_bound_check(sp, base, axes, ranges, xi, safety=1.0)
        worst = max(worst, rep.angle - rep.bound)
    th_a, th_b = 0.05, 1.0
    band = holonomy_bound_check(bi.round_sphere(2, theta_margin=0.05), [th_a, 0.0], (0, 1),
                                ((th_a, th_b), (0.0, 2 * math.pi - 1e-12)), [0.0, 1.0],
                                safety=1.0)
    gb_err = abs(band.angle - oracles.band_holonomy(th_a, th_b))
    eq_err = abs(band.angle - band.bound)
    ok = worst <= 1e-6 and gb_err <= 1e-6 and eq_err <= 1e-6
    criterion(6, ok, f"max(angle - bound)={worst:.2e} over 200 loops; "
                     f"cap vs Gauss-Bonnet err={gb_err:.1e}, angle - bound={eq_err:.1e}")
    assert worst <= 1e-6
    assert gb_err <= 1e-6
    assert eq_err <= 1e-6


# 7 ---------------------------------------------------------------------------


def test_c07_jacobi_certificate(criterion):
    rng = np.random.default_rng(SEED + 7)
    ex1 = bi.ex1()
    pts = nonflat_points(ex1.blocks[0].field, 10, rng, tau=1e-6)
    ex1_dev = max(jacobi_check(ex1, x, [0, 0, 1], [1, 0, 0], 2.0) for x in pts)
    r0, t = 1.0, 2.0
    c = 1 / math.sqrt(2)
    j0 = np.array([0.0, 1 / (c * r0), 0.0])  # unit vector along d/dth
    dev = jacobi_check(bi.cone(), [r0, 1.2, 0.5], [1, 0, 0], j0, t)
    cone_err = abs(dev - oracles.cone_jacobi_deviation(r0, t))
    ok = ex1_dev <= 1e-6 and cone_err <= 1e-4
    criterion(7, ok, f"ex1 deviation={ex1_dev:.1e}; cone deviation={dev:.6f} "
                     f"vs {oracles.cone_jacobi_deviation(r0, t)} (err {cone_err:.1e})")
    assert ex1_dev <= 1e-6
    assert cone_err <= 1e-4


# 8, 9, 11 --------------------------------------------------------------------


def run_detection():
    t0 = time.perf_counter()
    reps = {
        "ex1": gd.detect(bi.ex1(), 1 / 16),
        "ex2_16": gd.detect(bi.ex2(), 1 / 16),
        "ex2_32": gd.detect(bi.ex2(), 1 / 32),
        "ex3_6": gd.detect(bi.ex3(6), 1 / 16, adapt=True, rho=6 / 16, m_cap=4),
    }
    return reps, time.perf_counter() - t0


@pytest.fixture(scope="module")
def detection():
    return run_detection()


def test_c08_end_to_end_detection(criterion, detection):
    reps, elapsed = detection
    e1, a, b, e3 = reps["ex1"], reps["ex2_16"], reps["ex2_32"], reps["ex3_6"]
    ok1 = e1.verdict == "GeometricGraphManifold" and len(e1.nodes) == 2 and len(e1.edges) == 2
    drift = abs(b.unresolved_fraction / a.unresolved_fraction - 1)
    ok2 = a.verdict == "NonDenseExtension" and drift <= 0.2
    ok3 = e3.verdict == "NotLocallyFinite" and e3.profile["max_m"] >= 5
    ok = ok1 and ok2 and ok3 and elapsed <= 600
    criterion(8, ok, f"ex1 {e1.verdict} {len(e1.nodes)}n/{len(e1.edges)}e; "
                     f"ex2 {a.verdict} unresolved {a.unresolved_fraction:.4f} -> "
                     f"{b.unresolved_fraction:.4f}; ex3(6) {e3.verdict} max m="
                     f"{e3.profile['max_m']}; {elapsed:.0f}s")
    assert ok1
    assert ok2
    assert ok3
    assert elapsed <= 600


def test_c09_bnl_profile_law(criterion, detection):
    ext = detection[0]["ex1"].extension
    cells = np.flatnonzero(ext.label == gd.BOUNDARY)
    fails = 0
    angle_err = 0.0
    for c in cells:
        p = gd.boundary_profile(ext, c)
        fails += not p.law_ok
        if p.n_clusters == 2:
            angle_err = max(angle_err, abs(p.angles[0, 1] - math.pi / 2))
        else:
            angle_err = math.inf
    ok = len(cells) > 0 and fails == 0 and angle_err <= 0.05
    criterion(9, ok, f"{len(cells) - fails}/{len(cells)} Boundary cells obey 2 <= #G <= m; "
                     f"max |angle - pi/2|={angle_err:.1e}")
    assert len(cells) > 0
    assert fails == 0
    assert angle_err <= 0.05


def test_c10_volume(criterion):
    v, _ = gd.volume(bi.flat(3, box=([0, 0, 0], [2, 2, 2])), 0.25)
    strip = bi.strip_cylinder()
    v1, e1 = gd.volume(strip, 1 / 128, adapt=True)
    v2, e2 = gd.volume(strip, 1 / 256, adapt=True)
    order = math.log2(e1 / e2)
    extrapolated = v2 + (v2 - v1) / 3
    err = abs(extrapolated - oracles.STRIP_AREA)
    ok = abs(v - 8) <= 1e-10 and math.isfinite(v2) and order >= 1.9 and err <= 1e-6
    criterion(10, ok, f"flat cube {v!r}; strip {v2:.9f}, observed order {order:.2f}, "
                      f"extrapolated err vs quadrature oracle {err:.1e}")
    assert abs(v - 8) <= 1e-10
    assert order >= 1.9
    assert err <= 1e-6


def test_c11_determinism(criterion, detection):
    first = {k: r.to_json() for k, r in detection[0].items()}
    again, _ = run_detection()
    second = {k: r.to_json() for k, r in again.items()}
    same = [k for k in first if first[k] == second[k]]
    ok = len(same) == len(first)
    criterion(11, ok, f"{len(same)}/{len(first)} reports byte-identical across two runs")
    assert ok
