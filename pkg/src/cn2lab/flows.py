"""Geodesics, parallel transport, holonomy and Jacobi fields on charts and atlases."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from .curvature import (
    TAU_FLAT,
    TAU_RANK,
    christoffel_from_jet,
    curvature_batch,
    nabla_unit_nullity,
    orthonormal_frame,
    principal_angles as _angles,
    riemann_from_jet,
    to_frame,
)
from .errors import (
    BadParams,
    DimensionMismatch,
    LeftDomain,
    NotCN2Point,
    NotInNullity,
    OutOfDomain,
    StepUnderflow,
)
from .metric import MetricField, TorusAtlas, atlas_from_field

RTOL = 1e-10
ATOL = 1e-10
HOLONOMY_SAFETY = 1.05
NULLITY_ANGLE_TOL = 1e-4


def as_atlas(space) -> TorusAtlas:
    if isinstance(space, TorusAtlas):
        return space
    if isinstance(space, MetricField):
        return atlas_from_field(space)
    raise TypeError(f"expected a MetricField or TorusAtlas, got {type(space).__name__}")


def _max_step(atlas: TorusAtlas) -> float:
    return 0.5 * atlas.margin if np.isfinite(atlas.margin) else np.inf


# -- integration engine ------------------------------------------------------


@dataclass
class _Segment:
    block: int
    t: np.ndarray
    y: np.ndarray  # shape (len(t), state size)
    A: np.ndarray  # tangent map from the run's starting block into this one


def _face_events(chart, n):
    # events sit a hair outside the faces so motion along a face never fires them
    events = []
    for k in range(n):
        eps = 1e-12 * chart.widths[k]
        for side, bound in ((1, chart.hi[k] + eps), (-1, chart.lo[k] - eps)):
            def ev(t, y, k=k, bound=bound):
                return y[k] - bound
            ev.terminal = True
            ev.direction = side
            ev.face = (k, side)
            events.append(ev)
    return events


def _outward_face(chart, x, v):
    """Face that x sits on (or beyond) while v points out of the box, if any."""
    for k in range(len(x)):
        if x[k] >= chart.hi[k] and v[k] > 0:
            return k, 1
        if x[k] <= chart.lo[k] and v[k] < 0:
            return k, -1
    return None


def _run(atlas: TorusAtlas, block: int, y0, t0: float, t1: float, rhs_for, n_vectors: int,
         rtol=RTOL, atol=ATOL, max_step=None):
    """Integrate y = (x, v, W_1..W_m, scalars) from t0 to t1 across identifications.

    ``rhs_for(field)`` returns ``f(t, y)``. Position x and the tangent vectors
    v, W_i are mapped by the glue at every face crossing.
    """
    n = atlas.dimension
    max_step = _max_step(atlas) if max_step is None else max_step
    y = np.array(y0, dtype=float)
    t = t0
    A = np.eye(n)
    segments: list[_Segment] = []
    for _ in range(10_000):
        chart = atlas.blocks[block].chart
        crossing = _outward_face(chart, y[:n], y[n:2 * n])
        if crossing is None:
            if t1 - t <= 1e-13 * max(1.0, abs(t1)):
                if not segments:
                    segments.append(_Segment(block, np.array([t]), y[None].copy(), A))
                return segments
            events = _face_events(chart, n)
            sol = solve_ivp(rhs_for(atlas.blocks[block].field), (t, t1), y, method="RK45",
                            rtol=rtol, atol=atol, max_step=max_step, events=events)
            segments.append(_Segment(block, sol.t, sol.y.T, A))
            if sol.status == -1:
                raise StepUnderflow(sol.message)
            if sol.status == 0:
                return segments
            i = next(i for i, te in enumerate(sol.t_events) if len(te))
            crossing = events[i].face
            t = float(sol.t_events[i][0])
            y = sol.y_events[i][0].copy()
        axis, side = crossing
        x = y[:n]
        x[axis] = chart.hi[axis] if side > 0 else chart.lo[axis]
        glue = atlas.face_glue(block, axis, side, np.clip(x, chart.lo_array, chart.hi_array))
        if glue is None:
            raise LeftDomain(f"left block {block} through face {axis + 1}{'+' if side > 0 else '-'}",
                             path=segments)
        ynew = y.copy()
        ynew[:n] = glue.map_point(x)
        dchart = atlas.blocks[glue.dst].chart
        ynew[:n] = np.clip(ynew[:n], dchart.lo_array, dchart.hi_array)
        for s in range(1 + n_vectors):
            sl = slice(n * (s + 1), n * (s + 2))
            ynew[sl] = glue.map_vector(y[sl])
        y, block = ynew, glue.dst
        A = glue.A @ A
    raise StepUnderflow("too many face crossings")


def _transport_rhs(geodesic: bool, n: int, n_vectors: int, extra=None, need_curvature=False):
    def rhs_for(field: MetricField):
        def rhs(t, y):
            x = y[:n]
            v = y[n:2 * n]
            W = y[2 * n:2 * n + n_vectors * n].reshape(n_vectors, n)
            g, dg, ddg = field.jet(x[None])
            if need_curvature:
                gam, R = riemann_from_jet(g, dg, ddg)
                gam, R, g = gam[0], R[0], g[0]
            else:
                gam, R, g = christoffel_from_jet(g, dg)[0], None, g[0]
            out = np.empty_like(y)
            out[:n] = v
            out[n:2 * n] = -np.einsum("kij,i,j->k", gam, v, v) if geodesic else 0.0
            if n_vectors:
                out[2 * n:2 * n + n_vectors * n] = -np.einsum("kij,i,mj->mk", gam, v, W).ravel()
            if extra is not None:
                out[2 * n + n_vectors * n:] = extra(x, v, W, y[2 * n + n_vectors * n:], g, R)
            return out
        return rhs
    return rhs_for


# -- geodesics ---------------------------------------------------------------


@dataclass
class GeodesicPath:
    """Samples (t, block, x, v) of a geodesic, piecewise per block visited."""

    segments: list
    tol: float
    dimension: int
    transported: np.ndarray | None = None
    complete: bool = True
    _splines: list = dc_field(default_factory=list, repr=False)

    @property
    def t(self):
        return np.concatenate([s.t for s in self.segments])

    @property
    def blocks(self):
        return np.concatenate([np.full(len(s.t), s.block) for s in self.segments])

    @property
    def positions(self):
        return np.concatenate([s.y[:, :self.dimension] for s in self.segments])

    @property
    def velocities(self):
        n = self.dimension
        return np.concatenate([s.y[:, n:2 * n] for s in self.segments])

    @property
    def start(self):
        s = self.segments[0]
        n = self.dimension
        return s.block, s.y[0, :n], s.y[0, n:2 * n]

    @property
    def end(self):
        s = self.segments[-1]
        n = self.dimension
        return s.block, s.y[-1, :n], s.y[-1, n:2 * n]

    def at(self, t: float, atlas: TorusAtlas | None = None):
        """(block, x, v) at time t by cubic Hermite interpolation within a segment."""
        n = self.dimension
        for seg in self.segments:
            if seg.t[0] <= t <= seg.t[-1] and len(seg.t) > 1:
                x = seg.y[:, :n]
                v = seg.y[:, n:2 * n]
                xs = CubicHermiteSpline(seg.t, x, v, axis=0)
                if atlas is not None:
                    field = atlas.blocks[seg.block].field
                    g, dg, _ = field.jet(x)
                    gam = christoffel_from_jet(g, dg)
                    acc = -np.einsum("nkij,ni,nj->nk", gam, v, v)
                    vs = CubicHermiteSpline(seg.t, v, acc, axis=0)
                    return seg.block, xs(t), vs(t)
                return seg.block, xs(t), xs.derivative()(t)
        raise ValueError(f"t={t} outside the path")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.dimension
        w.writerow(["t", "block"] + [f"x{i + 1}" for i in range(n)] + [f"v{i + 1}" for i in range(n)])
        for seg in self.segments:
            for t, row in zip(seg.t, seg.y):
                w.writerow([repr(float(t)), seg.block] + [repr(float(c)) for c in row[:2 * n]])
        return buf.getvalue()


def _start(atlas: TorusAtlas, block: int, p, v):
    b, x, vv, _ = atlas.canonicalize(block, p, v)
    return b, x, vv


def integrate_geodesic(space, p, v, t_max: float, tol: float = RTOL, *, block: int = 0,
                       transport: Sequence = (), max_step: float | None = None) -> GeodesicPath:
    """Geodesic from p with initial velocity v, optionally transporting vectors along."""
    atlas = as_atlas(space)
    n = atlas.dimension
    b, x, vv = _start(atlas, block, p, v)
    g = atlas.blocks[b].field.values(x)
    if not vv @ g @ vv > 0:
        raise BadParams("initial velocity must be nonzero")
    W = np.array(transport, dtype=float).reshape(-1, n) if len(transport) else np.zeros((0, n))
    # transport vectors are given at p in the block the caller named
    if b != block:
        _, _, _, A = atlas.canonicalize(block, p)
        W = W @ A.T
    m = len(W)
    y0 = np.concatenate([x, vv, W.ravel()])
    try:
        segs = _run(atlas, b, y0, 0.0, float(t_max), _transport_rhs(True, n, m), m,
                    rtol=tol, atol=tol, max_step=max_step)
    except LeftDomain as exc:
        exc.path = GeodesicPath(exc.path, tol, n, complete=False)
        raise
    last = segs[-1].y[-1]
    transported = last[2 * n:2 * n + m * n].reshape(m, n) if m else None
    return GeodesicPath(segs, tol, n, transported)


# -- parallel transport ------------------------------------------------------


@dataclass(frozen=True)
class PlaneSection:
    """Orthonormal (in g) vectors spanning a plane at ``point`` of ``block``."""

    block: int
    point: np.ndarray
    basis: np.ndarray

    @classmethod
    def from_vectors(cls, space, point, vectors, block: int = 0):
        atlas = as_atlas(space)
        g = atlas.blocks[block].field.values(np.asarray(point, dtype=float))
        return cls(block, np.asarray(point, dtype=float), gram_schmidt(vectors, g))

    def gram(self, space) -> np.ndarray:
        g = as_atlas(space).blocks[self.block].field.values(self.point)
        return self.basis @ g @ self.basis.T


def gram_schmidt(vectors, g) -> np.ndarray:
    out = []
    for v in np.atleast_2d(np.asarray(vectors, dtype=float)):
        w = v.copy()
        for _ in range(2):
            for u in out:
                w = w - (u @ g @ w) * u
        nrm = np.sqrt(w @ g @ w)
        if nrm < 1e-12:
            raise BadParams("vectors are linearly dependent")
        out.append(w / nrm)
    return np.array(out)


def transport_polyline(space, vertices, vectors, *, block: int = 0, tol: float = RTOL):
    """Transport vectors along straight coordinate legs through ``vertices``.

    Vertices are in the (unwrapped) coordinates of ``block``; legs may cross
    identifications. Returns (end block, end point, transported vectors).
    """
    atlas = as_atlas(space)
    n = atlas.dimension
    verts = np.asarray(vertices, dtype=float)
    W = np.atleast_2d(np.asarray(vectors, dtype=float))
    m = len(W)
    A = np.eye(n)
    b, x, _, _ = atlas.canonicalize(block, verts[0])
    rhs_for = _transport_rhs(False, n, m)
    for a, c in zip(verts[:-1], verts[1:]):
        d = A @ (c - a)
        if not np.any(d):
            continue
        y0 = np.concatenate([x, d, W.ravel()])
        segs = _run(atlas, b, y0, 0.0, 1.0, rhs_for, m, rtol=tol, atol=tol)
        seg = segs[-1]
        b = seg.block
        x = seg.y[-1, :n]
        W = seg.y[-1, 2 * n:].reshape(m, n)
        # later legs are expressed in the block the path has reached
        A = seg.A @ A
    return b, x, W


def parallel_transport(space, path, w, *, block: int = 0, tol: float = RTOL):
    """Transport ``w`` along a GeodesicPath or a polyline (array of vertices)."""
    if isinstance(path, GeodesicPath):
        b, x, v = path.start
        res = integrate_geodesic(space, x, v, float(path.t[-1]), path.tol, block=b,
                                 transport=[w])
        return res.transported[0]
    _, _, W = transport_polyline(space, path, [w], block=block, tol=tol)
    return W[0]


def transport_plane(space, path, plane: PlaneSection, *, tol: float = RTOL) -> PlaneSection:
    atlas = as_atlas(space)
    if isinstance(path, GeodesicPath):
        b0, x0, v0 = path.start
        res = integrate_geodesic(atlas, x0, v0, float(path.t[-1]), path.tol, block=b0,
                                 transport=plane.basis)
        b, x, _ = res.end
        W = res.transported
    else:
        b, x, W = transport_polyline(atlas, path, plane.basis, block=plane.block, tol=tol)
    g = atlas.blocks[b].field.values(x)
    return PlaneSection(b, x, gram_schmidt(W, g))


def principal_angles(A: PlaneSection, B: PlaneSection, space=None) -> np.ndarray:
    """Principal angles, nonincreasing, between planes at the same point."""
    if A.basis.shape != B.basis.shape:
        raise DimensionMismatch(f"planes of dimension {len(A.basis)} and {len(B.basis)}")
    if A.block != B.block or not np.allclose(A.point, B.point, atol=1e-9):
        raise BadParams("planes must share the base point")
    g = None
    if space is not None:
        g = as_atlas(space).blocks[A.block].field.values(A.point)
    return np.sort(_angles(A.basis, B.basis, g))[::-1]


# -- holonomy ----------------------------------------------------------------


@dataclass(frozen=True)
class HolonomyReport:
    loop: dict
    rank: int
    delta: float
    area: float
    angle: float
    bound: float
    satisfied: bool

    def to_dict(self) -> dict:
        return {"loop": self.loop, "rank": self.rank, "delta": self.delta, "area": self.area,
                "angle": self.angle, "bound": self.bound, "satisfied": self.satisfied}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def curvature_operator_norm(field: MetricField, points) -> np.ndarray:
    """Operator norm of the curvature operator on 2-vectors at each point."""
    pts = np.atleast_2d(points)
    g, dg, ddg = field.jet(pts)
    _, R = riemann_from_jet(g, dg, ddg)
    Rf = to_frame(R, orthonormal_frame(g))
    n = g.shape[-1]
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    op = np.empty((len(pts), len(pairs), len(pairs)))
    for I, (a, b) in enumerate(pairs):
        for J, (c, d) in enumerate(pairs):
            op[:, I, J] = Rf[:, a, b, c, d]
    op = 0.5 * (op + np.swapaxes(op, 1, 2))
    return np.max(np.abs(np.linalg.eigvalsh(op)), axis=-1)


def slice_area(field: MetricField, base, axes, ranges, order: int = 48) -> float:
    """Area of a coordinate rectangle in the (axes[0], axes[1]) slice through base."""
    i, j = axes
    (a0, a1), (b0, b1) = ranges
    nodes, weights = np.polynomial.legendre.leggauss(order)
    u = 0.5 * (a1 - a0) * nodes + 0.5 * (a1 + a0)
    w = 0.5 * (b1 - b0) * nodes + 0.5 * (b1 + b0)
    U, Wg = np.meshgrid(u, w, indexing="ij")
    pts = np.tile(np.asarray(base, dtype=float), (U.size, 1))
    pts[:, i] = U.ravel()
    pts[:, j] = Wg.ravel()
    g = field.values(pts)
    det = g[:, i, i] * g[:, j, j] - g[:, i, j] ** 2
    wts = np.outer(weights, weights).ravel()
    return float(0.25 * (a1 - a0) * (b1 - b0) * np.sum(wts * np.sqrt(det)))


def holonomy_bound_check(space, base, axes, ranges, xi, *, block: int = 0,
                         safety: float = HOLONOMY_SAFETY, samples: int = 32,
                         tol: float = RTOL) -> HolonomyReport:
    """Transport xi around the rectangle ``ranges`` in the slice spanned by ``axes``.

    The rectangle lies in one block; its corner (ranges[0][0], ranges[1][0])
    is the loop's base point.
    """
    atlas = as_atlas(space)
    field = atlas.blocks[block].field
    i, j = axes
    (a0, a1), (b0, b1) = ranges
    p = np.array(base, dtype=float)
    corners = []
    for u, w in ((a0, b0), (a1, b0), (a1, b1), (a0, b1), (a0, b0)):
        c = p.copy()
        c[i], c[j] = u, w
        corners.append(c)
    corners = np.array(corners)
    if not np.all(field.chart.contains(corners)):
        raise OutOfDomain("rectangle leaves the block")
    g = field.values(corners[0])
    xi = np.asarray(xi, dtype=float)
    # unit length keeps absolute integration tolerances meaningful
    xi = xi / np.sqrt(xi @ g @ xi)
    b_end, x_end, W = transport_polyline(atlas, corners, [xi], block=block, tol=tol)
    Pxi = W[0]
    if b_end != block:
        _, _, Pxi, _ = atlas.canonicalize(b_end, x_end, Pxi)
    c = (xi @ g @ Pxi) / np.sqrt((xi @ g @ xi) * (Pxi @ g @ Pxi))
    angle = float(np.arccos(np.clip(c, -1.0, 1.0)))
    su = np.linspace(a0, a1, samples)
    sw = np.linspace(b0, b1, samples)
    U, Wg = np.meshgrid(su, sw, indexing="ij")
    pts = np.tile(p, (U.size, 1))
    pts[:, i] = U.ravel()
    pts[:, j] = Wg.ravel()
    delta = float(np.max(curvature_operator_norm(field, pts))) * safety
    area = slice_area(field, p, axes, ranges)
    k = atlas.dimension
    bound = (k - 1) * delta * area
    loop = {"block": block, "base": corners[0].tolist(), "axes": [int(i), int(j)],
            "ranges": [[float(a0), float(a1)], [float(b0), float(b1)]]}
    return HolonomyReport(loop, k, delta, area, angle, bound, angle <= bound + 1e-6)


# -- Jacobi fields along nullity geodesics ------------------------------------


def jacobi_check(space, p, T_dir, J0, t_max: float, *, block: int = 0, tol: float = RTOL,
                 tau_flat: float = TAU_FLAT, tau_rank: float = TAU_RANK,
                 return_profile: bool = False):
    """Max over t of |J(t) - P_t J0| along the nullity geodesic from p in direction T_dir.

    J solves J'' + R(J, g')g' = 0 with J(0) = J0 and J'(0) = nabla_{J0} T,
    the initial derivative of the variation through nullity geodesics; this
    is 0 when the nullity is parallel. J is tracked in a parallel frame.
    """
    atlas = as_atlas(space)
    field = atlas.blocks[block].field
    n = atlas.dimension
    x = np.asarray(p, dtype=float)
    cb = curvature_batch(field, x[None], tau_rank)
    if cb.norm[0] <= tau_flat or cb.mu[0] < n - 2:
        raise NotCN2Point(f"point {x.tolist()} is not a nonflat CN2 point")
    g = cb.g[0]
    T = np.asarray(T_dir, dtype=float)
    T = T / np.sqrt(T @ g @ T)
    B = cb.nullity_basis(0)
    if _angles(B, T[None], g).max() > NULLITY_ANGLE_TOL:
        raise NotInNullity("direction is not in the nullity at p")
    J0 = np.asarray(J0, dtype=float)
    if np.max(np.abs(B @ g @ J0)) > NULLITY_ANGLE_TOL * np.sqrt(J0 @ g @ J0):
        raise NotInNullity("J0 is not orthogonal to the nullity")
    dJ0, Th = nabla_unit_nullity(field, x, T, J0)
    E = orthonormal_frame(g).T  # rows orthonormal in g
    j0 = E @ g @ J0
    jd0 = E @ g @ dJ0

    def extra(xx, v, W, s, gg, R):
        j, jd = s[:n], s[n:]
        return np.concatenate([jd, -_jacobi_matrix(R, W, v) @ j])

    y0 = np.concatenate([x, Th, E.ravel(), j0, jd0])
    segs = _run(atlas, block, y0, 0.0, float(t_max),
                _transport_rhs(True, n, n, extra=extra, need_curvature=True), n,
                rtol=tol, atol=tol)
    base = 2 * n + n * n
    ts = np.concatenate([s.t for s in segs])
    js = np.concatenate([s.y[:, base:base + n] for s in segs])
    dev = np.linalg.norm(js - j0, axis=1)
    if return_profile:
        return float(dev.max()), ts, dev
    return float(dev.max())


def _jacobi_matrix(R, W, v):
    """M[a, b] = <R(e_b, v) v, e_a> for frame rows W, lowered tensor R."""
    # <R(X,Y)Z,U> = R(U, Z, X, Y) with R_abcd = <R(e_c, e_d) e_b, e_a>
    return np.einsum("pqrs,ap,q,br,s->ab", R, W, v, W, v)
