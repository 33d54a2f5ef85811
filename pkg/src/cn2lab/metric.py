"""Metrics on single charts and on glued complexes of boxes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadParams, Lost, NotPositiveDefinite, OutOfDomain, SupportViolation
from .exprfield import BinOp, Call, Const, Expr, eval_jet2, evaluate, parse

DOMAIN_TOL = 1e-9


@dataclass(frozen=True)
class ChartSpec:
    coords: tuple[str, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    periodic: tuple[bool, ...] = ()

    def __post_init__(self):
        n = len(self.coords)
        if not 2 <= n <= 4:
            raise BadParams(f"dimension {n} not supported (2..4)")
        if len(set(self.coords)) != n:
            raise BadParams("coordinate names must be distinct")
        if not self.periodic:
            object.__setattr__(self, "periodic", (False,) * n)
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "periodic", tuple(bool(v) for v in self.periodic))
        if not (len(self.lo) == len(self.hi) == len(self.periodic) == n):
            raise BadParams("box and periodic flags must match the dimension")
        for a, b in zip(self.lo, self.hi):
            if not (np.isfinite(a) and np.isfinite(b) and a < b):
                raise BadParams(f"degenerate interval [{a}, {b}]")

    @property
    def dimension(self) -> int:
        return len(self.coords)

    @property
    def lo_array(self):
        return np.array(self.lo)

    @property
    def hi_array(self):
        return np.array(self.hi)

    @property
    def widths(self):
        return self.hi_array - self.lo_array

    def wrap(self, points):
        x = np.array(points, dtype=float)
        lo, w = self.lo_array, self.widths
        for k, per in enumerate(self.periodic):
            if per:
                x[..., k] = lo[k] + np.mod(x[..., k] - lo[k], w[k])
        return x

    def contains(self, points, tol=DOMAIN_TOL):
        x = np.asarray(points, dtype=float)
        return np.all((x >= self.lo_array - tol) & (x <= self.hi_array + tol), axis=-1)


@dataclass(frozen=True, eq=False)
class MetricField:
    """Metric g_ij given by one scalar expression per entry (upper triangle stored)."""

    chart: ChartSpec
    components: tuple[tuple[Expr, ...], ...]
    label: str = ""
    scale: float = 1.0
    jet_mode: str = "ad"

    def __post_init__(self):
        n = self.chart.dimension
        comps = self.components
        if len(comps) != n or any(len(row) != n for row in comps):
            raise BadParams("components must be an n x n array")
        for i in range(n):
            for j in range(i):
                if comps[i][j] != comps[j][i]:
                    raise BadParams(f"g_{i + 1}{j + 1} and g_{j + 1}{i + 1} differ")
        if self.jet_mode not in ("ad", "fd"):
            raise BadParams(f"unknown jet mode {self.jet_mode!r}")

    @classmethod
    def from_entries(cls, chart: ChartSpec, entries: dict, label="", **kw):
        """Build from ``{(i, j): expr or source}`` with 0-based indices.

        Missing diagonal entries default to 1, missing off-diagonal ones to 0.
        """
        n = chart.dimension
        table = [[Const(1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
        for (i, j), e in entries.items():
            if isinstance(e, str):
                e = parse(e, chart.coords)
            table[i][j] = e
            table[j][i] = e
        return cls(chart, tuple(tuple(r) for r in table), label, **kw)

    @property
    def dimension(self) -> int:
        return self.chart.dimension

    def scaled(self, lam: float) -> "MetricField":
        if lam <= 0:
            raise BadParams("scale factor must be positive")
        return MetricField(self.chart, self.components, self.label, self.scale * lam, self.jet_mode)

    def with_jet_mode(self, mode: str) -> "MetricField":
        return MetricField(self.chart, self.components, self.label, self.scale, mode)

    def _unique(self):
        n = self.dimension
        cache = {}
        for i in range(n):
            for j in range(i, n):
                cache.setdefault(self.components[i][j], []).append((i, j))
        return cache

    def values(self, points):
        """g at ``points`` (shape (..., n)) without domain checks."""
        x = np.asarray(points, dtype=float)
        n = self.dimension
        g = np.zeros(x.shape[:-1] + (n, n))
        for expr, slots in self._unique().items():
            v = evaluate(expr, x) if not isinstance(expr, Const) else expr.value
            for i, j in slots:
                g[..., i, j] = v
                g[..., j, i] = v
        return self.scale * g

    def jet(self, points):
        """(g, dg, ddg) at ``points`` with dg[..., i, j, k] = d_k g_ij."""
        if self.jet_mode == "fd":
            return fd_jet(self, points)
        x = np.asarray(points, dtype=float)
        n = self.dimension
        batch = x.shape[:-1]
        g = np.zeros(batch + (n, n))
        dg = np.zeros(batch + (n, n, n))
        ddg = np.zeros(batch + (n, n, n, n))
        for expr, slots in self._unique().items():
            if isinstance(expr, Const):
                for i, j in slots:
                    g[..., i, j] = g[..., j, i] = expr.value
                continue
            jet = eval_jet2(expr, x)
            for i, j in slots:
                g[..., i, j] = g[..., j, i] = jet.value
                dg[..., i, j, :] = dg[..., j, i, :] = jet.gradient
                ddg[..., i, j, :, :] = ddg[..., j, i, :, :] = jet.hessian
        s = self.scale
        return s * g, s * dg, s * ddg


def fd_jet(field: MetricField, points, h1: float = 1e-5, h2: float = 1e-4):
    """Central finite-difference jet of ``field`` (test oracle and fallback)."""
    x = np.asarray(points, dtype=float)
    n = field.dimension
    g = field.values(x)
    dg = np.zeros(g.shape + (n,))
    ddg = np.zeros(g.shape + (n, n))
    eye = np.eye(n)
    for k in range(n):
        dg[..., k] = (field.values(x + h1 * eye[k]) - field.values(x - h1 * eye[k])) / (2 * h1)
        ddg[..., k, k] = (field.values(x + h2 * eye[k]) - 2 * g
                          + field.values(x - h2 * eye[k])) / h2**2
        for l in range(k):
            e = h2 * (eye[k] + eye[l])
            f = h2 * (eye[k] - eye[l])
            mixed = (field.values(x + e) - field.values(x + f)
                     - field.values(x - f) + field.values(x - e)) / (4 * h2**2)
            ddg[..., k, l] = ddg[..., l, k] = mixed
    return g, dg, ddg


def _prepare(field: MetricField, p):
    x = field.chart.wrap(p)
    if x.shape[-1:] != (field.dimension,):
        raise BadParams(f"point has dimension {x.shape[-1:]}, expected {field.dimension}")
    inside = field.chart.contains(x)
    if not np.all(inside):
        bad = x[~inside][0] if x.ndim > 1 else x
        raise OutOfDomain(f"point {bad.tolist()} outside chart box")
    return x


def _check_pd(g, x):
    eig = np.linalg.eigvalsh(g)
    lowest = eig[..., 0]
    if np.any(lowest <= 0):
        idx = np.unravel_index(np.argmin(lowest), lowest.shape) if lowest.ndim else ()
        where = x[idx] if x.ndim > 1 else x
        raise NotPositiveDefinite(where.tolist(), float(np.min(lowest)))


def metric_at(field: MetricField, p):
    x = _prepare(field, p)
    g = field.values(x)
    _check_pd(g, x)
    return g


def metric_jet(field: MetricField, p):
    x = _prepare(field, p)
    g, dg, ddg = field.jet(x)
    _check_pd(g, x)
    return g, dg, ddg


# -- building blocks ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Block:
    """A box carrying a metric, plus the data of its designed perturbation.

    ``surface_axes`` are the axes the conformal factor acts on; the remaining
    axes form the designed nullity (``nullity_basis`` overrides this for
    blocks perturbed along a slanted direction). ``offset`` places the block's local
    coordinates in a global picture and is informational only.
    """

    name: str
    field: MetricField
    offset: tuple[float, ...] = ()
    surface_axes: tuple[int, ...] = ()
    phi: Expr | None = None
    margin: float = 0.0
    nullity_basis: np.ndarray | None = None

    @property
    def chart(self) -> ChartSpec:
        return self.field.chart

    def known_nullity(self) -> np.ndarray | None:
        """Rows spanning the designed nullity (coordinate components), if any."""
        if self.nullity_basis is not None:
            return np.asarray(self.nullity_basis, dtype=float)
        if not self.surface_axes:
            return None
        return np.eye(self.chart.dimension)[list(self.nullity_axes)]

    @property
    def nullity_axes(self) -> tuple[int, ...]:
        if not self.surface_axes:
            return ()
        return tuple(k for k in range(self.chart.dimension) if k not in self.surface_axes)

    @property
    def flat(self) -> bool:
        return self.phi is None


def _collar_points(lo, hi, surface_axes, margin, count, rng):
    """Uniform samples of the box minus the surface box shrunk by ``margin``."""
    n = len(lo)
    out = []
    need = count
    while need > 0:
        x = rng.uniform(lo, hi, size=(4 * need + 64, n))
        inner = np.ones(len(x), dtype=bool)
        for a in surface_axes:
            inner &= (x[:, a] > lo[a] + margin) & (x[:, a] < hi[a] - margin)
        x = x[~inner][:need]
        out.append(x)
        need -= len(x)
    pts = np.concatenate(out)
    # the collar's outer and inner rims are where violations show first
    rims = []
    for a in surface_axes:
        for v in (lo[a], hi[a], lo[a] + margin, hi[a] - margin):
            r = rng.uniform(lo, hi, size=(count // 16 + 1, n))
            r[:, a] = v
            rims.append(r)
    return np.concatenate([pts] + rims)


def make_block(half_widths: Sequence[float], phi, margin: float, *,
               center: Sequence[float] | None = None,
               surface_axes: Sequence[int] = (0, 1),
               coords: Sequence[str] | None = None,
               periodic: Sequence[bool] | None = None,
               name: str = "block", samples: int = 10_000) -> Block:
    """Block with metric e^{2 phi}(sum over surface axes) + flat remaining axes."""
    hw = np.asarray(half_widths, dtype=float)
    n = len(hw)
    if coords is None:
        coords = ("x", "y", "z", "w")[:n]
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    chart = ChartSpec(tuple(coords), tuple(c - hw), tuple(c + hw),
                      tuple(periodic) if periodic is not None else ())
    surface_axes = tuple(int(a) for a in surface_axes)
    if len(surface_axes) != 2 or len(set(surface_axes)) != 2:
        raise BadParams("a block needs exactly two distinct surface axes")
    if isinstance(phi, str):
        phi = parse(phi, chart.coords)
    if margin <= 0 or any(2 * margin >= 2 * hw[a] for a in surface_axes):
        raise BadParams("margin must be positive and leave a nonempty interior")
    if isinstance(phi, Const) and phi.value == 0.0:
        phi = None
    entries = {}
    if phi is not None:
        rng = np.random.default_rng(12345)
        pts = _collar_points(chart.lo_array, chart.hi_array, surface_axes, margin, samples, rng)
        vals = np.abs(evaluate(phi, pts))
        if np.max(vals) >= 1e-15:
            where = pts[np.argmax(vals)]
            raise SupportViolation(
                f"perturbation is {np.max(vals):.3e} at {where.tolist()}, inside the margin collar")
        factor = Call("exp", BinOp("*", Const(2.0), phi))
        entries = {(a, a): factor for a in surface_axes}
    field = MetricField.from_entries(chart, entries, label=name)
    offset = tuple(float(v) for v in c)
    return Block(name, field, offset, surface_axes, phi, float(margin))


def flat_block(lo, hi, name="flat", coords=None) -> Block:
    n = len(lo)
    coords = coords or ("x", "y", "z", "w")[:n]
    chart = ChartSpec(tuple(coords), tuple(lo), tuple(hi))
    return Block(name, MetricField.from_entries(chart, {}, label=name),
                 tuple(0.0 for _ in range(n)))


# -- identifications ---------------------------------------------------------


def signed_permutation(perm: Sequence[int], flip: Sequence[int]) -> np.ndarray:
    """Matrix A with (A x)_i = flip_i * x_{perm_i} (perm is 1-based)."""
    n = len(perm)
    if sorted(perm) != list(range(1, n + 1)) or len(flip) != n:
        raise BadParams(f"invalid permutation {list(perm)}")
    A = np.zeros((n, n))
    for i, (p, s) in enumerate(zip(perm, flip)):
        if s not in (1, -1):
            raise BadParams("flips must be +1 or -1")
        A[i, p - 1] = s
    return A


@dataclass(frozen=True, eq=False)
class Glue:
    """Identification of a patch on a face of ``src`` with a patch on ``dst``.

    A point x on the patch maps to A x + shift; tangent vectors map by A.
    """

    src: int
    axis: int
    side: int
    lo: np.ndarray
    hi: np.ndarray
    dst: int
    A: np.ndarray
    shift: np.ndarray

    @property
    def dst_axis(self) -> int:
        return int(np.flatnonzero(self.A[:, self.axis])[0])

    @property
    def dst_side(self) -> int:
        # outward from src maps to inward into dst
        return int(-self.side * self.A[self.dst_axis, self.axis])

    def map_point(self, x):
        return np.asarray(x) @ self.A.T + self.shift

    def map_vector(self, v):
        return np.asarray(v) @ self.A.T

    def image_box(self):
        a = self.map_point(self.lo)
        b = self.map_point(self.hi)
        return np.minimum(a, b), np.maximum(a, b)

    def inverse(self) -> "Glue":
        lo, hi = self.image_box()
        At = self.A.T.copy()
        return Glue(self.dst, self.dst_axis, self.dst_side, lo, hi, self.src, At, -At @ self.shift)

    def covers(self, x, tol=1e-9):
        """Whether the face projection of ``x`` lies in the patch."""
        inside = np.ones(np.shape(x)[:-1], dtype=bool)
        for k in range(len(self.lo)):
            if k == self.axis:
                continue
            inside &= (x[..., k] >= self.lo[k] - tol) & (x[..., k] <= self.hi[k] + tol)
        return inside

    def is_periodic(self) -> bool:
        return self.src == self.dst and np.array_equal(self.A, np.eye(len(self.lo)))


def make_glue(blocks: Sequence[Block], src: int, axis: int, side: int, dst: int,
              perm: Sequence[int] | None = None, flip: Sequence[int] | None = None,
              shift: Sequence[float] | None = None, patch=None) -> Glue:
    """Glue with a whole face (or ``patch=(lo, hi)``) of ``src`` as domain."""
    chart = blocks[src].chart
    n = chart.dimension
    lo, hi = chart.lo_array.copy(), chart.hi_array.copy()
    if patch is not None:
        lo, hi = np.array(patch[0], dtype=float), np.array(patch[1], dtype=float)
    face = chart.hi[axis] if side > 0 else chart.lo[axis]
    lo[axis] = hi[axis] = face
    A = signed_permutation(perm or list(range(1, n + 1)), flip or [1] * n)
    return Glue(src, axis, side, lo, hi, dst, A,
                np.zeros(n) if shift is None else np.asarray(shift, dtype=float))


class TorusAtlas:
    """Boxes glued along faces by translations, axis permutations and flips.

    ``glues`` lists one direction of each identification; inverses are
    derived. With ``closed`` every face point must be glued.
    """

    def __init__(self, blocks: Sequence[Block], glues: Sequence[Glue], margin: float,
                 label: str = "", closed: bool = True):
        self.blocks = list(blocks)
        self.label = label
        self.margin = float(margin)
        self.closed = closed
        if not self.blocks:
            raise BadParams("an atlas needs at least one block")
        n = self.blocks[0].chart.dimension
        if any(b.chart.dimension != n for b in self.blocks):
            raise BadParams("all blocks must share the dimension")
        all_glues = []
        for g in glues:
            inv = g.inverse()
            all_glues.append(g)
            if not (inv.src == g.src and inv.axis == g.axis and inv.side == g.side
                    and np.allclose(inv.lo, g.lo) and np.allclose(inv.hi, g.hi)):
                all_glues.append(inv)
        self.glues = all_glues
        self._by_face = {}
        for g in self.glues:
            self._by_face.setdefault((g.src, g.axis, g.side), []).append(g)
        self.validate()

    @property
    def dimension(self) -> int:
        return self.blocks[0].chart.dimension

    def validate(self, samples_per_face: int = 64):
        n = self.dimension
        for g in self.glues:
            if not (0 <= g.dst < len(self.blocks)):
                raise BadParams(f"glue refers to missing block {g.dst}")
            dchart = self.blocks[g.dst].chart
            a = g.dst_axis
            face = dchart.hi[a] if g.dst_side > 0 else dchart.lo[a]
            ilo, ihi = g.image_box()
            if abs(ilo[a] - face) > 1e-9 or abs(ihi[a] - face) > 1e-9:
                raise BadParams(f"glue {g.src}:{g.axis}:{g.side:+d} does not land on a face of block {g.dst}")
            if np.any(ilo < dchart.lo_array - 1e-9) or np.any(ihi > dchart.hi_array + 1e-9):
                raise BadParams(f"glue {g.src}:{g.axis}:{g.side:+d} image exceeds block {g.dst}")
        rng = np.random.default_rng(7)
        for bi, block in enumerate(self.blocks):
            chart = block.chart
            for axis in range(n):
                for side in (-1, 1):
                    pts = rng.uniform(chart.lo_array, chart.hi_array, size=(samples_per_face, n))
                    pts[:, axis] = chart.hi[axis] if side > 0 else chart.lo[axis]
                    count = np.zeros(len(pts), dtype=int)
                    for g in self._by_face.get((bi, axis, side), []):
                        count += g.covers(pts, tol=0.0)
                    if np.any(count > 1):
                        raise BadParams(f"face {bi}:{axis}:{side:+d} glued twice")
                    if self.closed and np.any(count == 0):
                        raise BadParams(f"face {bi}:{axis}:{side:+d} not closed up")

    def face_glue(self, block: int, axis: int, side: int, x) -> Glue | None:
        for g in self._by_face.get((block, axis, side), []):
            if g.covers(np.asarray(x)):
                return g
        return None

    def canonicalize(self, block: int, x, v=None):
        """Move ``x`` (and tangent ``v``) into the box it belongs to.

        Returns ``(block, x, v, A)`` where A is the accumulated tangent map.
        """
        x = np.array(x, dtype=float)
        n = self.dimension
        A = np.eye(n)
        v = None if v is None else np.array(v, dtype=float)
        for _ in range(3 * n):
            chart = self.blocks[block].chart
            lo, hi = chart.lo_array, chart.hi_array
            excess = np.maximum(lo - x, x - hi)
            axis = int(np.argmax(excess))
            if excess[axis] <= 0:
                return block, x, v, A
            side = 1 if x[axis] > hi[axis] else -1
            probe = np.clip(x, lo, hi)
            g = self.face_glue(block, axis, side, probe)
            if g is None:
                raise OutOfDomain(f"point {x.tolist()} left block {block} through an open face")
            y = g.map_point(x)
            dchart = self.blocks[g.dst].chart
            a = g.dst_axis
            if y[a] < dchart.lo[a] - 1e-12 or y[a] > dchart.hi[a] + 1e-12:
                raise Lost(f"point {x.tolist()} is more than one crossing from block {block}")
            x, block = y, g.dst
            A = g.A @ A
            if v is not None:
                v = g.map_vector(v)
        raise Lost(f"point {x.tolist()} did not settle after repeated crossings")


def canonicalize(atlas: TorusAtlas, raw, vector=None):
    """(block, point) -> canonical (block, point); with ``vector`` also returns the mapped vector."""
    block, point = raw
    b, x, v, _ = atlas.canonicalize(block, point, vector)
    return (b, x) if vector is None else (b, x, v)


def atlas_from_field(field: MetricField) -> TorusAtlas:
    """Single-block atlas; periodic axes are glued, other faces stay open."""
    block = Block(field.label or "chart", field, tuple(0.0 for _ in range(field.dimension)))
    glues = []
    chart = field.chart
    for k, per in enumerate(chart.periodic):
        if per:
            shift = np.zeros(chart.dimension)
            shift[k] = -chart.widths[k]
            glues.append(make_glue([block], 0, k, +1, 0, shift=shift))
    return TorusAtlas([block], glues, margin=np.inf, label=field.label, closed=False)


def tile_glues(blocks: Sequence[Block], box_lo, box_hi) -> list[Glue]:
    """Glues for blocks tiling a periodic box, all in global coordinates.

    Every pair of faces that touch (possibly across the period) is glued on
    the overlap patch by a translation.
    """
    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    period = box_hi - box_lo
    n = len(period)
    glues = []
    for i, bi in enumerate(blocks):
        for axis in range(n):
            face = bi.chart.hi[axis]
            for j, bj in enumerate(blocks):
                other = bj.chart.lo[axis]
                for wrap in (0.0, period[axis]):
                    if abs(face - (other + wrap)) > 1e-12:
                        continue
                    lo = np.maximum(bi.chart.lo_array, bj.chart.lo_array)
                    hi = np.minimum(bi.chart.hi_array, bj.chart.hi_array)
                    lo[axis] = hi[axis] = face
                    if np.any(np.delete(hi - lo, axis) <= 1e-12):
                        continue
                    shift = np.zeros(n)
                    shift[axis] = -wrap
                    glues.append(Glue(i, axis, 1, lo, hi, j, np.eye(n), shift))
    return glues

