"""Builtin example metrics and glued example manifolds."""

from __future__ import annotations

import math
import re
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import BadParams, SupportViolation
from .exprfield import BinOp, Const, Expr, differentiate, evaluate, parse
from .metric import (
    Block,
    ChartSpec,
    MetricField,
    TorusAtlas,
    flat_block,
    make_block,
    make_glue,
    tile_glues,
)

TWO_PI = 2.0 * math.pi


def _num(v: float) -> str:
    return repr(float(v))


# -- single charts -----------------------------------------------------------


def flat(n: int = 3, box: Sequence[Sequence[float]] | None = None,
         periodic: Sequence[bool] | None = None) -> MetricField:
    if not 2 <= n <= 4:
        raise BadParams("flat(n) needs 2 <= n <= 4")
    lo, hi = (np.full(n, -1.0), np.full(n, 1.0)) if box is None else box
    chart = ChartSpec(("x", "y", "z", "w")[:n], tuple(lo), tuple(hi),
                      tuple(periodic) if periodic else ())
    return MetricField.from_entries(chart, {}, label=f"flat({n})")


def cone(c: float = 1 / math.sqrt(2), r_min: float = 0.5, r_max: float = 4.0,
         theta_margin: float = 0.3) -> MetricField:
    """dr^2 + c^2 r^2 (dth^2 + sin^2 th dph^2)."""
    if not (c > 0 and 0 < r_min < r_max and 0 < theta_margin < math.pi / 2):
        raise BadParams("cone needs c > 0, 0 < r_min < r_max and a theta margin in (0, pi/2)")
    chart = ChartSpec(("r", "th", "ph"), (r_min, theta_margin, 0.0),
                      (r_max, math.pi - theta_margin, TWO_PI), (False, False, True))
    c2 = _num(c * c)
    return MetricField.from_entries(chart, {
        (1, 1): f"{c2}*r^2",
        (2, 2): f"{c2}*r^2*sin(th)^2",
    }, label=f"cone({c:g})")


def sphere_product(K: float = 1.0, theta_margin: float = 0.3, z_period: float = 2.0) -> MetricField:
    """(1/K)(dth^2 + sin^2 th dph^2) + dz^2, a round surface times a line."""
    if not (K > 0 and 0 < theta_margin < math.pi / 2):
        raise BadParams("sphere_product needs K > 0 and a theta margin in (0, pi/2)")
    chart = ChartSpec(("th", "ph", "z"), (theta_margin, 0.0, -z_period / 2),
                      (math.pi - theta_margin, TWO_PI, z_period / 2), (False, True, True))
    k = _num(1.0 / K)
    return MetricField.from_entries(chart, {
        (0, 0): k,
        (1, 1): f"{k}*sin(th)^2",
    }, label=f"sphere_product({K:g})")


def round_sphere(n: int = 3, theta_margin: float = 0.3) -> MetricField:
    """Unit round sphere in polar angles (a1, ..., a_{n-1}, ph)."""
    if not 2 <= n <= 4:
        raise BadParams("round_sphere(n) needs 2 <= n <= 4")
    names = ("a", "b", "c")[: n - 1] + ("ph",)
    lo = [theta_margin] * (n - 1) + [0.0]
    hi = [math.pi - theta_margin] * (n - 1) + [TWO_PI]
    chart = ChartSpec(names, tuple(lo), tuple(hi), (False,) * (n - 1) + (True,))
    entries = {}
    factor = ""
    for k in range(1, n):
        factor += ("*" if factor else "") + f"sin({names[k - 1]})^2"
        entries[(k, k)] = factor
    return MetricField.from_entries(chart, entries, label=f"round_sphere({n})")


def strip_cylinder(eps: float = 0.05, T: float = 6.0) -> MetricField:
    """dr^2 + exp(-1/(1-r^2) - t^2) dt^2 on [-1+eps, 1-eps] x [-T, T]."""
    if not (0 < eps < 1 and T > 0):
        raise BadParams("strip_cylinder needs 0 < eps < 1 and T > 0")
    chart = ChartSpec(("r", "t"), (-1 + eps, -T), (1 - eps, T))
    return MetricField.from_entries(chart, {(1, 1): "exp(-1/(1-r^2)-t^2)"},
                                    label="strip_cylinder")


def hypersurface_graph(f, n: int = 3, box: Sequence[Sequence[float]] | None = None) -> MetricField:
    """Induced metric delta_ij + f_i f_j of the graph of f in Euclidean space."""
    coords = ("x", "y", "z", "w")[:n]
    if isinstance(f, str):
        f = parse(f, coords)
    lo, hi = (np.full(n, -1.0), np.full(n, 1.0)) if box is None else box
    chart = ChartSpec(coords, tuple(lo), tuple(hi))
    grads = [differentiate(f, k) for k in range(n)]
    entries: dict[tuple[int, int], Expr] = {}
    for i in range(n):
        for j in range(i, n):
            prod = BinOp("*", grads[i], grads[j])
            entries[(i, j)] = BinOp("+", Const(1.0), prod) if i == j else prod
    return MetricField.from_entries(chart, entries, label="hypersurface_graph")


# -- glued examples ----------------------------------------------------------


def _bump_factor(coord: str, center: float, radius: float) -> str:
    return f"bump((({coord})-({_num(center)}))/{_num(radius)})"


def ex1(amplitude: float = 0.1) -> TorusAtlas:
    """Two flat-product cubes with orthogonal nullity, glued by a quarter turn."""
    phi = f"{_num(amplitude)}*bump(2*x)*bump(2*y)"
    periodic = (False, True, True)
    b0 = make_block((1, 1, 1), phi, 0.5, periodic=periodic, name="ex1.A")
    b1 = make_block((1, 1, 1), phi, 0.5, periodic=periodic, name="ex1.B")
    b1 = Block(b1.name, b1.field, (2.0, 0.0, 0.0), b1.surface_axes, b1.phi, b1.margin)
    blocks = [b0, b1]
    glues = [
        make_glue(blocks, 0, 0, +1, 1, perm=(1, 3, 2), flip=(1, -1, 1), shift=(-2, 0, 0)),
        make_glue(blocks, 1, 0, +1, 0, perm=(1, 3, 2), flip=(1, 1, -1), shift=(-2, 0, 0)),
    ]
    for b in (0, 1):
        for axis in (1, 2):
            shift = np.zeros(3)
            shift[axis] = -2.0
            glues.append(make_glue(blocks, b, axis, +1, b, shift=shift))
    return TorusAtlas(blocks, glues, margin=0.5, label="ex1")


def _global_block(lo, hi, surface_axes, amplitude, radius_frac, margin, name):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    centre = 0.5 * (lo + hi)
    names = ("x", "y", "z")
    factors = [_bump_factor(names[a], centre[a], radius_frac[i] * (hi[a] - lo[a]))
               for i, a in enumerate(surface_axes)]
    phi = f"{_num(amplitude)}*" + "*".join(factors)
    return make_block(0.5 * (hi - lo), phi, margin, center=centre,
                      surface_axes=surface_axes, name=name)


def ex2(amplitude: float = 0.2) -> TorusAtlas:
    """Pinwheel of three perturbed slabs and two flat cubes in the 2-periodic box."""
    r = (0.375, 0.375)
    blocks = [
        _global_block((1, 0, 0), (2, 2, 1), (0, 2), amplitude, r, 0.125, "ex2.A"),
        _global_block((0, 1, 0), (1, 2, 2), (0, 1), amplitude, r, 0.125, "ex2.B"),
        _global_block((0, 0, 1), (2, 1, 2), (1, 2), amplitude, r, 0.125, "ex2.C"),
        flat_block((0, 0, 0), (1, 1, 1), "ex2.F0"),
        flat_block((1, 1, 1), (2, 2, 2), "ex2.F1"),
    ]
    glues = tile_glues(blocks, (0, 0, 0), (2, 2, 2))
    return TorusAtlas(blocks, glues, margin=0.125, label="ex2")


def _nested_slabs(N: int, make_perturbed) -> TorusAtlas:
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise BadParams("depth N must be an integer >= 1")
    blocks = []
    for n in range(1, N + 1):
        a, b = 2.0 ** (1 - n), 2.0 ** (2 - n)
        blocks.append(make_perturbed(n, a, b, f"C{n}"))
        blocks.append(make_perturbed(n, -b, -a, f"C{n}'"))
    w = 2.0 ** (1 - N)
    blocks.append(flat_block((-w, -1, -1), (w, 1, 1), "filler"))
    glues = tile_glues(blocks, (-2, -1, -1), (2, 1, 1))
    margin = min(b.margin for b in blocks if not b.flat)
    return TorusAtlas(blocks, glues, margin=margin)


def ex3(N: int = 4, amplitude: float = 0.2) -> TorusAtlas:
    """Slabs of halving width accumulating at x=0, nullity alternating z, y."""

    def perturbed(n, a, b, name):
        surface = (0, 1) if n % 2 == 1 else (0, 2)
        w = b - a
        return _global_block((a, -1, -1), (b, 1, 1), surface, amplitude,
                             (0.35, 0.25), 0.15 * w, f"ex3.{name}")

    atlas = _nested_slabs(N, perturbed)
    atlas.label = f"ex3({N})"
    return atlas


def parse_slope(s) -> tuple[int, int]:
    """A rational slope q/p given as "q/p", Fraction, int or (p, q) pair -> (p, q)."""
    if isinstance(s, (tuple, list)) and len(s) == 2:
        p, q = int(s[0]), int(s[1])
    else:
        frac = Fraction(str(s).strip()) if not isinstance(s, Fraction) else s
        p, q = frac.denominator, frac.numerator
    if p == 0 and q == 0:
        raise BadParams("slope direction must be nonzero")
    g = math.gcd(p, q)
    return p // g, q // g


def _tube_block(n, a, b, slope, amplitude, name):
    """Slab [a,b] x T^2 with a conformal bump around the closed line of ``slope``.

    In the (y, z) torus the line direction is (p, q)/L; u = (q y - p z)/L is the
    normal coordinate. The metric is e^{2 phi}(dx^2 + du^2) + dv^2.
    """
    p, q = slope
    L = math.hypot(p, q)
    cx = 0.5 * (a + b)
    xr = 4.0 ** (-n)
    w = b - a
    if xr >= 0.5 * w:
        raise BadParams("tube radius does not fit in the slab")
    # |sin(pi s/2)| < sin(pi rho/2) is a tube of normal radius rho/L around the line
    rho = 0.4
    tube = (f"bump(sin(pi*({q}*y-({p})*z)/2)/{_num(math.sin(math.pi * rho / 2))})")
    phi_src = f"{_num(amplitude)}*{_bump_factor('x', cx, xr)}*{tube}"
    chart = ChartSpec(("x", "y", "z"), (a, -1, -1), (b, 1, 1))
    phi = parse(phi_src, chart.coords)
    margin = 0.5 * w - xr
    rng = np.random.default_rng(12345)
    pts = rng.uniform(chart.lo_array, chart.hi_array, size=(10_000, 3))
    pts[:, 0] = np.where(pts[:, 0] < cx, a + (pts[:, 0] - a) * margin / (cx - a),
                         b - (b - pts[:, 0]) * margin / (b - cx))
    if np.max(np.abs(evaluate(phi, pts))) >= 1e-15:
        raise SupportViolation(f"tube perturbation of {name} reaches the slab faces")
    e2 = f"exp(2*{phi_src})"
    L2 = _num(L * L)
    entries = {
        (0, 0): e2,
        (1, 1): f"({e2}*{q * q}+{p * p})/{L2}",
        (2, 2): f"({e2}*{p * p}+{q * q})/{L2}",
        (1, 2): f"({p * q})*(1-{e2})/{L2}",
    }
    if p * q == 0:
        entries.pop((1, 2))
    field = MetricField.from_entries(chart, entries, label=name)
    return Block(name, field, (cx, 0.0, 0.0), (), phi, margin,
                 nullity_basis=np.array([[0.0, p / L, q / L]]))


def ex4(N: int = 3, slopes: Sequence | None = None, amplitude: float = 0.2) -> TorusAtlas:
    """Like ex3, with each slab perturbed in a tube around a closed line of slope slopes[n]."""
    if slopes is None:
        slopes = [Fraction(1, n) for n in range(1, N + 1)]
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise BadParams("depth N must be an integer >= 1")
    if len(slopes) != N:
        raise BadParams(f"ex4 needs {N} slopes, got {len(slopes)}")
    pq = [parse_slope(s) for s in slopes]

    def perturbed(n, a, b, name):
        return _tube_block(n, a, b, pq[n - 1], amplitude, f"ex4.{name}")

    atlas = _nested_slabs(N, perturbed)
    atlas.label = f"ex4({N})"
    return atlas


# -- dispatch ----------------------------------------------------------------

FAMILIES = {
    "flat": flat,
    "cone": cone,
    "sphere_product": sphere_product,
    "round_sphere": round_sphere,
    "strip_cylinder": strip_cylinder,
    "hypersurface_graph": hypersurface_graph,
    "ex1": ex1,
    "ex2": ex2,
    "ex3": ex3,
    "ex4": ex4,
}

EXAMPLES = ("ex1", "ex2", "ex3", "ex4")

_CALL_RE = re.compile(r"^\s*([a-z_0-9]+?)\s*(?:\((.*)\))?\s*$", re.S)


def _split_args(text: str) -> list[str]:
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur.strip())
    return parts


def _literal(text: str):
    text = text.strip()
    if text.startswith("["):
        return [_literal(t) for t in _split_args(text[1:-1])]
    if "/" in text and re.fullmatch(r"-?\d+/\d+", text):
        return Fraction(text)
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if text in ("pi",):
        return math.pi
    return text.strip("'\"")


def builtin(name: str, *args, **kwargs):
    """Construct a builtin family, e.g. ``builtin("cone", 0.5)``.

    ``name`` may also carry call syntax: ``"ex3(6)"``, ``"flat3"``,
    ``"hypersurface_graph(x^2/2+y^2/2)"``.
    """
    m = re.fullmatch(r"\s*flat([234])\s*", name)
    if m:
        return flat(int(m.group(1)))
    m = _CALL_RE.match(name)
    if not m or m.group(1) not in FAMILIES:
        raise BadParams(f"unknown builtin family {name!r}")
    family = m.group(1)
    if m.group(2) is not None:
        raw = _split_args(m.group(2))
        if family == "hypersurface_graph":
            args = (raw[0],) + tuple(_literal(t) for t in raw[1:]) + args
        else:
            args = tuple(_literal(t) for t in raw) + args
    try:
        return FAMILIES[family](*args, **kwargs)
    except TypeError as exc:
        raise BadParams(f"bad parameters for {family}: {exc}") from exc


def assemble_example(name: str, params: dict | None = None) -> TorusAtlas:
    if name not in EXAMPLES:
        raise BadParams(f"unknown example {name!r}")
    return builtin(name, **(params or {}))
