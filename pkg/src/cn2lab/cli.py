"""Command-line entry point: ``cn2lab SUBCOMMAND [flags]``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 when the
input is not CN2 or an invariant suite fails.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import inspect
import json
import sys

import numpy as np

from . import builtins as bi
from . import curvature as cv
from . import flows, graphdetect, specfile, splitting, suites
from .errors import CN2Error, NotCN2Point
from .metric import MetricField

EXIT_OK, EXIT_USAGE, EXIT_NOT_CN2 = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _floats(text: str, name: str):
    try:
        return np.array([float(t) for t in text.replace(";", ",").split(",") if t.strip()])
    except ValueError:
        raise UsageError(f"--{name}: expected comma-separated numbers, got {text!r}") from None


def _rows(text: str, name: str):
    """'1,0,0;0,1,0' -> 2-d array (rows separated by ';')."""
    rows = [_floats(r, name) for r in text.split(";") if r.strip()]
    if len({len(r) for r in rows}) != 1:
        raise UsageError(f"--{name}: rows of unequal length")
    return np.array(rows)


# -- input -------------------------------------------------------------------


def load_space(args):
    if bool(args.builtin) == bool(args.spec):
        raise UsageError("give exactly one of --builtin NAME or --spec PATH")
    space = bi.builtin(args.builtin) if args.builtin else specfile.load(args.spec)
    if args.fd:
        space = with_fd(space)
    return space


def with_fd(space):
    """The same space with every metric differentiated by finite differences."""
    if isinstance(space, MetricField):
        return space.with_jet_mode("fd")
    out = copy.copy(space)
    out.blocks = [dataclasses.replace(b, field=b.field.with_jet_mode("fd")) for b in space.blocks]
    return out


def _field(space, block: int):
    if isinstance(space, MetricField):
        if block:
            raise UsageError("--block applies to atlases only")
        return space
    if not 0 <= block < len(space.blocks):
        raise UsageError(f"--block {block} out of range (atlas has {len(space.blocks)} blocks)")
    return space.blocks[block].field


def _emit(text: str, out: str | None):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


# -- subcommands ---------------------------------------------------------------


def cmd_analyze(args):
    space = load_space(args)
    rep = cv.riemann_scal(_field(space, args.block), _floats(args.point, "point"), args.tau_rank)
    d = rep.to_dict()
    d["class"] = _class_of(rep, args.tau_flat, _field(space, args.block).dimension).value
    _emit(_dump(d), args.out)
    return EXIT_OK


def _class_of(rep, tau_flat, n):
    if rep.norm <= tau_flat:
        return cv.PointClass.FLAT
    return cv.PointClass.NONFLAT_CN2 if rep.nullity_dim >= n - 2 else cv.PointClass.NOT_CN2


def cmd_classify(args):
    space = load_space(args)
    f = _field(space, args.block)
    c = cv.classify(f, _floats(args.point, "point"), args.tau_flat, args.tau_rank)
    _emit(_dump({"point": _floats(args.point, "point").tolist(), "class": c.value}), args.out)
    return EXIT_NOT_CN2 if c is cv.PointClass.NOT_CN2 else EXIT_OK


def cmd_geodesic(args):
    space = load_space(args)
    path = flows.integrate_geodesic(space, _floats(args.point, "point"),
                                    _floats(args.velocity, "velocity"), args.t_max,
                                    args.tol, block=args.block)
    if args.csv:
        _emit(path.to_csv(), args.csv)
    b, x, v = path.end
    _emit(_dump({"end_block": int(b), "end_point": x.tolist(), "end_velocity": v.tolist(),
                 "segments": len(path.segments)}), args.out)
    return EXIT_OK


def cmd_transport(args):
    space = load_space(args)
    verts = _rows(args.vertices, "vertices")
    vecs = _rows(args.vectors, "vectors")
    b, x, W = flows.transport_polyline(space, verts, vecs, block=args.block, tol=args.tol)
    _emit(_dump({"end_block": int(b), "end_point": np.asarray(x).tolist(),
                 "vectors": np.asarray(W).tolist()}), args.out)
    return EXIT_OK


def cmd_holonomy(args):
    space = load_space(args)
    axes = [int(a) - 1 for a in args.axes.split(",")]
    r = _floats(args.ranges, "ranges")
    if len(axes) != 2 or len(r) != 4:
        raise UsageError("--axes needs two axes and --ranges four numbers")
    rep = flows.holonomy_bound_check(space, _floats(args.point, "point"), tuple(axes),
                                     ((r[0], r[1]), (r[2], r[3])), _floats(args.xi, "xi"),
                                     block=args.block, safety=args.safety, samples=args.samples,
                                     tol=args.tol)
    _emit(rep.to_json(), args.out)
    return EXIT_OK


def cmd_riccati(args):
    c0 = _floats(args.c0, "c0")
    if len(c0) != 4:
        raise UsageError("--c0 needs four entries (row major 2x2)")
    ts = _floats(args.t, "t")
    rep = splitting.riccati_report(c0.reshape(2, 2), ts)
    _emit(_dump(rep), args.out)
    return EXIT_OK


def cmd_splitting(args):
    space = load_space(args)
    f = _field(space, args.block)
    p = _floats(args.point, "point")
    hint = _floats(args.hint, "hint") if args.hint else None
    frame = splitting.adapted_frame(f, p, hint, tau_flat=args.tau_flat, tau_rank=args.tau_rank)
    C = splitting.splitting_tensor(f, p, frame, args.h)
    out = {"frame": frame.to_dict(), "splitting_tensor": C.to_dict(),
           "divergence": splitting.divergence_check(f, p, hint, h=args.h, details=True)}
    if args.t_max is not None:
        out["riccati_flow"] = splitting.riccati_field_check(
            space, p, args.t_max, samples=args.samples, block=args.block, hint=hint, h=args.h,
            details=True)
    _emit(_dump(out), args.out)
    return EXIT_OK


def cmd_detect_graph(args):
    space = load_space(args)
    h = 1.0 / args.res
    rep = graphdetect.detect(space, h, kappa=args.kappa, m_cap=args.mcap, rho=args.rho,
                             tau_flat=args.tau_flat, tau_rank=args.tau_rank, tol=args.tol,
                             adapt=args.adapt)
    _emit(rep.to_json(), args.out)
    if args.cells:
        _emit(rep.cells_csv(), args.cells)
    return EXIT_NOT_CN2 if rep.verdict == "NotCN2" else EXIT_OK


def cmd_volume(args):
    space = load_space(args)
    region = None
    if args.region:
        box = _rows(args.region, "region")
        if box.shape[0] != 2:
            raise UsageError("--region needs 'lo;hi'")
        region = (box[0], box[1])
    v, err = graphdetect.volume(space, 1.0 / args.res, region, adapt=args.adapt)
    _emit(_dump({"volume": v, "error_estimate": None if np.isnan(err) else err,
                 "h": 1.0 / args.res}), args.out)
    return EXIT_OK


def _family_doc(name, fn):
    parts = []
    for prm in inspect.signature(fn).parameters.values():
        parts.append(prm.name if prm.default is inspect.Parameter.empty
                     else f"{prm.name}={prm.default!r}")
    sig = "(" + ", ".join(parts) + ")"
    doc = (inspect.getdoc(fn) or "").split("\n")[0]
    return f"{name}{sig}" + (f"  {doc}" if doc else "")


def cmd_builtin(args):
    if args.list:
        lines = [_family_doc(k, v) for k, v in bi.FAMILIES.items()]
        lines.append("flat2, flat3, flat4  shorthand for flat(n)")
        _emit("\n".join(lines), args.out)
        return EXIT_OK
    if not args.name:
        raise UsageError("give a builtin NAME or --list")
    space = bi.builtin(args.name)
    if isinstance(space, MetricField):
        c = space.chart
        d = {"label": space.label, "coords": list(c.coords), "lo": list(c.lo), "hi": list(c.hi),
             "periodic": list(c.periodic)}
    else:
        d = {"label": space.label, "margin": space.margin,
             "blocks": [{"name": b.name, "lo": list(b.chart.lo), "hi": list(b.chart.hi),
                         "offset": list(b.offset), "surface_axes": list(b.surface_axes)}
                        for b in space.blocks],
             "glues": len(space.glues)}
    _emit(_dump(d), args.out)
    return EXIT_OK


def cmd_verify(args):
    if args.suite not in suites.SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(suites.SUITES)}")
    res = suites.run_suite(args.suite, args.seed, args.count)
    for c in res.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.value:.3e} (bound {c.bound:.1e})")
    print(f"{args.suite}: {res.n_passed} passed, {res.n_failed} failed")
    if args.out:
        _emit(res.to_json(), args.out)
    return EXIT_OK if res.passed else EXIT_NOT_CN2


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="cn2lab", description="Numerical toolkit for conullity-two metrics.")
    top.add_argument("--threads", type=int, default=0, help="worker threads (0 = auto); grid phases currently run single-threaded")
    top.add_argument("--fd", action="store_true", help="differentiate metrics by finite differences")
    top.add_argument("--seed", type=int, default=0, help="seed for randomized suites")
    sub = top.add_subparsers(dest="command", parser_class=_Parser, metavar="SUBCOMMAND")
    sub.required = True

    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (0 = auto); grid phases currently run single-threaded")
    common.add_argument("--fd", action="store_true", default=argparse.SUPPRESS,
                        help="differentiate metrics by finite differences")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="seed for randomized suites")
    common.add_argument("--out", help="write the JSON report here instead of stdout")

    space = _Parser(add_help=False)
    space.add_argument("--builtin", help="builtin family, e.g. ex1, flat3, 'cone(0.5)'")
    space.add_argument("--spec", help="path of a metric/atlas spec file")
    space.add_argument("--block", type=int, default=0, help="block index (0-based) in an atlas")
    space.add_argument("--tau-flat", type=float, default=cv.TAU_FLAT, help="flatness threshold")
    space.add_argument("--tau-rank", type=float, default=cv.TAU_RANK, help="relative rank cut")

    def add(name, fn, help_, parents=(common, space)):
        p = sub.add_parser(name, parents=list(parents), help=help_, description=help_)
        p.set_defaults(func=fn)
        return p

    p = add("analyze", cmd_analyze, "curvature, nullity and class at a point")
    p.add_argument("--point", required=True, help="coordinates, comma separated")
    p = add("classify", cmd_classify, "Flat / NonflatCN2 / NotCN2 at a point")
    p.add_argument("--point", required=True, help="coordinates, comma separated")
    p = add("geodesic", cmd_geodesic, "integrate a geodesic across the atlas")
    p.add_argument("--point", required=True, help="start point")
    p.add_argument("--velocity", required=True, help="initial velocity")
    p.add_argument("--t-max", type=float, required=True, help="parameter length")
    p.add_argument("--tol", type=float, default=flows.RTOL, help="integrator tolerance")
    p.add_argument("--csv", help="write the sampled path as CSV here")
    p = add("transport", cmd_transport, "parallel transport along a coordinate polyline")
    p.add_argument("--vertices", required=True, help="points separated by ';'")
    p.add_argument("--vectors", required=True, help="vectors separated by ';'")
    p.add_argument("--tol", type=float, default=flows.RTOL, help="integrator tolerance")
    p = add("holonomy", cmd_holonomy, "holonomy of a coordinate rectangle against its bound")
    p.add_argument("--point", required=True, help="base point of the slice")
    p.add_argument("--axes", required=True, help="two 1-based axes spanning the slice")
    p.add_argument("--ranges", required=True, help="a0,a1,b0,b1")
    p.add_argument("--xi", required=True, help="vector to transport")
    p.add_argument("--safety", type=float, default=flows.HOLONOMY_SAFETY, help="factor on delta")
    p.add_argument("--samples", type=int, default=32, help="curvature samples per side")
    p.add_argument("--tol", type=float, default=flows.RTOL, help="integrator tolerance")
    p = add("riccati", cmd_riccati, "matrix Riccati flow C' = C^2 for a 2x2 C0", parents=(common,))
    p.add_argument("--c0", required=True, help="entries of C0, row major")
    p.add_argument("--t", required=True, help="times, comma separated")
    p = add("splitting", cmd_splitting, "adapted frame and splitting tensor at a point")
    p.add_argument("--point", required=True, help="coordinates")
    p.add_argument("--hint", help="orientation hint for the nullity direction")
    p.add_argument("--h", type=float, default=splitting.H_C, help="difference step")
    p.add_argument("--t-max", type=float, help="also follow the nullity geodesic this far")
    p.add_argument("--samples", type=int, default=20, help="samples along the nullity geodesic")
    p = add("detect-graph", cmd_detect_graph, "grid detection of graph manifold structure")
    p.add_argument("--res", type=int, required=True, help="cells per unit length (h = 1/res)")
    p.add_argument("--kappa", type=float, default=graphdetect.KAPPA, help="density constant")
    p.add_argument("--mcap", type=int, default=graphdetect.M_CAP, help="local finiteness cap")
    p.add_argument("--rho", type=float, help="profile radius (default 4h)")
    p.add_argument("--tol", type=float, help="plane agreement tolerance (default max(1e-4, 10h^2))")
    p.add_argument("--adapt", action="store_true", help="adapt cell sizes to each block")
    p.add_argument("--cells", help="write per-cell CSV here")
    p = add("volume", cmd_volume, "midpoint volume with a Richardson error estimate")
    p.add_argument("--res", type=int, required=True, help="cells per unit length (h = 1/res)")
    p.add_argument("--region", help="box 'lo;hi' in block coordinates")
    p.add_argument("--adapt", action="store_true", help="adapt cell sizes to each block")
    p = add("builtin", cmd_builtin, "list or describe builtin families", parents=(common,))
    p.add_argument("name", nargs="?", help="family with parameters, e.g. 'ex3(6)'")
    p.add_argument("--list", action="store_true", help="list the families")
    p = add("verify", cmd_verify, "run a named invariant suite", parents=(common,))
    p.add_argument("--suite", required=True, help=f"one of: {', '.join(suites.SUITES)}")
    p.add_argument("--count", type=int, default=10, help="random cases per check")
    return top


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 0:
        sys.stderr.write("cn2lab: error: --threads must be >= 0\n")
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"cn2lab: error: {exc}\n")
        return EXIT_USAGE
    except NotCN2Point as exc:
        sys.stderr.write(f"cn2lab: {exc}\n")
        return EXIT_NOT_CN2
    except (CN2Error, OSError) as exc:
        sys.stderr.write(f"cn2lab: error: {type(exc).__name__}: {exc}\n")
        return EXIT_USAGE


def main() -> None:
    raise SystemExit(run())
