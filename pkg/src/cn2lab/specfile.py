"""Line-oriented text format for metrics and glued atlases.

Example::

    [chart]
    dimension = 3
    coords = x, y, z
    box = -1 1, -1 1, -1 1
    periodic = no, yes, yes

    [metric]
    g 1 1 = exp(0.2*bump(2*x)*bump(2*y))
    g 2 2 = exp(0.2*bump(2*x)*bump(2*y))

An atlas replaces ``[metric]`` by one ``[metric NAME]`` section per block
and adds::

    [blocks]
    A offset=0,0,0
    B offset=2,0,0

    [glue]
    A:1:+ B:1:- perm=1,3,2 flip=+,-,+ shift=-2,0,0
    A:2:+ A:2:- shift=0,-2,0

All blocks share the ``[chart]`` box. Axes and permutations are 1-based.
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import BadParams, SpecFileError
from .exprfield import ExprSyntaxError, UnknownIdentifier, parse
from .metric import Block, ChartSpec, Glue, MetricField, TorusAtlas, signed_permutation

_SECTION = re.compile(r"^\[\s*([a-z]+)(?:\s+([A-Za-z_][\w.']*))?\s*\]$")
_ENTRY = re.compile(r"^g\s+(\d+)\s+(\d+)\s*=\s*(.+)$")
_FACE = re.compile(r"^([A-Za-z_][\w.']*):(\d+):([+-])$")
_TRUE = {"yes", "true", "1", "periodic", "y"}
_FALSE = {"no", "false", "0", "n", "open"}


def _floats(text, line, count=None):
    try:
        vals = [float(t) for t in re.split(r"[,\s]+", text.strip()) if t]
    except ValueError as exc:
        raise SpecFileError(f"expected numbers, got {text!r}", line) from exc
    if count is not None and len(vals) != count:
        raise SpecFileError(f"expected {count} numbers, got {len(vals)}", line)
    return vals


def _parse_chart(items, n_line):
    keys = {k: (v, ln) for k, v, ln in items}
    if "coords" not in keys:
        raise SpecFileError("[chart] needs coords", n_line)
    coords = tuple(c.strip() for c in keys["coords"][0].split(",") if c.strip())
    n = len(coords)
    if "dimension" in keys:
        v, ln = keys["dimension"]
        if int(v) != n:
            raise SpecFileError(f"dimension {v} does not match {n} coordinates", ln)
    if "box" not in keys:
        raise SpecFileError("[chart] needs box", n_line)
    v, ln = keys["box"]
    pairs = [p for p in v.split(",")]
    if len(pairs) != n:
        raise SpecFileError(f"box needs {n} intervals", ln)
    lo, hi = [], []
    for p in pairs:
        a, b = _floats(p, ln, 2)
        lo.append(a)
        hi.append(b)
    periodic = [False] * n
    if "periodic" in keys:
        v, ln = keys["periodic"]
        flags = [t.strip().lower() for t in v.split(",")]
        if len(flags) != n or any(f not in _TRUE | _FALSE for f in flags):
            raise SpecFileError(f"periodic needs {n} yes/no flags", ln)
        periodic = [f in _TRUE for f in flags]
    try:
        return ChartSpec(coords, tuple(lo), tuple(hi), tuple(periodic))
    except BadParams as exc:
        raise SpecFileError(str(exc), n_line) from exc


def _parse_metric(chart, items, label):
    entries = {}
    n = chart.dimension
    for text, ln in items:
        m = _ENTRY.match(text)
        if not m:
            raise SpecFileError(f"expected 'g i j = expr', got {text!r}", ln)
        i, j = int(m.group(1)) - 1, int(m.group(2)) - 1
        if not (0 <= i < n and 0 <= j < n):
            raise SpecFileError(f"index out of range in {text!r}", ln)
        try:
            expr = parse(m.group(3), chart.coords)
        except (ExprSyntaxError, UnknownIdentifier) as exc:
            raise SpecFileError(str(exc), ln) from exc
        key = (min(i, j), max(i, j))
        if key in entries and entries[key] != expr:
            raise SpecFileError(f"conflicting entries for g {i + 1} {j + 1}", ln)
        entries[key] = expr
    return MetricField.from_entries(chart, entries, label=label)


def _parse_map(tokens, n, ln):
    opts = {"perm": None, "flip": None, "shift": None}
    for tok in tokens:
        if "=" not in tok:
            raise SpecFileError(f"expected key=value, got {tok!r}", ln)
        k, v = tok.split("=", 1)
        if k not in opts:
            raise SpecFileError(f"unknown map key {k!r}", ln)
        opts[k] = v
    perm = [int(t) for t in opts["perm"].split(",")] if opts["perm"] else list(range(1, n + 1))
    flip = [1] * n
    if opts["flip"]:
        flip = [{"+": 1, "-": -1}.get(t.strip(), 0) for t in opts["flip"].split(",")]
    shift = _floats(opts["shift"], ln, n) if opts["shift"] else [0.0] * n
    try:
        A = signed_permutation(perm, flip)
    except BadParams as exc:
        raise SpecFileError(str(exc), ln) from exc
    return A, np.array(shift)


def loads(text: str, label: str = "specfile"):
    """Parse spec text into a MetricField (single chart) or a TorusAtlas."""
    sections: list[tuple[str, str | None, int, list]] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            sections.append((m.group(1), m.group(2), ln, []))
            continue
        if line.startswith("["):
            raise SpecFileError(f"malformed section header {line!r}", ln)
        if not sections:
            raise SpecFileError("content before the first section", ln)
        sections[-1][3].append((line, ln))

    chart = None
    metrics = {}
    block_lines = None
    glue_lines = []
    for kind, name, ln, items in sections:
        if kind == "chart":
            kv = []
            for text, iln in items:
                if "=" not in text:
                    raise SpecFileError(f"expected key = value, got {text!r}", iln)
                k, v = text.split("=", 1)
                kv.append((k.strip().lower(), v.strip(), iln))
            chart = _parse_chart(kv, ln)
        elif kind == "metric":
            if chart is None:
                raise SpecFileError("[metric] before [chart]", ln)
            metrics[name] = _parse_metric(chart, items, name or label)
        elif kind == "blocks":
            block_lines = items
        elif kind == "glue":
            glue_lines.extend(items)
        else:
            raise SpecFileError(f"unknown section [{kind}]", ln)
    if chart is None:
        raise SpecFileError("missing [chart] section")
    if block_lines is None:
        if None not in metrics:
            raise SpecFileError("missing [metric] section")
        return metrics[None]

    n = chart.dimension
    blocks, index = [], {}
    for text, ln in block_lines:
        parts = text.split()
        name = parts[0]
        offset = [0.0] * n
        for tok in parts[1:]:
            if tok.startswith("offset="):
                offset = _floats(tok[7:], ln, n)
            else:
                raise SpecFileError(f"unknown block option {tok!r}", ln)
        if name not in metrics:
            raise SpecFileError(f"block {name!r} has no [metric {name}] section", ln)
        index[name] = len(blocks)
        blocks.append(Block(name, metrics[name], tuple(offset)))
    glues = []
    for text, ln in glue_lines:
        parts = text.split()
        if len(parts) < 2:
            raise SpecFileError("glue needs a source and a target face", ln)
        faces = []
        for tok in parts[:2]:
            m = _FACE.match(tok)
            if not m or m.group(1) not in index or not 1 <= int(m.group(2)) <= n:
                raise SpecFileError(f"bad face {tok!r}", ln)
            faces.append((index[m.group(1)], int(m.group(2)) - 1, 1 if m.group(3) == "+" else -1))
        A, shift = _parse_map(parts[2:], n, ln)
        (src, axis, side), (dst, daxis, dside) = faces
        lo, hi = chart.lo_array.copy(), chart.hi_array.copy()
        lo[axis] = hi[axis] = chart.hi[axis] if side > 0 else chart.lo[axis]
        glue = Glue(src, axis, side, lo, hi, dst, A, shift)
        if glue.dst_axis != daxis or glue.dst_side != dside:
            raise SpecFileError("map does not send the source face to the target face", ln)
        glues.append(glue)
    try:
        return TorusAtlas(blocks, glues, margin=np.inf, label=label)
    except BadParams as exc:
        raise SpecFileError(str(exc)) from exc


def load(path) -> MetricField | TorusAtlas:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), label=str(path))
