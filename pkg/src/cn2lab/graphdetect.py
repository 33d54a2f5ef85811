"""Grid-scale detection of graph manifold structure on glued atlases.

Pipeline: sample curvature at cell centres, group nonflat cells into
components, certify parallel nullity inside each component, extend the
nullity planes into the flat region leaf by leaf, then read off separating
sheets, boundary profiles and a verdict.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .curvature import TAU_FLAT, TAU_RANK, christoffel_from_jet, curvature_from_jet
from .exprfield import Const
from .errors import BadParams, ResolutionTooCoarse
from .flows import as_atlas
from .metric import TorusAtlas

KAPPA = 1.0
M_CAP = 8
RHO_CELLS = 4
TOL_CYL = 1e-4
CHUNK = 32_768
AXIS_TOL = 1e-6

NONFLAT, EXTENDED, BOUNDARY, UNRESOLVED, UNLABELED = 0, 1, 2, 3, -1
LABEL_NAMES = {NONFLAT: "Nonflat", EXTENDED: "Extended", BOUNDARY: "Boundary",
               UNRESOLVED: "Unresolved", UNLABELED: "Unlabeled"}


def default_tol(h: float) -> float:
    return max(1e-4, 10.0 * h * h)


# -- grid --------------------------------------------------------------------


@dataclass
class GridSample:
    atlas: TorusAtlas
    h: float
    shapes: list          # cells per axis for each block
    steps: list           # cell size per axis for each block
    starts: np.ndarray    # first global cell index of each block
    block: np.ndarray     # (N,) block of each cell
    center: np.ndarray    # (N, n) cell centre in block coordinates
    weight: np.ndarray    # (N,) sqrt(det g) * cell volume
    g: np.ndarray         # (N, n, n)
    gamma: np.ndarray     # (N, n, n, n)
    scal: np.ndarray
    norm: np.ndarray
    mu: np.ndarray
    plane: np.ndarray     # (N, n-2, n) nullity rows where nonflat, else NaN
    nonflat: np.ndarray   # bool
    not_cn2: np.ndarray   # bool
    tau_flat: float
    tau_rank: float
    # adjacency: edge e joins u[e] -> v[e]; A maps u-vectors to v-vectors at the
    # crossing, P is the parallel transport along the centre-to-centre segment
    eu: np.ndarray = None
    ev: np.ndarray = None
    eA: np.ndarray = None
    eP: np.ndarray = None
    eperm: np.ndarray = None   # axis permutation of eA (A e_k = +-e_perm[k])
    eaxis: np.ndarray = None   # axis and side of the face of u the edge leaves through
    eside: np.ndarray = None
    nbr: np.ndarray = None     # (N, n, 2) neighbour cell or -1
    nbr_edge: np.ndarray = None  # (N, n, 2) edge index
    nbr_fwd: np.ndarray = None   # (N, n, 2) True when the cell is the u side
    open_face: np.ndarray = None  # (N,) cell touches a face without identification

    @property
    def n_cells(self) -> int:
        return len(self.block)

    @property
    def dimension(self) -> int:
        return self.center.shape[1]

    def edge_map(self, e: int, forward: bool):
        """(transport, tangent map, axis permutation) along edge e in the given direction."""
        if forward:
            return self.eP[e], self.eA[e], self.eperm[e]
        inv = np.empty_like(self.eperm[e])
        inv[self.eperm[e]] = np.arange(len(inv))
        return np.linalg.inv(self.eP[e]), self.eA[e].T, inv


def _block_grid(chart, h, adapt):
    w = chart.widths
    counts = []
    for k in range(len(w)):
        c = w[k] / h
        r = int(round(c))
        if abs(c - r) > 1e-9 * max(1.0, c):
            if not adapt:
                raise BadParams(f"h={h} does not divide block width {w[k]}")
            r = int(np.ceil(c - 1e-9))
        if adapt:
            r = max(r, 2)
        if r < 2:
            raise ResolutionTooCoarse(f"block width {w[k]} gives fewer than 2 cells at h={h}")
        counts.append(r)
    counts = np.array(counts)
    return counts, w / counts


def sample(space, h: float, tau_flat: float = TAU_FLAT, tau_rank: float = TAU_RANK,
           adapt: bool = False, transport_steps: int = 2) -> GridSample:
    """Curvature and nullity at every cell centre plus the cell adjacency."""
    atlas = as_atlas(space)
    n = atlas.dimension
    shapes, steps, starts = [], [], []
    total = 0
    for b in atlas.blocks:
        c, s = _block_grid(b.chart, h, adapt)
        shapes.append(c)
        steps.append(s)
        starts.append(total)
        total += int(np.prod(c))
    starts = np.array(starts)
    block = np.empty(total, dtype=int)
    center = np.empty((total, n))
    for bi, b in enumerate(atlas.blocks):
        c, s = shapes[bi], steps[bi]
        idx = np.indices(c).reshape(n, -1).T
        sl = slice(starts[bi], starts[bi] + len(idx))
        block[sl] = bi
        center[sl] = b.chart.lo_array + (idx + 0.5) * s

    g = np.empty((total, n, n))
    gamma = np.empty((total, n, n, n))
    scal = np.empty(total)
    norm = np.empty(total)
    mu = np.empty(total, dtype=int)
    plane = np.full((total, max(n - 2, 0), n), np.nan)
    for bi, b in enumerate(atlas.blocks):
        lo = starts[bi]
        hi = lo + int(np.prod(shapes[bi]))
        for a in range(lo, hi, CHUNK):
            z = min(a + CHUNK, hi)
            x = center[a:z]
            gj, dg, ddg = b.field.jet(x)
            cb = curvature_from_jet(x, gj, dg, ddg, tau_rank)
            g[a:z], gamma[a:z], scal[a:z] = gj, cb.gamma, cb.scal
            norm[a:z], mu[a:z] = cb.norm, cb.mu
            # last n-2 singular directions span the nullity when mu = n-2
            basis = np.einsum("nij,njk->nik", cb.frame, cb.directions[:, :, 2:])
            plane[a:z] = np.swapaxes(basis, 1, 2)
    # calibrate the flatness threshold on blocks whose metric is constant
    known_flat = [bi for bi, b in enumerate(atlas.blocks)
                  if all(isinstance(e, Const) for row in b.field.components for e in row)]
    if known_flat:
        mask = np.isin(block, known_flat)
        tau_flat = max(tau_flat, 10.0 * float(norm[mask].max(initial=0.0)))
    nonflat = norm > tau_flat
    not_cn2 = nonflat & (mu < n - 2)
    plane[~nonflat | not_cn2] = np.nan
    vol = np.array([np.prod(steps[bi]) for bi in range(len(atlas.blocks))])[block]
    weight = np.sqrt(np.linalg.det(g)) * vol
    smp = GridSample(atlas, h, shapes, steps, starts, block, center, weight, g, gamma, scal,
                     norm, mu, plane, nonflat, not_cn2, tau_flat, tau_rank)
    _build_adjacency(smp)
    _edge_transport(smp, transport_steps)
    return smp


def _cell_index(smp: GridSample, bi: int, x):
    """Global index of the cell of block bi containing points x (clipped into the box)."""
    chart = smp.atlas.blocks[bi].chart
    c = smp.shapes[bi]
    idx = np.floor((x - chart.lo_array) / smp.steps[bi]).astype(int)
    idx = np.clip(idx, 0, c - 1)
    return smp.starts[bi] + np.ravel_multi_index(tuple(idx.T), tuple(c))


def _build_adjacency(smp: GridSample):
    atlas = smp.atlas
    n = smp.dimension
    N = smp.n_cells
    us, vs, As, keys = [], [], [], []
    nbr = np.full((N, n, 2), -1)
    open_face = np.zeros(N, dtype=bool)
    eye = np.eye(n)
    for bi, b in enumerate(atlas.blocks):
        c = smp.shapes[bi]
        lo = smp.starts[bi]
        cnt = int(np.prod(c))
        gidx = np.arange(lo, lo + cnt)
        idx = np.indices(c).reshape(n, -1).T
        for k in range(n):
            for si, side in enumerate((-1, 1)):
                j = idx.copy()
                j[:, k] += side
                inside = (j[:, k] >= 0) & (j[:, k] < c[k])
                src = gidx[inside]
                dst = lo + np.ravel_multi_index(tuple(j[inside].T), tuple(c))
                nbr[src, k, si] = dst
                us.append(src)
                vs.append(dst)
                As.append(np.broadcast_to(eye, (len(src), n, n)))
                keys.append(np.stack([src, np.full(len(src), k), np.full(len(src), side)], 1))
                # faces: map the face centre through the glue covering it
                on_face = gidx[~inside]
                if not len(on_face):
                    continue
                x = smp.center[on_face].copy()
                x[:, k] = b.chart.hi[k] if side > 0 else b.chart.lo[k]
                found = np.zeros(len(x), dtype=bool)
                for glue in atlas._by_face.get((bi, k, side), []):
                    sel = glue.covers(x) & ~found
                    if not sel.any():
                        continue
                    found |= sel
                    y = glue.map_point(x[sel])
                    da, ds = glue.dst_axis, glue.dst_side
                    y[:, da] -= ds * 0.5 * smp.steps[glue.dst][da]
                    dst = _cell_index(smp, glue.dst, y)
                    src = on_face[sel]
                    nbr[src, k, si] = dst
                    us.append(src)
                    vs.append(dst)
                    As.append(np.broadcast_to(glue.A, (len(src), n, n)))
                    keys.append(np.stack([src, np.full(len(src), k), np.full(len(src), side)], 1))
                open_face[on_face[~found]] = True
    u = np.concatenate(us)
    v = np.concatenate(vs)
    A = np.concatenate(As)
    key = np.concatenate(keys)
    # keep each undirected edge once, from its lower-indexed end
    keep = u < v
    u, v, A, key = u[keep], v[keep], A[keep], key[keep]
    order = np.lexsort((key[:, 2], key[:, 1], u))
    u, v, A, key = u[order], v[order], np.ascontiguousarray(A[order]), key[order]
    perm = np.argmax(np.abs(A), axis=1)
    nbr_edge = np.full((N, n, 2), -1)
    nbr_fwd = np.zeros((N, n, 2), dtype=bool)
    side_idx = (key[:, 2] > 0).astype(int)
    nbr_edge[u, key[:, 1], side_idx] = np.arange(len(u))
    nbr_fwd[u, key[:, 1], side_idx] = True
    # the v end: the face of v through which the edge arrives
    arr_axis = perm[np.arange(len(u)), key[:, 1]]
    arr_sign = A[np.arange(len(u)), arr_axis, key[:, 1]] * key[:, 2]
    arr_side = (arr_sign < 0).astype(int)  # arriving along +axis means entering through the - face
    nbr_edge[v, arr_axis, arr_side] = np.arange(len(u))
    smp.eu, smp.ev, smp.eA, smp.eperm = u, v, A, perm
    smp.eaxis, smp.eside = key[:, 1], key[:, 2]
    smp.nbr, smp.nbr_edge, smp.nbr_fwd, smp.open_face = nbr, nbr_edge, nbr_fwd, open_face


def _edge_transport(smp: GridSample, substeps: int):
    """Parallel transport along each edge's centre-face-centre segment by RK4.

    Edges on which the Christoffel symbols vanish at every stage point get
    the tangent map of the crossing directly.
    """
    n = smp.dimension
    E = len(smp.eu)
    P = smp.eA.copy()
    if E == 0:
        smp.eP = P
        return
    atlas = smp.atlas
    u, v, A = smp.eu, smp.ev, smp.eA
    # step vector in u coordinates and in v coordinates
    key_axis, key_side = smp.eaxis, smp.eside
    hu = np.array(smp.steps, dtype=float)[smp.block[u], key_axis]
    du = np.zeros((E, n))
    du[np.arange(E), key_axis] = key_side * hu
    dv = np.einsum("eij,ej->ei", A, du)
    ss = np.linspace(0.0, 1.0, 2 * substeps + 1)
    gam_s = np.zeros((len(ss), E, n, n, n))
    gam_s[0] = smp.gamma[u]
    # Christoffels at the far end, pulled back to u coordinates
    twisted = np.flatnonzero(np.any(A != np.eye(n), axis=(1, 2)))

    def pull(G):
        G = G.copy()
        a = A[twisted]
        G[twisted] = np.einsum("emk,emab,eai,ebj->ekij", a, G[twisted], a, a, optimize=True)
        return G

    gam_s[-1] = pull(smp.gamma[v])
    live = np.any(gam_s[0] != 0, axis=(1, 2, 3)) | np.any(gam_s[-1] != 0, axis=(1, 2, 3))
    for j in range(1, len(ss) - 1):
        s = ss[j]
        first = s <= 0.5
        pts = smp.center[u] + s * du if first else smp.center[v] - (1 - s) * dv
        owner = smp.block[u] if first else smp.block[v]
        G = np.zeros((E, n, n, n))
        for bi in np.unique(owner):
            sel = owner == bi
            # points on a face are evaluated in the chart they were computed from
            for a in range(0, int(sel.sum()), CHUNK):
                ids = np.flatnonzero(sel)[a:a + CHUNK]
                gj, dg, _ = atlas.blocks[bi].field.jet(pts[ids])
                G[ids] = christoffel_from_jet(gj, dg)
        gam_s[j] = G if first else pull(G)
        live |= np.any(gam_s[j] != 0, axis=(1, 2, 3))
    ids = np.flatnonzero(live)
    if len(ids):
        W = np.broadcast_to(np.eye(n), (len(ids), n, n)).copy()  # columns are transported vectors
        d = du[ids]
        G = gam_s[:, ids]

        def f(j, W):
            return -np.einsum("ekij,ei,ejm->ekm", G[j], d, W)

        for st in range(substeps):
            j0 = 2 * st
            k1 = f(j0, W)
            k2 = f(j0 + 1, W + 0.5 * k1)
            k3 = f(j0 + 1, W + 0.5 * k2)
            k4 = f(j0 + 2, W + k3)
            W = W + (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        P[ids] = np.einsum("eij,ejk->eik", A[ids], W)
    smp.eP = P


# -- nonflat components and the cylinder certificate ---------------------------


def _relabel_by_min_index(labels, mask):
    """Renumber labels of masked cells 0, 1, ... in order of their smallest cell index."""
    out = np.full(len(labels), -1)
    ids = np.flatnonzero(mask)
    seen = {}
    for i in ids:
        l = labels[i]
        if l not in seen:
            seen[l] = len(seen)
        out[i] = seen[l]
    return out, len(seen)


def components(smp: GridSample, tol: float | None = None):
    """(labels per cell, count): connected components of nonflat cells.

    Neighbouring nonflat cells are joined only when their nullity planes
    agree after transport, since a jump in the plane cannot happen inside
    one component.
    """
    tol = default_tol(smp.h) if tol is None else tol
    mask = smp.nonflat & ~smp.not_cn2
    N = smp.n_cells
    sel = mask[smp.eu] & mask[smp.ev]
    ids = np.flatnonzero(sel)
    for a in range(0, len(ids), CHUNK):
        e = ids[a:a + CHUNK]
        moved = _transported_planes(smp, e)
        sel[e] = plane_angles(moved, smp.plane[smp.ev[e]], smp.g[smp.ev[e]]) <= tol
    graph = coo_matrix((np.ones(int(sel.sum())), (smp.eu[sel], smp.ev[sel])), shape=(N, N))
    _, lab = connected_components(graph, directed=False)
    return _relabel_by_min_index(lab, mask)


def plane_angles(P, Q, g):
    """Largest principal angle between row spans P[e], Q[e] in the metric g[e] (batched)."""
    L = np.linalg.cholesky(g)
    a = np.einsum("eki,eij->ekj", P, L)
    b = np.einsum("eki,eij->ekj", Q, L)
    qa, _ = np.linalg.qr(np.swapaxes(a, 1, 2))
    qb, _ = np.linalg.qr(np.swapaxes(b, 1, 2))
    resid = qb - qa @ (np.swapaxes(qa, 1, 2) @ qb)
    sin = np.linalg.svd(resid, compute_uv=False)[:, 0]
    return np.arcsin(np.clip(sin, 0.0, 1.0))


def _transported_planes(smp: GridSample, edges, forward=True):
    """Planes of the u ends carried to the v ends (or back when not forward)."""
    if forward:
        src, P = smp.eu[edges], smp.eP[edges]
    else:
        src, P = smp.ev[edges], np.linalg.inv(smp.eP[edges])
    return np.einsum("eij,ekj->eki", P, smp.plane[src])


def cylinder_check(smp: GridSample, comp_labels, component: int) -> float:
    """Largest angle between a transported nullity plane and its neighbour's inside a component."""
    cu, cv = comp_labels[smp.eu], comp_labels[smp.ev]
    edges = np.flatnonzero((cu == component) & (cv == component))
    if not len(edges):
        return 0.0
    moved = _transported_planes(smp, edges)
    target = smp.plane[smp.ev[edges]]
    return float(np.max(plane_angles(moved, target, smp.g[smp.ev[edges]])))


# -- extension of the nullity planes into the flat region ----------------------


def _axis_mask(rows) -> int:
    """Bitmask of coordinate axes spanning the rows, or -1 if the span is not axis aligned."""
    q, _ = np.linalg.qr(np.asarray(rows, dtype=float).T)
    proj = q @ q.T
    d = np.round(np.diag(proj))
    if np.max(np.abs(proj - np.diag(d))) > AXIS_TOL:
        return -1
    return int(sum(1 << k for k in range(len(d)) if d[k] == 1.0))


def _mask_rows(mask: int, n: int):
    return np.eye(n)[[k for k in range(n) if mask >> k & 1]]


def _map_mask(mask: int, perm) -> int:
    return int(sum(1 << int(perm[k]) for k in range(len(perm)) if mask >> k & 1))


class _UnionFind:
    def __init__(self, count):
        self.parent = list(range(count))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        a, b = self.find(a), self.find(b)
        if a != b:
            # keep the smaller id as root so numbering stays deterministic
            if b < a:
                a, b = b, a
            self.parent[b] = a


@dataclass
class Extension:
    sample: GridSample
    label: np.ndarray   # per cell, one of NONFLAT, EXTENDED, BOUNDARY, UNRESOLVED
    comp: np.ndarray    # component of origin, -1 if none
    plane: np.ndarray   # (N, n-2, n) plane rows, NaN where none
    tol: float
    n_components: int
    nonflat_components: np.ndarray  # labels of the nonflat components before merging
    n_nonflat: int
    mask: np.ndarray = None  # axis bitmask of each plane, -1 if not axis aligned or none

    def fraction(self, which: int) -> float:
        w = self.sample.weight
        return float(w[self.label == which].sum() / w.sum())


class _Extender:
    def __init__(self, smp: GridSample, tol: float):
        self.smp = smp
        self.tol = tol
        self.n = smp.dimension
        comp0, ncomp = components(smp, tol)
        self.comp0, self.ncomp = comp0, ncomp
        self.uf = _UnionFind(ncomp)
        N = smp.n_cells
        self.label = np.full(N, UNLABELED)
        self.label[smp.nonflat] = NONFLAT
        self.comp = comp0.copy()
        self.plane = smp.plane.copy()
        self.mask = np.full(N, -1)
        for i in np.flatnonzero(smp.nonflat):
            self.mask[i] = _axis_mask(self.plane[i])
        self.leaves = {}

    # plane agreement at one cell
    def _agrees(self, cell, rows, mask) -> bool:
        if mask >= 0 and self.mask[cell] >= 0:
            return mask == self.mask[cell]
        return plane_angles(rows[None], self.plane[cell][None], self.smp.g[cell][None])[0] <= self.tol

    def _leaf(self, cell, mask):
        """Cells reached from ``cell`` moving along the axes of ``mask``, with their masks.

        None when the leaf comes back to a cell with a different plane.
        """
        key = (cell, mask)
        if key in self.leaves:
            return self.leaves[key]
        smp = self.smp
        seen = {cell: mask}
        stack = [cell]
        ok = True
        while stack and ok:
            c = stack.pop()
            m = seen[c]
            for k in range(self.n):
                if not m >> k & 1:
                    continue
                for si in (0, 1):
                    nb = smp.nbr[c, k, si]
                    if nb < 0:
                        continue
                    e = smp.nbr_edge[c, k, si]
                    perm = smp.eperm[e]
                    if not smp.nbr_fwd[c, k, si]:
                        inv = np.empty_like(perm)
                        inv[perm] = np.arange(self.n)
                        perm = inv
                    m2 = _map_mask(m, perm)
                    if nb in seen:
                        if seen[nb] != m2:
                            ok = False
                            break
                        continue
                    seen[nb] = m2
                    stack.append(nb)
                if not ok:
                    break
        leaf = sorted(seen.items()) if ok else None
        for c, m in (leaf or []):
            self.leaves[(c, m)] = leaf
        self.leaves[key] = leaf
        return leaf

    def _admissible(self, cell, rows, mask):
        """(ok, cells to assign as (cell, rows, mask), components met with agreeing planes)."""
        label = self.label
        if mask < 0:
            if label[cell] != UNLABELED:
                return False, [], set()
            return True, [(cell, rows, mask)], set()
        leaf = self._leaf(cell, mask)
        if leaf is None:
            return False, [], set()
        met = set()
        todo = []
        for c, m in leaf:
            lab = label[c]
            if lab == UNLABELED:
                todo.append((c, None, m))
            elif lab == BOUNDARY:
                return False, [], set()
            elif self._agrees(c, _mask_rows(m, self.n), m):
                met.add(self.uf.find(self.comp[c]))
            else:
                return False, [], set()
        return True, todo, met

    def _candidates(self, cell, snapshot):
        smp = self.smp
        out = []
        for k in range(self.n):
            for si in (0, 1):
                nb = smp.nbr[cell, k, si]
                if nb < 0 or snapshot[nb] not in (NONFLAT, EXTENDED):
                    continue
                e = smp.nbr_edge[cell, k, si]
                # transport from nb to cell: forward when nb is the u end
                P, A, perm = smp.edge_map(e, not smp.nbr_fwd[cell, k, si])
                if self.mask[nb] >= 0 and np.array_equal(P, A):
                    m = _map_mask(self.mask[nb], perm)
                    rows = _mask_rows(m, self.n)
                else:
                    rows = self.plane[nb] @ P.T
                    m = _axis_mask(rows)
                out.append((rows, m, self.uf.find(self.comp[nb])))
        return out

    def _cluster(self, cands, cell):
        groups = []
        for rows, m, c in cands:
            for grp in groups:
                r0, m0, _ = grp[0]
                if m >= 0 and m0 >= 0:
                    same = m == m0
                else:
                    same = plane_angles(rows[None], r0[None], self.smp.g[cell][None])[0] <= self.tol
                if same:
                    grp.append((rows, m, c))
                    break
            else:
                groups.append([(rows, m, c)])
        return groups

    def _frontier(self):
        smp = self.smp
        lab = self.label
        good = (lab == NONFLAT) | (lab == EXTENDED)
        nb = smp.nbr
        hit = np.any((nb >= 0) & good[np.maximum(nb, 0)], axis=(1, 2))
        return np.flatnonzero(hit & (lab == UNLABELED))

    def run(self):
        n = self.n
        while True:
            snapshot = self.label.copy()
            changed = False
            for cell in self._frontier():
                if self.label[cell] != UNLABELED:
                    continue
                groups = self._cluster(self._candidates(cell, snapshot), cell)
                admissible = []
                for grp in groups:
                    rows, m, _ = grp[0]
                    ok, todo, met = self._admissible(cell, rows, m)
                    if ok:
                        admissible.append((grp, todo, met))
                if len(admissible) == 1:
                    grp, todo, met = admissible[0]
                    comps = sorted({c for _, _, c in grp} | met)
                    for c in comps[1:]:
                        self.uf.union(comps[0], c)
                    root = self.uf.find(comps[0])
                    for c, rows, m in todo:
                        self.label[c] = EXTENDED
                        self.comp[c] = root
                        self.mask[c] = m
                        self.plane[c] = rows if rows is not None else _mask_rows(m, n)
                    changed = True
                elif len(admissible) > 1:
                    self.label[cell] = BOUNDARY
                    self.comp[cell] = min(self.uf.find(c) for grp, _, _ in admissible for _, _, c in grp)
                    changed = True
            if not changed:
                break
        self._post_pass()
        self.label[self.label == UNLABELED] = UNRESOLVED

    def _post_pass(self):
        smp = self.smp
        lab = self.label
        good = (lab == NONFLAT) | (lab == EXTENDED)
        edges = np.flatnonzero(good[smp.eu] & good[smp.ev])
        if not len(edges):
            return
        u, v = smp.eu[edges], smp.ev[edges]
        ang = np.zeros(len(edges))
        # axis-aligned planes across exact permutation maps compare by mask
        exact = np.all(smp.eP[edges] == smp.eA[edges], axis=(1, 2))
        fast = exact & (self.mask[u] >= 0) & (self.mask[v] >= 0)
        for i in np.flatnonzero(fast):
            ang[i] = 0.0 if _map_mask(self.mask[u[i]], smp.eperm[edges[i]]) == self.mask[v[i]] else np.pi / 2
        slow = np.flatnonzero(~fast)
        for a in range(0, len(slow), CHUNK):
            ids = slow[a:a + CHUNK]
            moved = np.einsum("eij,ekj->eki", smp.eP[edges[ids]], self.plane[u[ids]])
            ang[ids] = plane_angles(moved, self.plane[v[ids]], smp.g[v[ids]])
        agree = ang <= self.tol
        for i in np.flatnonzero(agree):
            self.uf.union(self.comp[u[i]], self.comp[v[i]])
        bad = ~agree
        for ends in (u[bad], v[bad]):
            flip = ends[lab[ends] == EXTENDED]
            lab[flip] = BOUNDARY

    def result(self) -> Extension:
        roots = np.array([self.uf.find(c) if c >= 0 else -1 for c in self.comp])
        has = (self.label == NONFLAT) | (self.label == EXTENDED)
        # number components by their smallest member cell
        order = {}
        for i in np.flatnonzero(has):
            order.setdefault(roots[i], len(order))
        comp = np.array([order.get(r, -1) if r >= 0 else -1 for r in roots], dtype=int)
        return Extension(self.smp, self.label, comp, self.plane, self.tol, len(order),
                         self.comp0, self.ncomp, self.mask)


def extend(smp: GridSample, tol: float | None = None) -> Extension:
    """Grow the nullity planes of the nonflat cells into the flat cells, whole leaves at a time."""
    ext = _Extender(smp, default_tol(smp.h) if tol is None else tol)
    ext.run()
    return ext.result()


# -- separating sheets -----------------------------------------------------------


@dataclass
class SeparatingSurface:
    id: int
    cells: np.ndarray
    sides: list
    flatness_residual: float
    closed: bool
    touches_unresolved: bool
    accepted: bool

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "cells": int(len(self.cells)),
            "sides": [int(s) for s in self.sides],
            "flatness_residual": float(self.flatness_residual),
            "closed": bool(self.closed),
            "touches_unresolved": bool(self.touches_unresolved),
            "accepted": bool(self.accepted),
        }


def detect_surfaces(ext: Extension) -> list:
    """Connected sheets of Boundary cells with the components on either side."""
    smp = ext.sample
    N = smp.n_cells
    lab = ext.label
    bnd = lab == BOUNDARY
    sel = bnd[smp.eu] & bnd[smp.ev]
    graph = coo_matrix((np.ones(int(sel.sum())), (smp.eu[sel], smp.ev[sel])), shape=(N, N))
    _, cc = connected_components(graph, directed=False)
    sheet, count = _relabel_by_min_index(cc, bnd)
    out = []
    if not count:
        return out
    members = [[] for _ in range(count)]
    for i in np.flatnonzero(bnd):
        members[sheet[i]].append(i)
    side_lab = (lab == NONFLAT) | (lab == EXTENDED)
    for s in range(count):
        cells = np.array(members[s])
        nb = smp.nbr[cells].reshape(-1)
        nb = nb[nb >= 0]
        nb = nb[~bnd[nb]]
        sides = sorted({int(ext.comp[c]) for c in nb[side_lab[nb]]})
        touches = bool(np.any(lab[nb] == UNRESOLVED))
        closed = not bool(np.any(smp.open_face[cells]))
        flat_res = float(np.max(np.abs(smp.scal[cells])))
        accepted = len(sides) == 2 and closed and not touches and flat_res <= smp.tau_flat
        out.append(SeparatingSurface(s, cells, sides, flat_res, closed, touches, accepted))
    return out


# -- boundary profiles -------------------------------------------------------------


@dataclass
class BoundaryProfile:
    cell: int
    rho: float
    m: int
    clusters: list          # representative plane rows in the cell's frame
    angles: np.ndarray      # largest principal angle between cluster representatives
    law_ok: bool

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def to_dict(self) -> dict:
        return {
            "cell": int(self.cell),
            "rho": float(self.rho),
            "m": int(self.m),
            "bnl_clusters": [np.asarray(c).tolist() for c in self.clusters],
            "angles": np.asarray(self.angles).tolist(),
            "law_ok": bool(self.law_ok),
        }


def _ball(smp: GridSample, cell: int, steps: int):
    """Cells within ``steps`` adjacency moves, each with the chart map back to ``cell``.

    Planes are compared through the identifications rather than by parallel
    transport: inside a small ball this is the grid's notion of a limit, and
    transport through strongly curved cells would rotate them.
    """
    n = smp.dimension
    nbr, nbr_edge, nbr_fwd = smp.nbr, smp.nbr_edge, smp.nbr_fwd
    back = {cell: np.eye(n)}
    frontier = [cell]
    for _ in range(steps):
        nxt = []
        for c in frontier:
            for k in range(n):
                for si in (0, 1):
                    nb = int(nbr[c, k, si])
                    if nb < 0 or nb in back:
                        continue
                    e = nbr_edge[c, k, si]
                    # identification map nb -> c (inverse of c -> nb)
                    Q = smp.eA[e].T if nbr_fwd[c, k, si] else smp.eA[e]
                    back[nb] = back[c] @ Q
                    nxt.append(nb)
        frontier = nxt
    return back


def _distinct_planes(planes):
    """Drop repeated planes (same rows up to sign, to 9 digits), keeping first occurrences."""
    flat = planes.reshape(len(planes), -1)
    lead = np.take_along_axis(flat, np.argmax(np.abs(flat) > 1e-9, axis=1)[:, None], 1)
    key = np.round(flat * np.sign(lead + (lead == 0)), 9)
    _, first = np.unique(key, axis=0, return_index=True)
    return planes[np.sort(first)]


def boundary_profile(ext: Extension, cell: int, rho: float | None = None,
                     cluster: bool = True) -> BoundaryProfile:
    smp = ext.sample
    rho = RHO_CELLS * smp.h if rho is None else rho
    steps = max(1, int(round(rho / smp.h)))
    maps = _ball(smp, cell, steps)
    cells = np.array(sorted(maps))
    comps = ext.comp[cells]
    m = len(set(comps[comps >= 0].tolist()))
    clusters = []
    has_plane = ~np.isnan(ext.plane[cells, 0, 0]) & (ext.label[cells] != UNRESOLVED)
    if cluster and has_plane.any():
        planes = _distinct_planes(np.array([ext.plane[c] @ maps[c].T for c in cells[has_plane]]))
        g = np.broadcast_to(smp.g[cell], (len(planes),) + smp.g[cell].shape)
        left = np.ones(len(planes), dtype=bool)
        while left.any():
            rep = planes[int(np.flatnonzero(left)[0])]
            ang = plane_angles(planes, np.broadcast_to(rep, planes.shape), g)
            left &= ang > ext.tol
            clusters.append(rep)
    k = len(clusters)
    angles = np.zeros((k, k))
    if k:
        rep = np.array(clusters)
        gg = np.broadcast_to(smp.g[cell], (k,) + smp.g[cell].shape)
        for i in range(k):
            angles[i] = plane_angles(rep, np.broadcast_to(rep[i], rep.shape), gg)
    return BoundaryProfile(int(cell), float(rho), m, clusters, angles, 2 <= k <= m)


def _profiles_batch(ext: Extension, cells, steps: int, cluster: bool = True):
    """(m, cluster counts) for many Boundary cells at once.

    Breadth-first search from all cells together, carrying the identification
    back to the source as a signed permutation. Cluster counts are -1 where a
    plane in the ball is not axis aligned; those need ``boundary_profile``.
    """
    smp = ext.sample
    n = smp.dimension
    N = smp.n_cells
    cells = np.asarray(cells, dtype=int)
    B = len(cells)
    A = smp.eA
    E = len(A)
    ar = np.arange(E)[:, None]
    # rows of A and A^T as signed permutations: row j has its entry in column col[j]
    colA = np.argsort(smp.eperm, axis=1)
    sigA = A[ar, np.arange(n)[None, :], colA]
    colAT = smp.eperm
    sigAT = A[ar, colAT, np.arange(n)[None, :]]

    src = np.arange(B)
    cur = cells.copy()
    perm = np.tile(np.arange(n), (B, 1))
    sign = np.ones((B, n), dtype=np.int8)
    seen = np.sort(src * N + cur)
    all_src, all_cell, all_perm = [src], [cur], [perm]
    for _ in range(steps):
        ns, nc, npm, nsg = [], [], [], []
        for k in range(n):
            for si in (0, 1):
                nb = smp.nbr[cur, k, si]
                ok = nb >= 0
                e = smp.nbr_edge[cur[ok], k, si]
                fwd = smp.nbr_fwd[cur[ok], k, si]
                col = np.where(fwd[:, None], colAT[e], colA[e])
                sg = np.where(fwd[:, None], sigAT[e], sigA[e])
                p = perm[ok]
                # (back @ Q)[i] = s_i Q[p_i]
                newp = np.take_along_axis(col, p, 1)
                news = sign[ok] * np.take_along_axis(sg, p, 1).astype(np.int8)
                ns.append(src[ok])
                nc.append(nb[ok])
                npm.append(newp)
                nsg.append(news)
        if not ns:
            break
        ns, nc = np.concatenate(ns), np.concatenate(nc)
        npm, nsg = np.concatenate(npm), np.concatenate(nsg)
        key = ns * N + nc
        _, first = np.unique(key, return_index=True)
        first = np.sort(first)
        first = first[~np.isin(key[first], seen, assume_unique=False)]
        src, cur, perm, sign = ns[first], nc[first], npm[first], nsg[first]
        if not len(src):
            break
        seen = np.union1d(seen, key[first])
        all_src.append(src)
        all_cell.append(cur)
        all_perm.append(perm)
    src = np.concatenate(all_src)
    cell = np.concatenate(all_cell)
    perm = np.concatenate(all_perm)
    comp = ext.comp[cell]
    has = comp >= 0
    pairs = np.unique(src[has] * (N + 1) + comp[has])
    m = np.bincount(pairs // (N + 1), minlength=B)
    if not cluster:
        return m, None
    lab = ext.label[cell]
    with_plane = ~np.isnan(ext.plane[cell, 0, 0]) & (lab != UNRESOLVED)
    mask = ext.mask[cell]
    # mask in the source frame: bit i set when perm_i lies in the cell's mask
    bits = ((mask[:, None] >> perm) & 1) << np.arange(n)[None, :]
    smask = bits.sum(axis=1)
    good = with_plane & (mask >= 0)
    pairs = np.unique(src[good] * (1 << n) + smask[good])
    k = np.bincount(pairs >> n, minlength=B)
    slanted = np.zeros(B, dtype=bool)
    slanted[src[with_plane & (mask < 0)]] = True
    k[slanted] = -1
    return m, k


# -- report ----------------------------------------------------------------------


@dataclass
class GraphReport:
    label: str
    h: float
    params: dict
    nodes: list
    edges: list
    unresolved_fraction: float
    dense: bool
    locally_finite: bool
    profile: dict
    counts: dict
    verdict: str
    extension: Extension | None = dc_field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "atlas": self.label,
            "h": self.h,
            "params": self.params,
            "counts": self.counts,
            "nodes": self.nodes,
            "edges": [e.to_dict() for e in self.edges],
            "unresolved_fraction": self.unresolved_fraction,
            "dense": self.dense,
            "locally_finite": self.locally_finite,
            "profile": self.profile,
            "verdict": self.verdict,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def cells_csv(self) -> str:
        ext = self.extension
        smp = ext.sample
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = smp.dimension
        w.writerow(["cell", "block"] + [f"x{k + 1}" for k in range(n)]
                   + ["scal", "mu", "label", "component"])
        for i in range(smp.n_cells):
            w.writerow([i, smp.atlas.blocks[smp.block[i]].name]
                       + [repr(float(v)) for v in smp.center[i]]
                       + [repr(float(smp.scal[i])), int(smp.mu[i]),
                          LABEL_NAMES[int(ext.label[i])], int(ext.comp[i])])
        return buf.getvalue()


def graph_report(ext: Extension, surfaces, kappa: float = KAPPA, m_cap: int = M_CAP,
                 rho: float | None = None, tol_cyl: float = TOL_CYL) -> GraphReport:
    smp = ext.sample
    rho = RHO_CELLS * smp.h if rho is None else rho
    params = {"kappa": kappa, "m_cap": m_cap, "rho": rho, "tol": ext.tol, "tol_cyl": tol_cyl,
              "tau_flat": smp.tau_flat, "tau_rank": smp.tau_rank}
    counts = {LABEL_NAMES[l]: int(np.sum(ext.label == l))
              for l in (NONFLAT, EXTENDED, BOUNDARY, UNRESOLVED)}
    counts["not_cn2"] = int(smp.not_cn2.sum())
    counts["nonflat_components"] = int(ext.n_nonflat)
    label = smp.atlas.label
    unresolved = ext.fraction(UNRESOLVED)

    def done(verdict, nodes=(), dense=False, lf=False, profile=None):
        return GraphReport(label, smp.h, params, list(nodes), list(surfaces), unresolved, dense,
                           lf, profile or {}, counts, verdict, ext)

    if smp.not_cn2.any():
        return done("NotCN2")
    if not smp.nonflat.any():
        return done("FlatEverywhere")

    # nodes: merged components with the cylinder residuals of their nonflat parts
    residual = {}
    for c in range(ext.n_nonflat):
        cells = np.flatnonzero(ext.nonflat_components == c)
        merged = int(ext.comp[cells[0]])
        residual[merged] = max(residual.get(merged, 0.0),
                               cylinder_check(smp, ext.nonflat_components, c))
    nodes = []
    for c in range(ext.n_components):
        sel = (ext.comp == c) & ((ext.label == NONFLAT) | (ext.label == EXTENDED))
        nodes.append({"id": c, "cells": int(sel.sum()),
                      "volume": float(smp.weight[sel].sum()),
                      "cylinder_residual": float(residual.get(c, 0.0))})

    bcells = np.flatnonzero(ext.label == BOUNDARY)
    steps = max(1, int(round(rho / smp.h)))
    ms, ks = _profiles_batch(ext, bcells, steps)
    ms_half, _ = _profiles_batch(ext, bcells, max(1, int(round(rho / 2 / smp.h))), cluster=False)
    for i in np.flatnonzero(ks < 0):
        ks[i] = boundary_profile(ext, bcells[i], rho).n_clusters
    failures = int(np.sum((ks < 2) | (ks > ms)))
    max_k = int(ks.max()) if len(ks) else 0
    ms, ms_half = np.array(ms, dtype=int), np.array(ms_half, dtype=int)
    max_m = int(ms.max()) if len(ms) else 0
    stable = bool(np.all(ms == ms_half))
    profile = {"boundary_cells": int(len(bcells)), "max_m": max_m,
               "max_m_half": int(ms_half.max()) if len(ms_half) else 0,
               "max_clusters": int(max_k), "law_failures": int(failures), "m_stable": stable}
    dense = unresolved <= kappa * smp.h
    lf = max_m <= m_cap and stable
    if not dense:
        verdict = "NonDenseExtension"
    elif not lf:
        verdict = "NotLocallyFinite"
    elif (failures == 0 and all(e.accepted for e in surfaces)
          and all(nd["cylinder_residual"] <= tol_cyl for nd in nodes)):
        verdict = "GeometricGraphManifold"
    else:
        verdict = "Inconclusive"
    return done(verdict, nodes, dense, lf, profile)


def detect(space, h: float, *, kappa: float = KAPPA, m_cap: int = M_CAP, rho: float | None = None,
           tau_flat: float = TAU_FLAT, tau_rank: float = TAU_RANK, tol: float | None = None,
           adapt: bool = False) -> GraphReport:
    """Full pipeline: sample, extend, find sheets, profile and judge."""
    smp = sample(space, h, tau_flat, tau_rank, adapt=adapt)
    if smp.not_cn2.any():
        ext = Extension(smp, np.full(smp.n_cells, UNRESOLVED), np.full(smp.n_cells, -1),
                        smp.plane, default_tol(h) if tol is None else tol, 0,
                        np.full(smp.n_cells, -1), 0)
        return graph_report(ext, [], kappa, m_cap, rho)
    ext = extend(smp, tol)
    return graph_report(ext, detect_surfaces(ext), kappa, m_cap, rho)


# -- volume ---------------------------------------------------------------------


def _volume_at(atlas: TorusAtlas, counts, region) -> float:
    total = 0.0
    for b, c in zip(atlas.blocks, counts):
        s = b.chart.widths / c
        n = len(c)
        idx = np.indices(c).reshape(n, -1).T
        x = b.chart.lo_array + (idx + 0.5) * s
        if region is not None:
            lo, hi = region
            inside = np.all((x >= np.asarray(lo)) & (x <= np.asarray(hi)), axis=1)
            x = x[inside]
        for a in range(0, len(x), CHUNK):
            g = b.field.values(x[a:a + CHUNK])
            total += float(np.sqrt(np.linalg.det(g)).sum()) * float(np.prod(s))
    return total


def volume(space, h: float, region=None, adapt: bool = False):
    """(midpoint-rule volume at h, Richardson error estimate).

    The estimate compares with the grid of half as many cells per axis and
    assumes second order. ``region`` is an optional box ``(lo, hi)`` applied
    in every block's coordinates.
    """
    atlas = as_atlas(space)
    fine = [_block_grid(b.chart, h, adapt)[0] for b in atlas.blocks]
    v = _volume_at(atlas, fine, region)
    coarse = [np.maximum(c // 2, 1) for c in fine]
    ratio = float(np.min(np.concatenate([f / c for f, c in zip(fine, coarse)])))
    if ratio <= 1.0:
        return v, float("nan")
    vc = _volume_at(atlas, coarse, region)
    return v, abs(v - vc) / (ratio**2 - 1.0)
