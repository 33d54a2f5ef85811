"""The splitting tensor of the nullity and its Riccati evolution along nullity geodesics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .curvature import (
    GAP_WARN,
    H_C,
    TAU_FLAT,
    TAU_RANK,
    christoffel_from_jet,
    curvature_batch,
    nabla_unit_nullity,
    unit_nullity_at,
)
from .errors import BadParams, Blowup, DegenerateFrame, NotCN2Point, OrientationFlip
from .flows import as_atlas, gram_schmidt, integrate_geodesic
from .metric import MetricField

BLOWUP_TOL = 1e-12
CLASS_TOL = 1e-9


# -- matrix Riccati equation C' = C^2 ----------------------------------------


def _singular_times(C0) -> list[float]:
    lam = np.linalg.eigvals(np.asarray(C0, dtype=float))
    return sorted(float(1.0 / l.real) for l in lam if abs(l.imag) < 1e-12 and abs(l.real) > 1e-15)


def riccati_closed_form(C0, t: float) -> np.ndarray:
    """C0 (I - t C0)^{-1}."""
    C0 = np.asarray(C0, dtype=float)
    M = np.eye(len(C0)) - t * C0
    if abs(np.linalg.det(M)) < BLOWUP_TOL:
        raise Blowup(f"I - t C0 is singular at t={t}", _singular_times(C0))
    return C0 @ np.linalg.inv(M)


def trace_det_evolution(C0, t: float) -> tuple[float, float]:
    """(tr C(t), det C(t)) from the trace and determinant of C0 alone."""
    C0 = np.asarray(C0, dtype=float)
    tr, det = float(np.trace(C0)), float(np.linalg.det(C0))
    den = 1.0 - t * tr + t * t * det
    if abs(den) < BLOWUP_TOL:
        raise Blowup(f"denominator vanishes at t={t}", _singular_times(C0))
    return (tr - 2.0 * t * det) / den, det / den


def integrate_riccati(C0, ts, rtol: float = 1e-12, atol: float = 1e-14) -> np.ndarray:
    """Numerical solution of C' = C^2 at the times ``ts`` (ascending, from 0)."""
    C0 = np.asarray(C0, dtype=float)
    k = len(C0)

    def rhs(t, y):
        C = y.reshape(k, k)
        return (C @ C).ravel()

    ts = np.asarray(ts, dtype=float)
    sol = solve_ivp(rhs, (0.0, float(ts[-1])), C0.ravel(), method="DOP853",
                    t_eval=ts, rtol=rtol, atol=atol)
    if sol.status != 0:
        raise Blowup(sol.message, _singular_times(C0))
    return sol.y.T.reshape(len(ts), k, k)


def classify_matrix(C, tol: float = CLASS_TOL) -> str:
    C = np.asarray(C, dtype=float)
    tr, det = float(np.trace(C)), float(np.linalg.det(C))
    scale = 1.0 + float(np.max(np.abs(C)))
    if np.max(np.abs(C)) <= tol:
        return "zero"
    if abs(tr) <= tol * scale and abs(det) <= tol * scale**2:
        return "nilpotent"
    if tr * tr < 4.0 * det:
        return "complex_eigen"
    return "real_eigen"


@dataclass(frozen=True)
class SplittingTensor:
    """C with column a holding the components of C_T e_a in the basis (e1, e2)."""

    C: np.ndarray
    trace: float
    det: float
    kind: str

    @classmethod
    def from_matrix(cls, C) -> "SplittingTensor":
        C = np.asarray(C, dtype=float)
        return cls(C, float(np.trace(C)), float(np.linalg.det(C)), classify_matrix(C))

    def to_dict(self) -> dict:
        return {"C": self.C.tolist(), "trace": self.trace, "det": self.det, "class": self.kind}


def riccati_report(C0, ts) -> dict:
    """JSON-ready summary of the closed-form flow at the times ``ts``."""
    C0 = np.asarray(C0, dtype=float)
    out = {"C0": C0.tolist(), "class": classify_matrix(C0),
           "singular_times": _singular_times(C0), "samples": []}
    for t in ts:
        try:
            C = riccati_closed_form(C0, t)
            tr, det = trace_det_evolution(C0, t)
            out["samples"].append({"t": float(t), "C": C.tolist(), "trace": tr, "det": det,
                                   "class": classify_matrix(C)})
        except Blowup:
            out["samples"].append({"t": float(t), "blowup": True})
    return out


# -- frames adapted to the nullity --------------------------------------------


@dataclass(frozen=True)
class AdaptedFrame:
    point: np.ndarray
    T: np.ndarray
    e: np.ndarray  # rows e1, e2 spanning the conullity
    others: np.ndarray  # further nullity directions orthogonal to T (n >= 4)
    a: float | None = None
    alpha: float | None = None
    beta: float | None = None

    @property
    def e1(self):
        return self.e[0]

    @property
    def e2(self):
        return self.e[1]

    def to_dict(self) -> dict:
        return {"point": self.point.tolist(), "T": self.T.tolist(), "e1": self.e1.tolist(),
                "e2": self.e2.tolist(), "a": self.a, "alpha": self.alpha, "beta": self.beta}


def _check_cn2(field: MetricField, x, tau_flat, tau_rank):
    cb = curvature_batch(field, x[None], tau_rank)
    n = field.dimension
    if n < 3:
        raise NotCN2Point("splitting tensors need dimension at least 3")
    if cb.norm[0] <= tau_flat or cb.mu[0] != n - 2:
        raise NotCN2Point(f"point {x.tolist()} is not a nonflat CN2 point")
    return cb


def adapted_frame(field: MetricField, p, orientation_hint=None, *,
                  tau_flat: float = TAU_FLAT, tau_rank: float = TAU_RANK) -> AdaptedFrame:
    """Unit nullity vector T (oriented by the hint) and an orthonormal basis of its complement."""
    x = np.asarray(p, dtype=float)
    cb = _check_cn2(field, x, tau_flat, tau_rank)
    if cb.gap_ratio[0] < GAP_WARN:
        raise DegenerateFrame(f"nullity split ill-conditioned (gap ratio {cb.gap_ratio[0]:.2f})")
    g = cb.g[0]
    B = cb.nullity_basis(0)
    hint = B[0] if orientation_hint is None else np.asarray(orientation_hint, dtype=float)
    T = B.T @ (B @ g @ hint)
    nrm = np.sqrt(T @ g @ T)
    if nrm < 1e-8 * np.sqrt(hint @ g @ hint):
        raise DegenerateFrame("orientation hint is orthogonal to the nullity")
    T = T / nrm
    e = cb.conullity_basis(0)
    others = np.zeros((0, len(x)))
    if len(B) > 1:
        rest = B - np.outer(B @ g @ T, T)
        others = gram_schmidt(rest[np.argsort(-np.linalg.norm(rest, axis=1))][:len(B) - 1], g)
    return AdaptedFrame(x, T, e, others)


def _C_in_frame(field, x, T, e, h):
    """C[b, a] = <-(nabla_{e_a} That), e_b> for frame rows e."""
    g = field.values(x)
    cols = []
    for ea in e:
        dT, _ = nabla_unit_nullity(field, x, T, ea, h)
        cols.append(-(e @ g @ dT))
    return np.array(cols).T


def splitting_tensor(field: MetricField, p, frame: AdaptedFrame, h: float = H_C) -> SplittingTensor:
    x = np.asarray(p, dtype=float)
    return SplittingTensor.from_matrix(_C_in_frame(field, x, frame.T, frame.e, h))


def frame_coefficients(field: MetricField, frame: AdaptedFrame, h: float = H_C) -> AdaptedFrame:
    """Fill alpha = <nabla_{e1} e1, e2>, beta = <nabla_{e2} e2, e1> and, if C is nilpotent, a.

    e1, e2 are extended by projecting their values at the base point onto
    the conullity of nearby points. Diagnostics only.
    """
    x = frame.point
    n = len(x)
    g0 = field.values(x)

    def conull_frame(q):
        Tq = unit_nullity_at(field, q, frame.T)[0]
        cb = curvature_batch(field, q[None])
        gq = cb.g[0]
        N = np.vstack([Tq, frame.others]) if len(frame.others) else Tq[None]
        vecs = []
        for v in frame.e:
            w = v - N.T @ (N @ gq @ v) if len(N) else v
            vecs.append(w)
        return gram_schmidt(np.array(vecs), gq)

    gj, dg, _ = field.jet(x[None])
    gam = christoffel_from_jet(gj, dg)[0]

    def nabla(X, which):
        fp = conull_frame(x + h * X)[which]
        fm = conull_frame(x - h * X)[which]
        f0 = frame.e[which]
        return (fp - fm) / (2 * h) + np.einsum("kij,i,j->k", gam, X, f0)

    e1, e2 = frame.e
    alpha = float(nabla(e1, 0) @ g0 @ e2)
    beta = float(nabla(e2, 1) @ g0 @ e1)
    C = _C_in_frame(field, x, frame.T, frame.e, h)
    a = None
    if classify_matrix(C, 1e-6) == "nilpotent":
        a = float(C[0, 1]) if abs(C[0, 1]) >= abs(C[1, 0]) else float(C[1, 0])
    return AdaptedFrame(x, frame.T, frame.e, frame.others, a, alpha, beta)


# -- checks along nullity geodesics -------------------------------------------


@dataclass(frozen=True)
class FlowSample:
    t: float
    block: int
    point: np.ndarray
    C: np.ndarray
    scal: float


def _nullity_flow(space, p, t_max: float, samples: int, block: int, hint,
                  tau_flat: float, tau_rank: float, h: float):
    """Measure C and Scal at equally spaced times along the nullity geodesic from p.

    The conullity frame is parallel transported; sampling stops early (and
    reports truncation) once the geodesic reaches a flat or non-CN2 point.
    """
    atlas = as_atlas(space)
    field = atlas.blocks[block].field
    x = np.asarray(p, dtype=float)
    frame = adapted_frame(field, x, hint, tau_flat=tau_flat, tau_rank=tau_rank)
    ts = np.linspace(0.0, t_max, samples + 1)
    b, v, E = block, frame.T.copy(), frame.e.copy()
    out = []
    truncated = None
    for k, t in enumerate(ts):
        if k > 0:
            path = integrate_geodesic(atlas, x, v, t - ts[k - 1], block=b, transport=E)
            b, x, v = path.end
            E = path.transported
        f = atlas.blocks[b].field
        cb = curvature_batch(f, x[None], tau_rank)
        if cb.norm[0] <= tau_flat or cb.mu[0] != f.dimension - 2:
            truncated = float(t)
            break
        g = cb.g[0]
        T = v / np.sqrt(v @ g @ v)
        try:
            C = _C_in_frame(f, x, T, E, h)
        except OrientationFlip:
            truncated = float(t)
            break
        out.append(FlowSample(float(t), b, x.copy(), C, float(cb.scal[0])))
    return out, truncated


def riccati_field_check(space, p, t_max: float, *, samples: int = 20, block: int = 0,
                        hint=None, tau_flat: float = TAU_FLAT, tau_rank: float = TAU_RANK,
                        h: float = H_C, details: bool = False):
    """max_t |C_measured(t) - C0 (I - t C0)^{-1}| (max-abs entry) along the nullity geodesic."""
    flow, truncated = _nullity_flow(space, p, t_max, samples, block, hint, tau_flat, tau_rank, h)
    C0 = flow[0].C
    devs = []
    for s in flow:
        devs.append(float(np.max(np.abs(s.C - riccati_closed_form(C0, s.t)))))
    dev = max(devs)
    if details:
        return {"deviation": dev, "truncated_at": truncated, "C0": C0.tolist(),
                "samples": [{"t": s.t, "C": s.C.tolist(), "deviation": d}
                            for s, d in zip(flow, devs)]}
    return dev


def scal_evolution_check(space, p, t_max: float, *, samples: int = 20, block: int = 0,
                         hint=None, tau_flat: float = TAU_FLAT, tau_rank: float = TAU_RANK,
                         h: float = H_C, details: bool = False):
    """max_t |Scal(t) / (Scal(0) / (1 - t tr C0 + t^2 det C0)) - 1|."""
    flow, truncated = _nullity_flow(space, p, t_max, samples, block, hint, tau_flat, tau_rank, h)
    s0 = flow[0].scal
    if abs(s0) <= tau_flat:
        raise BadParams("Scal vanishes at the start point")
    C0 = flow[0].C
    tr, det = float(np.trace(C0)), float(np.linalg.det(C0))
    devs = []
    for s in flow:
        den = 1.0 - s.t * tr + s.t**2 * det
        if abs(den) < BLOWUP_TOL:
            raise Blowup(f"denominator vanishes at t={s.t}", _singular_times(C0))
        devs.append(abs(s.scal * den / s0 - 1.0))
    dev = max(devs)
    if details:
        return {"deviation": dev, "truncated_at": truncated, "scal0": s0,
                "samples": [{"t": s.t, "scal": s.scal, "deviation": d} for s, d in zip(flow, devs)]}
    return dev


def divergence_check(field: MetricField, p, hint=None, *, h: float = H_C,
                     tau_flat: float = TAU_FLAT, tau_rank: float = TAU_RANK,
                     details: bool = False):
    """|div That + tr C| at p, with div the g-trace of nabla That."""
    x = np.asarray(p, dtype=float)
    frame = adapted_frame(field, x, hint, tau_flat=tau_flat, tau_rank=tau_rank)
    g = field.values(x)
    basis = np.vstack([frame.T[None], frame.others, frame.e])
    div = 0.0
    geod = None
    for i, X in enumerate(basis):
        dT, _ = nabla_unit_nullity(field, x, frame.T, X, h)
        div += float(X @ g @ dT)
        if i == 0:
            geod = float(np.sqrt(dT @ g @ dT))
    trC = float(np.trace(_C_in_frame(field, x, frame.T, frame.e, h)))
    res = abs(div + trC)
    if details:
        return {"residual": res, "div": div, "trace_C": trC, "geodesic_residual": geod}
    return res


def rotation(psi: float) -> np.ndarray:
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s], [s, c]])


def to_json(obj) -> str:
    return json.dumps(obj, sort_keys=True)
