"""Levi-Civita connection, curvature and the nullity of the curvature tensor.

Conventions: ``gamma[..., k, i, j]`` is the Christoffel symbol of the second
kind Gamma^k_ij. ``R[..., a, b, c, d]`` is the lowered tensor with
R_abab equal to the sectional curvature of an orthonormal pair, so that
Ric_bd = g^ac R_abcd and scal = g^ac g^bd R_abcd.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .errors import OrientationFlip
from .metric import MetricField, metric_jet

TAU_FLAT = 1e-9
TAU_RANK = 1e-7
ABS_FLOOR = 1e-14
GAP_WARN = 10.0


class PointClass(str, enum.Enum):
    FLAT = "Flat"
    NONFLAT_CN2 = "NonflatCN2"
    NOT_CN2 = "NotCN2"


def christoffel_from_jet(g, dg):
    ginv = np.linalg.inv(g)
    # Gamma_lij = 1/2 (d_i g_lj + d_j g_li - d_l g_ij)
    low = 0.5 * (np.einsum("...lji->...lij", dg) + np.einsum("...lij->...lij", dg)
                 - np.einsum("...ijl->...lij", dg))
    return np.einsum("...kl,...lij->...kij", ginv, low)


def riemann_from_jet(g, dg, ddg):
    gamma = christoffel_from_jet(g, dg)
    # second derivative part: 1/2 (g_ad,bc + g_bc,ad - g_ac,bd - g_bd,ac)
    d2 = 0.5 * (np.einsum("...adbc->...abcd", ddg) + np.einsum("...bcad->...abcd", ddg)
                - np.einsum("...acbd->...abcd", ddg) - np.einsum("...bdac->...abcd", ddg))
    low = np.einsum("...ef,...fij->...eij", g, gamma)
    quad = (np.einsum("...ebc,...ead->...abcd", gamma, low)
            - np.einsum("...ebd,...eac->...abcd", gamma, low))
    return gamma, d2 + quad


def orthonormal_frame(g):
    """Columns of E form a g-orthonormal frame: E^T g E = I."""
    L = np.linalg.cholesky(g)
    return np.swapaxes(np.linalg.inv(L), -1, -2)


def to_frame(R, E):
    return np.einsum("...ijkl,...ia,...jb,...kc,...ld->...abcd", R, E, E, E, E, optimize=True)


@dataclass(frozen=True)
class BatchCurvature:
    """Curvature data for a batch of points (leading axis)."""

    points: np.ndarray
    g: np.ndarray
    gamma: np.ndarray
    R: np.ndarray
    ricci: np.ndarray
    scal: np.ndarray
    frame: np.ndarray
    singular_values: np.ndarray
    directions: np.ndarray  # frame components of singular directions, descending order
    norm: np.ndarray
    mu: np.ndarray
    gap_ratio: np.ndarray

    def nullity_basis(self, i: int) -> np.ndarray:
        """Coordinate components (rows) of an orthonormal basis of the nullity at point i."""
        n = self.g.shape[-1]
        m = int(self.mu[i])
        return (self.frame[i] @ self.directions[i][:, n - m:]).T

    def conullity_basis(self, i: int) -> np.ndarray:
        n = self.g.shape[-1]
        m = int(self.mu[i])
        return (self.frame[i] @ self.directions[i][:, : n - m]).T

    def classify(self, tau_flat: float = TAU_FLAT) -> np.ndarray:
        n = self.g.shape[-1]
        out = np.full(len(self.norm), PointClass.NONFLAT_CN2.value, dtype=object)
        out[self.mu < n - 2] = PointClass.NOT_CN2.value
        out[self.norm <= tau_flat] = PointClass.FLAT.value
        return out


def curvature_from_jet(points, g, dg, ddg, tau_rank: float = TAU_RANK) -> BatchCurvature:
    gamma, R = riemann_from_jet(g, dg, ddg)
    ginv = np.linalg.inv(g)
    ricci = np.einsum("...ac,...abcd->...bd", ginv, R)
    scal = np.einsum("...bd,...bd->...", ginv, ricci)
    E = orthonormal_frame(g)
    Rf = to_frame(R, E)
    n = g.shape[-1]
    M = Rf.reshape(Rf.shape[:-4] + (n, n**3))
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    smax = s[..., 0]
    cut = tau_rank * (smax + ABS_FLOOR)
    mu = np.sum(s < cut[..., None], axis=-1)
    # gap between the smallest kept and the largest dropped singular value
    gap = np.full(smax.shape, np.inf)
    for m in range(1, n):
        sel = mu == m
        if np.any(sel):
            kept = s[..., n - m - 1][sel]
            dropped = s[..., n - m][sel]
            with np.errstate(divide="ignore"):
                gap[sel] = np.where(dropped > 0, kept / np.maximum(dropped, 1e-300), np.inf)
    return BatchCurvature(np.asarray(points, dtype=float), g, gamma, R, ricci, scal, E, s, U,
                          smax, mu, gap)


def curvature_batch(field: MetricField, points, tau_rank: float = TAU_RANK) -> BatchCurvature:
    """Curvature at many points; no domain checks (callers pass interior points)."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    g, dg, ddg = field.jet(x)
    return curvature_from_jet(x, g, dg, ddg, tau_rank)


@dataclass(frozen=True)
class CurvatureReport:
    point: np.ndarray
    christoffel: np.ndarray
    riemann_lowered: np.ndarray
    ricci: np.ndarray
    scal: float
    nullity_dim: int
    nullity_basis: np.ndarray
    conullity_basis: np.ndarray
    singular_values: np.ndarray
    norm: float
    gap_ratio: float
    warning: str | None = None

    def to_dict(self) -> dict:
        """JSON-ready dict; tensors as nested lists in row-major index order."""
        return {
            "point": self.point.tolist(),
            "christoffel": self.christoffel.tolist(),
            "riemann_lowered": self.riemann_lowered.tolist(),
            "ricci": self.ricci.tolist(),
            "scal": float(self.scal),
            "nullity_dim": int(self.nullity_dim),
            "nullity_basis": self.nullity_basis.tolist(),
            "conullity_basis": self.conullity_basis.tolist(),
            "singular_values": self.singular_values.tolist(),
            "norm": float(self.norm),
            "gap_ratio": None if not np.isfinite(self.gap_ratio) else float(self.gap_ratio),
            "warning": self.warning,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def riemann_scal(field: MetricField, p, tau_rank: float = TAU_RANK) -> CurvatureReport:
    g, dg, ddg = metric_jet(field, p)
    x = field.chart.wrap(p)
    b = curvature_from_jet(x[None], g[None], dg[None], ddg[None], tau_rank)
    warning = None
    if b.gap_ratio[0] < GAP_WARN:
        warning = f"ill-separated singular values at the rank cut (gap ratio {b.gap_ratio[0]:.2f})"
    return CurvatureReport(x, b.gamma[0], b.R[0], b.ricci[0], float(b.scal[0]), int(b.mu[0]),
                           b.nullity_basis(0), b.conullity_basis(0), b.singular_values[0],
                           float(b.norm[0]), float(b.gap_ratio[0]), warning)


def christoffel(field: MetricField, p):
    g, dg, _ = metric_jet(field, p)
    return christoffel_from_jet(g, dg)


def nullity(field: MetricField, p, tau_rank: float = TAU_RANK):
    """(mu, nullity basis rows, conullity basis rows, singular values)."""
    rep = riemann_scal(field, p, tau_rank)
    return rep.nullity_dim, rep.nullity_basis, rep.conullity_basis, rep.singular_values


def classify(field: MetricField, p, tau_flat: float = TAU_FLAT,
             tau_rank: float = TAU_RANK) -> PointClass:
    rep = riemann_scal(field, p, tau_rank)
    n = field.dimension
    if rep.norm <= tau_flat:
        return PointClass.FLAT
    if rep.nullity_dim >= n - 2:
        return PointClass.NONFLAT_CN2
    return PointClass.NOT_CN2


def symmetry_residual(R) -> float:
    """Largest violation of the algebraic curvature identities, relative to max |R|."""
    scale = max(float(np.max(np.abs(R))), 1e-300)
    res = [
        R + np.swapaxes(R, -4, -3),
        R + np.swapaxes(R, -2, -1),
        R - np.einsum("...ijkl->...klij", R),
        R + np.einsum("...jkil->...ijkl", R) + np.einsum("...kijl->...ijkl", R),
    ]
    return max(float(np.max(np.abs(r))) for r in res) / scale


def principal_angles(A, B, g=None) -> np.ndarray:
    """Principal angles (ascending) between the row spans of A and B.

    With ``g`` the angles are measured in that inner product. Sines and
    cosines are both taken from SVDs so that tiny angles stay accurate.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if g is not None:
        L = np.linalg.cholesky(g)
        A = A @ L
        B = B @ L
    qa, _ = np.linalg.qr(A.T)
    qb, _ = np.linalg.qr(B.T)
    k = min(qa.shape[1], qb.shape[1])
    cos = np.sort(np.linalg.svd(qa.T @ qb, compute_uv=False))[::-1][:k]
    sin = np.sort(np.linalg.svd(qb - qa @ (qa.T @ qb), compute_uv=False))[:k]
    if qa.shape[1] < qb.shape[1]:
        sin = np.sort(np.linalg.svd(qa - qb @ (qb.T @ qa), compute_uv=False))[:k]
    return np.arctan2(sin, np.clip(cos, 0.0, 1.0))


def subspace_angle(A, B, g=None) -> float:
    """Largest principal angle between the row spans of A and B."""
    ang = principal_angles(A, B, g)
    return float(ang.max()) if ang.size else 0.0


# -- the unit nullity field near a point --------------------------------------

H_C = 1e-4
MIN_PROJECTION = 0.5


def unit_nullity_at(field: MetricField, points, T_ref, mu=None, tau_rank: float = TAU_RANK):
    """Unit nullity vectors at ``points`` continuing the unit vector ``T_ref``.

    Each is the normalised projection of T_ref onto Gamma(q). Raises
    OrientationFlip if the projection is too short to fix the sign (or the
    nullity dimension differs from ``mu``).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cb = curvature_batch(field, pts, tau_rank)
    out = np.empty_like(pts)
    for i in range(len(pts)):
        if mu is not None and cb.mu[i] != mu:
            raise OrientationFlip(f"nullity dimension changes near {pts[i].tolist()}")
        B = cb.nullity_basis(i)
        g = cb.g[i]
        proj = B.T @ (B @ g @ T_ref)
        nrm = np.sqrt(proj @ g @ proj)
        if nrm < MIN_PROJECTION * np.sqrt(T_ref @ g @ T_ref):
            raise OrientationFlip(f"nullity direction not continuous near {pts[i].tolist()}")
        out[i] = proj / nrm
    return out


def nabla_unit_nullity(field: MetricField, x, T, X, h: float = H_C, tau_rank: float = TAU_RANK):
    """(nabla_X That, That(x)) for the unit nullity field That through T at x.

    Central differences of That along X, plus the Christoffel correction.
    """
    x = np.asarray(x, dtype=float)
    X = np.asarray(X, dtype=float)
    mu = int(curvature_batch(field, x[None], tau_rank).mu[0])
    t_m, t_0, t_p = unit_nullity_at(field, [x - h * X, x, x + h * X], T, mu, tau_rank)
    g, dg, _ = field.jet(x[None])
    gam = christoffel_from_jet(g, dg)[0]
    return (t_p - t_m) / (2 * h) + np.einsum("kij,i,j->k", gam, X, t_0), t_0
