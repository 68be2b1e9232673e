"""Flux-corrected transport: antidiffusive edge fluxes and Zalesak's limiter.

Fluxes are stored once per undirected edge ``(i, j)``, ``i < j``, as the flux
into ``i``; the flux into ``j`` is its negative.  Correction factors are
symmetric, so any limited correction moves mass between neighbours without
creating or destroying it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

from .fem import lump


class FluxConsistencyError(RuntimeError):
    """Fluxes do not reproduce the high-order solution (matrices do not match)."""


@dataclass
class FctWorkspace:
    """Per-step FCT data for one unknown.

    ``partner_L`` is the low-order solution of the *other* unknown; it enters
    through the cross-coupling source term.
    """

    edges: np.ndarray
    u_n: np.ndarray
    u_L: np.ndarray
    u_H: np.ndarray
    partner_L: np.ndarray | None = None
    fluxes: np.ndarray | None = None
    alpha: np.ndarray | None = None
    u_max: np.ndarray | None = None
    u_min: np.ndarray | None = None
    P_plus: np.ndarray | None = None
    P_minus: np.ndarray | None = None
    Q_plus: np.ndarray | None = None
    Q_minus: np.ndarray | None = None
    R_plus: np.ndarray | None = None
    R_minus: np.ndarray | None = None
    prelimit: bool = False
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.ascontiguousarray(self.edges, dtype=np.int64)
        for name in ("u_n", "u_L", "u_H"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        if self.partner_L is None:
            self.partner_L = np.zeros_like(self.u_L)
        if self.u_max is None:
            self.u_max, self.u_min = local_bounds(self.edges, self.u_L)


@numba.njit(cache=True)
def local_bounds_kernel(ei, ej, x, xmax, xmin):
    n = len(x)
    for i in range(n):
        xmax[i] = x[i]
        xmin[i] = x[i]
    for e in range(len(ei)):
        i, j = ei[e], ej[e]
        if x[j] > xmax[i]:
            xmax[i] = x[j]
        if x[j] < xmin[i]:
            xmin[i] = x[j]
        if x[i] > xmax[j]:
            xmax[j] = x[i]
        if x[i] < xmin[j]:
            xmin[j] = x[i]


def local_bounds(edges, x):
    """Max/min of ``x`` over each vertex and its edge neighbours."""
    xmax = np.empty_like(x)
    xmin = np.empty_like(x)
    local_bounds_kernel(edges[:, 0].copy(), edges[:, 1].copy(), x, xmax, xmin)
    return xmax, xmin


@numba.njit(cache=True)
def group_fluxes_kernel(ei, ej, a_e, m_e, b, c, un, uL, uH, pL, dt, f):
    """Antidiffusive fluxes for symmetric ``a_ij``, ``m_ij`` and group-FE reactions.

    ``b``/``c`` are nodal coefficients so ``b_ij = m_ij b_j``.
    """
    for e in range(len(ei)):
        i, j = ei[e], ej[e]
        a = a_e[e]
        m = m_e[e]
        dL = uL[j] - uL[i]
        dH = uH[j] - uH[i]
        dn = un[j] - un[i]
        f[e] = (
            a * (dL - 0.5 * dH - 0.5 * dn)
            - m * (b[j] * uL[j] - b[i] * uL[i])
            + m * (c[j] * pL[j] - c[i] * pL[i])
            - (m / dt) * (dH - dn)
        )


@numba.njit(cache=True)
def matrix_fluxes_kernel(ei, ej, a_e, m_e, b_ij, b_ji, c_ij, c_ji, un, uL, uH, pL, dt, f):
    for e in range(len(ei)):
        i, j = ei[e], ej[e]
        a = a_e[e]
        m = m_e[e]
        dL = uL[j] - uL[i]
        dH = uH[j] - uH[i]
        dn = un[j] - un[i]
        f[e] = (
            a * (dL - 0.5 * dH - 0.5 * dn)
            - (b_ij[e] * uL[j] - b_ji[e] * uL[i])
            + (c_ij[e] * pL[j] - c_ji[e] * pL[i])
            - (m / dt) * (dH - dn)
        )


@numba.njit(cache=True)
def prelimit_kernel(ei, ej, uL, f):
    # f is the flux into ei; one running from the higher to the lower node flattens, drop it
    for e in range(len(ei)):
        if f[e] * (uL[ej[e]] - uL[ei[e]]) > 0.0:
            f[e] = 0.0


@numba.njit(cache=True)
def zalesak_kernel(ei, ej, f, ml, uL, umax, umin, dt, alpha, Pp, Pm, Qp, Qm, Rp, Rm, out, mode):
    """Zalesak correction factors and the corrected solution.

    ``mode``: 0 limit, 1 force alpha = 0, 2 force alpha = 1.
    """
    n = len(uL)
    for i in range(n):
        Pp[i] = 0.0
        Pm[i] = 0.0
    for e in range(len(ei)):
        i, j = ei[e], ej[e]
        fe = f[e]
        if fe > 0.0:
            Pp[i] += fe
            Pm[j] -= fe
        elif fe < 0.0:
            Pm[i] += fe
            Pp[j] -= fe
    for i in range(n):
        Qp[i] = ml[i] * (umax[i] - uL[i]) / dt
        Qm[i] = ml[i] * (umin[i] - uL[i]) / dt
        Rp[i] = min(1.0, Qp[i] / Pp[i]) if Pp[i] > 0.0 else 1.0
        Rm[i] = min(1.0, Qm[i] / Pm[i]) if Pm[i] < 0.0 else 1.0
    for e in range(len(ei)):
        i, j = ei[e], ej[e]
        if mode == 1:
            alpha[e] = 0.0
        elif mode == 2:
            alpha[e] = 1.0
        elif f[e] > 0.0:
            alpha[e] = min(Rp[i], Rm[j])
        else:
            alpha[e] = min(Rm[i], Rp[j])
    corr = np.zeros(n)
    for e in range(len(ei)):
        g = alpha[e] * f[e]
        corr[ei[e]] += g
        corr[ej[e]] -= g
    for i in range(n):
        out[i] = uL[i] + dt * corr[i] / ml[i]


def _edge_entries(A: sp.csr_matrix, edges: np.ndarray):
    """Entries ``A[i, j]`` and ``A[j, i]`` for every edge."""
    A = sp.csr_matrix(A)
    ij = np.asarray(A[edges[:, 0], edges[:, 1]]).ravel()
    ji = np.asarray(A[edges[:, 1], edges[:, 0]]).ravel()
    return ij, ji


def flux_divergence(edges, fluxes, n):
    """``sum_j f_ij`` per node."""
    out = np.zeros(n)
    np.add.at(out, edges[:, 0], fluxes)
    np.add.at(out, edges[:, 1], -fluxes)
    return out


def reconstruction_error(edges, f, ml, u_L, u_H, dt):
    """Max violation of ``m~ u_H = m~ u_L + dt sum_j f_ij`` and the magnitude it is measured against."""
    n = len(ml)
    lhs = ml * (u_H - u_L)
    rhs = dt * flux_divergence(edges, f, n)
    abs_sum = np.zeros(n)
    np.add.at(abs_sum, edges[:, 0], np.abs(f))
    np.add.at(abs_sum, edges[:, 1], np.abs(f))
    scale = (ml * (np.abs(u_H) + np.abs(u_L)) + dt * abs_sum).max()
    return float(np.abs(lhs - rhs).max()), float(max(scale, np.finfo(float).tiny))


def compute_fluxes(ws: FctWorkspace, A, B, C, M, dt: float, rtol: float = 1e-11) -> np.ndarray:
    """Raw antidiffusive fluxes ``f_ij`` from the low- and high-order systems.

    ``A`` is the symmetric diffusion matrix, ``B``/``C`` the sink and
    cross-source matrices, ``M`` the consistent mass matrix.  The lumped
    reaction terms of the low-order system must be the column sums of
    ``B`` and ``C``; then ``m~_i u_H = m~_i u_L + dt sum_j f_ij`` holds.
    """
    edges = ws.edges
    a_ij, _ = _edge_entries(A, edges)
    m_ij, _ = _edge_entries(M, edges)
    b_ij, b_ji = _edge_entries(B, edges)
    c_ij, c_ji = _edge_entries(C, edges)
    f = np.empty(len(edges))
    matrix_fluxes_kernel(
        edges[:, 0].copy(), edges[:, 1].copy(), a_ij, m_ij, b_ij, b_ji, c_ij, c_ji,
        ws.u_n, ws.u_L, ws.u_H, ws.partner_L, dt, f,
    )
    ml = lump(M)
    err, scale = reconstruction_error(edges, f, ml, ws.u_L, ws.u_H, dt)
    if err > rtol * scale:
        raise FluxConsistencyError(f"flux reconstruction error {err:.3e} exceeds {rtol:g} * {scale:.3e}")
    if ws.prelimit:
        prelimit_kernel(edges[:, 0].copy(), edges[:, 1].copy(), ws.u_L, f)
    ws.fluxes = f
    return f


def zalesak_limit(ws: FctWorkspace, m_lumped, dt: float, mode: str = "limit") -> np.ndarray:
    """Symmetric correction factors; the corrected solution is stored in ``ws.stats['u_new']``.

    ``mode`` may be ``"limit"`` or, for testing the degenerate cases,
    ``"zero"``/``"one"``.
    """
    n = len(ws.u_L)
    ne = len(ws.edges)
    ws.alpha = np.empty(ne)
    ws.P_plus, ws.P_minus, ws.Q_plus, ws.Q_minus, ws.R_plus, ws.R_minus = (np.empty(n) for _ in range(6))
    out = np.empty(n)
    code = {"limit": 0, "zero": 1, "one": 2}[mode]
    zalesak_kernel(
        ws.edges[:, 0].copy(), ws.edges[:, 1].copy(), ws.fluxes, np.asarray(m_lumped, dtype=np.float64),
        ws.u_L, ws.u_max, ws.u_min, dt, ws.alpha,
        ws.P_plus, ws.P_minus, ws.Q_plus, ws.Q_minus, ws.R_plus, ws.R_minus, out, code,
    )
    active = ws.fluxes != 0.0
    ws.stats = {
        "u_new": out,
        "alpha_min": float(ws.alpha[active].min()) if active.any() else 1.0,
        "alpha_mean": float(ws.alpha[active].mean()) if active.any() else 1.0,
        "n_limited": int(np.count_nonzero(ws.alpha[active] < 1.0)),
    }
    return ws.alpha


def limited_solution(ws: FctWorkspace, m_lumped, dt: float) -> np.ndarray:
    """``u_L + dt/m~ * sum_j alpha_ij f_ij`` for the current ``ws.alpha``."""
    return ws.u_L + dt * flux_divergence(ws.edges, ws.alpha * ws.fluxes, len(ws.u_L)) / m_lumped
