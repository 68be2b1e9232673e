"""Compiled multi-step driver for both schemes.

Runs the same sequence of operations as :mod:`gmsphere.stepping`, but keeps
the state in flat arrays and loops inside numba, returning to Python only
between output chunks.  Chunk statistics (conservation and bound checks of
the limiter, limiter activity, Patankar-theta weights) are aggregated over
every step of the chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .fct import FluxConsistencyError, group_fluxes_kernel, local_bounds_kernel, prelimit_kernel, zalesak_kernel
from .fem import Operators
from .linalg import PositivityError, SolverError, bicgstab_csr, cg_csr, csr_matvec
from .reaction import V_FLOOR, ModelParams, PositivityLossError
from .stepping import FLUX_CHECK_RTOL, STEP_TOL, SchemeConfig, State, StateError

OK, POSITIVITY, BICGSTAB_FAIL, CG_FAIL, V_FLOOR_HIT, BAD_STATE, FLUX_MISMATCH = range(7)

# aggregate slots
A_CONS_U, A_CONS_V, A_BOUND_U, A_BOUND_V, A_ALPHA_MIN_U, A_ALPHA_MIN_V, A_ALPHA_SUM_U, A_ALPHA_SUM_V, \
    A_ALPHA_CNT_U, A_ALPHA_CNT_V, A_LIMITED_U, A_LIMITED_V, A_THETA_MAX, A_THETA_ZERO_STEPS, A_RATE_MAX, \
    A_STEADY_RUN, A_RECON, A_ITERS, A_W_MIN, A_FALLBACK = range(20)
N_AGG = 20


@dataclass
class ChunkStats:
    steps: int
    fct_conservation_u: float
    fct_conservation_v: float
    fct_bound_violation_u: float
    fct_bound_violation_v: float
    alpha_min_u: float
    alpha_min_v: float
    alpha_mean_u: float
    alpha_mean_v: float
    n_limited_u: int
    n_limited_v: int
    theta_max: float
    theta_zero_steps: int
    rate_max: float
    steady_run: int
    flux_recon: float
    solver_iterations: int
    w_min: float
    averaged_fallbacks: int = 0

    @classmethod
    def from_agg(cls, steps, agg):
        def mean(s, c):
            return agg[s] / agg[c] if agg[c] > 0 else 1.0

        return cls(
            steps=steps,
            fct_conservation_u=float(agg[A_CONS_U]),
            fct_conservation_v=float(agg[A_CONS_V]),
            fct_bound_violation_u=float(agg[A_BOUND_U]),
            fct_bound_violation_v=float(agg[A_BOUND_V]),
            alpha_min_u=float(agg[A_ALPHA_MIN_U]),
            alpha_min_v=float(agg[A_ALPHA_MIN_V]),
            alpha_mean_u=float(mean(A_ALPHA_SUM_U, A_ALPHA_CNT_U)),
            alpha_mean_v=float(mean(A_ALPHA_SUM_V, A_ALPHA_CNT_V)),
            n_limited_u=int(agg[A_LIMITED_U]),
            n_limited_v=int(agg[A_LIMITED_V]),
            theta_max=float(agg[A_THETA_MAX]),
            theta_zero_steps=int(agg[A_THETA_ZERO_STEPS]),
            rate_max=float(agg[A_RATE_MAX]),
            steady_run=int(agg[A_STEADY_RUN]),
            flux_recon=float(agg[A_RECON]),
            solver_iterations=int(agg[A_ITERS]),
            w_min=float(agg[A_W_MIN]),
            averaged_fallbacks=int(agg[A_FALLBACK]),
        )


def _block_pattern(indptr, indices, n):
    """CSR pattern of ``[[L, I], [I, L]]`` with the pattern of ``L`` on the diagonal blocks."""
    rows = []
    bindptr = np.zeros(2 * n + 1, dtype=np.int64)
    for i in range(n):
        cols = list(indices[indptr[i] : indptr[i + 1]]) + [n + i]
        rows.append(cols)
    for i in range(n):
        cols = [i] + [n + j for j in indices[indptr[i] : indptr[i + 1]]]
        rows.append(cols)
    for r, cols in enumerate(rows):
        bindptr[r + 1] = bindptr[r] + len(cols)
    bindices = np.array([c for cols in rows for c in cols], dtype=np.int64)
    return bindptr, bindices


@numba.njit(cache=True)
def _coefficients(u, v, p, q, r, s, eps, tau_s, v_floor, cu, cv):
    for i in range(len(u)):
        if not v[i] > v_floor:
            return i
        cu[i] = u[i] ** p / v[i] ** (q + 1.0)
        cv[i] = u[i] ** (r - 1.0) / (eps * tau_s * v[i] ** s)
    return -1


@numba.njit(cache=True)
def _theta_stage(w, a, b, dt):
    theta = 0.0
    if w > 0.0 and b > 0.0:
        theta = max(0.0, 1.0 - 1.0 / (dt * b) - a / b / w)
    if theta > 0.0:
        return 0.0, theta
    return (w + dt * (a - b * (1.0 - theta) * w)) / (1.0 + dt * b * theta), theta


@numba.njit(cache=True)
def _low_order(u, v, w_next, dt, n, indptr, indices, l_data, ml, bindptr, bindices, bdata, Du, Dv, bu, bv, cu, cv,
               sigma, e_coeff, tol, max_iter, x, rhs):
    for i in range(n):
        k0 = bindptr[i]
        kk = k0
        for k in range(indptr[i], indptr[i + 1]):
            val = dt * Du * l_data[k]
            if indices[k] == i:
                val += ml[i] * (1.0 + dt * bu[i])
            bdata[kk] = val
            kk += 1
        bdata[kk] = -dt * ml[i] * cu[i]
        k0 = bindptr[n + i]
        bdata[k0] = -dt * ml[i] * cv[i]
        kk = k0 + 1
        for k in range(indptr[i], indptr[i + 1]):
            val = dt * Dv * l_data[k]
            if indices[k] == i:
                val += ml[i] * (1.0 + dt * bv[i])
            bdata[kk] = val
            kk += 1
        rhs[i] = ml[i] * u[i] + dt * sigma * ml[i]
        rhs[n + i] = ml[i] * v[i] + dt * e_coeff * w_next * ml[i]
        x[i] = u[i]
        x[n + i] = v[i]
    its, res = bicgstab_csr(bindptr, bindices, bdata, rhs, x, tol, max_iter)
    return its, res


@numba.njit(cache=True)
def _most_negative(x):
    """Index of the most negative entry if it is below rounding level, else -1."""
    xmax_abs = 0.0
    kmin = 0
    for i in range(len(x)):
        xmax_abs = max(xmax_abs, abs(x[i]))
        if x[i] < x[kmin]:
            kmin = i
    if x[kmin] < -1e-12 * xmax_abs:
        return kmin
    return -1


@numba.njit(cache=True)
def _high_order(un, vn, uL, vL, w_surf, dt, n, indptr, indices, m_data, l_data, ml, cn_u_data, cn_v_data,
                Du, Dv, bu, bv, cu, cv, sigma, e_coeff, tol, max_iter, uH, vH, tmp, tmp2, rh):
    """(M + dt/2 A) xH = (M - dt/2 A) xn + dt M (c p_L - b x_L) + dt * source; returns (its, res) of the worse solve."""
    total = 0
    for var in range(2):
        if var == 0:
            csr_matvec(indptr, indices, m_data, un, tmp)
            csr_matvec(indptr, indices, l_data, un, tmp2)
            for i in range(n):
                rh[i] = cu[i] * vL[i] - bu[i] * uL[i]
            D = Du
            src = sigma
        else:
            csr_matvec(indptr, indices, m_data, vn, tmp)
            csr_matvec(indptr, indices, l_data, vn, tmp2)
            for i in range(n):
                rh[i] = cv[i] * uL[i] - bv[i] * vL[i]
            D = Dv
            src = e_coeff * w_surf
        for i in range(n):
            tmp[i] = tmp[i] - 0.5 * dt * D * tmp2[i]
        csr_matvec(indptr, indices, m_data, rh, tmp2)
        for i in range(n):
            rh[i] = tmp[i] + dt * tmp2[i] + dt * src * ml[i]
        if var == 0:
            for i in range(n):
                uH[i] = uL[i]
            its, res = cg_csr(indptr, indices, cn_u_data, rh, uH, tol, max_iter)
        else:
            for i in range(n):
                vH[i] = vL[i]
            its, res = cg_csr(indptr, indices, cn_v_data, rh, vH, tol, max_iter)
        if its < 0:
            return its, res
        total += its
    return total, 0.0


@numba.njit(cache=True)
def _coupling_bound(bu, bv, cu, cv, dt):
    a = 0.0
    b = 0.0
    for i in range(len(bu)):
        a = max(a, dt * cu[i] / (1.0 + dt * bu[i]))
        b = max(b, dt * cv[i] / (1.0 + dt * bv[i]))
    return a * b


@numba.njit(cache=True)
def _averaged(un, vn, u1, v1, uP, vP, p, q, r, s, eps, tau_s, bu0, bv0, cu0, cv0, bu, bv, cu, cv):
    """Trapezoidal Patankar coefficients; see :func:`gmsphere.stepping.averaged_coefficients`."""
    for i in range(len(un)):
        x = u1[i]
        y = v1[i]
        if x < 0.0 or not y > 0.0:
            x = uP[i]
            y = vP[i]
        cu1 = x**p / y ** (q + 1.0)
        cv1 = x ** (r - 1.0) / (eps * tau_s * y**s)
        if uP[i] > 0.0:
            bu[i] = 0.5 * bu0[i] * (un[i] + x) / uP[i]
            cv[i] = 0.5 * (cv0[i] * un[i] + cv1 * x) / uP[i]
        else:
            bu[i] = bu0[i]
            cv[i] = cv0[i]
        bv[i] = 0.5 * bv0[i] * (vn[i] + y) / vP[i]
        cu[i] = 0.5 * (cu0[i] * vn[i] + cu1 * y) / vP[i]


@numba.njit(cache=True)
def _fct(xn, xL, xH, pL, b, c, ei, ej, a_e, m_e, ml, dt, mode, prelimit, out, work, f, alpha):
    """Limit one unknown; returns (recon error, conservation error, bound violation, alpha min, alpha sum, count, limited)."""
    n = len(xn)
    group_fluxes_kernel(ei, ej, a_e, m_e, b, c, xn, xL, xH, pL, dt, f)
    # reconstruction identity m~ (xH - xL) = dt sum_j f_ij
    div = work[1]
    absf = work[2]
    for i in range(n):
        div[i] = 0.0
        absf[i] = 0.0
    for e in range(len(ei)):
        div[ei[e]] += f[e]
        div[ej[e]] -= f[e]
        absf[ei[e]] += abs(f[e])
        absf[ej[e]] += abs(f[e])
    err = 0.0
    scale = 1e-300
    for i in range(n):
        err = max(err, abs(ml[i] * (xH[i] - xL[i]) - dt * div[i]))
        scale = max(scale, ml[i] * (abs(xH[i]) + abs(xL[i])) + dt * absf[i])
    recon = err / scale
    if prelimit:
        prelimit_kernel(ei, ej, xL, f)
    xmax = work[3]
    xmin = work[4]
    local_bounds_kernel(ei, ej, xL, xmax, xmin)
    zalesak_kernel(ei, ej, f, ml, xL, xmax, xmin, dt, alpha, work[5], work[6], work[7], work[8], work[9], work[10], out, mode)
    mass_L = 0.0
    mass_new = 0.0
    viol = 0.0
    bscale = 1e-300
    for i in range(n):
        mass_L += ml[i] * xL[i]
        mass_new += ml[i] * out[i]
        viol = max(viol, out[i] - xmax[i], xmin[i] - out[i])
        bscale = max(bscale, abs(xmax[i]), abs(xmin[i]))
    cons = abs(mass_new - mass_L) / max(abs(mass_L), 1e-300)
    amin = 1.0
    asum = 0.0
    cnt = 0
    lim = 0
    for e in range(len(ei)):
        if f[e] != 0.0:
            amin = min(amin, alpha[e])
            asum += alpha[e]
            cnt += 1
            if alpha[e] < 1.0:
                lim += 1
    return recon, cons, max(viol, 0.0) / bscale, amin, asum, cnt, lim


@numba.njit(cache=True)
def _restore(u, v, un, vn):
    for i in range(len(u)):
        u[i] = un[i]
        v[i] = vn[i]


@numba.njit(cache=True)
def advance_kernel(order, nsteps, u, v, w_arr, dt,
                   p, q, r, s, eps, sigma, tau_s, tau_b, Du, Dv, bu_c, bv_c, e_coeff, ode_decay, src_factor, v_floor,
                   n, indptr, indices, m_data, l_data, ml, ei, ej, l_e, m_e, bindptr, bindices,
                   cn_u_data, cn_v_data, tol, max_iter, limiter_mode, prelimit, averaged, flux_rtol, steady_rate,
                   steady_run0, agg, fail):
    """Advance ``nsteps``; returns the number of completed steps.

    On failure ``fail`` holds (status, node, value) and the state arrays hold
    the last admissible state.
    """
    bu0 = np.full(n, bu_c)
    bv0 = np.full(n, bv_c)
    cu0 = np.empty(n)
    cv0 = np.empty(n)
    bu = np.empty(n)
    bv = np.empty(n)
    cu = np.empty(n)
    cv = np.empty(n)
    x = np.empty(2 * n)
    rhs = np.empty(2 * n)
    bdata = np.empty(len(bindices))
    uP = np.empty(n)
    vP = np.empty(n)
    uL = np.empty(n)
    vL = np.empty(n)
    uH = np.empty(n)
    vH = np.empty(n)
    un = np.empty(n)
    vn = np.empty(n)
    tmp = np.empty(n)
    tmp2 = np.empty(n)
    rh = np.empty(n)
    work = np.empty((11, n))
    f = np.empty(len(ei))
    alpha = np.empty(len(ei))
    a_u = Du * l_e
    a_v = Dv * l_e
    w = w_arr[0]
    steady = steady_run0
    th1 = th2 = 0.0
    for it in range(nsteps):
        # bulk ODE, first part
        integral = 0.0
        for i in range(n):
            integral += ml[i] * v[i]
        a_rate = src_factor * integral / tau_b
        b_rate = ode_decay / tau_b
        if order == 1:
            w_surf = (tau_b * w + dt * src_factor * integral) / (tau_b + dt * ode_decay)
        else:
            w1, th1 = _theta_stage(w, a_rate, b_rate, 0.5 * dt)
            w2, th2 = _theta_stage(w1, a_rate, b_rate, 0.5 * dt)
            w_surf = 0.5 * (w + w2)
        k = _coefficients(u, v, p, q, r, s, eps, tau_s, v_floor, cu0, cv0)
        if k >= 0:
            fail[0] = V_FLOOR_HIT
            fail[1] = k
            fail[2] = v[k]
            return it
        for i in range(n):
            un[i] = u[i]
            vn[i] = v[i]
        # low order with the coefficients at t_n (the predictor when averaging)
        its, res = _low_order(u, v, w_surf, dt, n, indptr, indices, l_data, ml, bindptr, bindices, bdata, Du, Dv,
                              bu0, bv0, cu0, cv0, sigma, e_coeff, tol, max_iter, x, rhs)
        if its < 0:
            fail[0] = BICGSTAB_FAIL
            fail[1] = -its
            fail[2] = res
            return it
        agg[A_ITERS] += its
        kmin = _most_negative(x)
        if kmin >= 0:
            fail[0] = POSITIVITY
            fail[1] = kmin
            fail[2] = x[kmin]
            return it
        for i in range(n):
            uL[i] = x[i]
            vL[i] = x[n + i]
        if order == 1:
            for i in range(n):
                u[i] = uL[i]
                v[i] = vL[i]
            w = w_surf
        else:
            if averaged:
                for i in range(n):
                    uP[i] = uL[i]
                    vP[i] = vL[i]
                its, res = _high_order(un, vn, uP, vP, w_surf, dt, n, indptr, indices, m_data, l_data, ml,
                                       cn_u_data, cn_v_data, Du, Dv, bu0, bv0, cu0, cv0, sigma, e_coeff, tol, max_iter,
                                       uH, vH, tmp, tmp2, rh)
                if its < 0:
                    fail[0] = CG_FAIL
                    fail[1] = -its
                    fail[2] = res
                    return it
                agg[A_ITERS] += its
                _averaged(un, vn, uH, vH, uP, vP, p, q, r, s, eps, tau_s, bu0, bv0, cu0, cv0, bu, bv, cu, cv)
                if _coupling_bound(bu, bv, cu, cv, dt) >= 1.0:
                    # frozen step: the predictor already is its low-order solution
                    agg[A_FALLBACK] += 1
                    for i in range(n):
                        bu[i] = bu0[i]
                        bv[i] = bv0[i]
                        cu[i] = cu0[i]
                        cv[i] = cv0[i]
                        x[i] = uP[i]
                        x[n + i] = vP[i]
                else:
                    its, res = _low_order(un, vn, w_surf, dt, n, indptr, indices, l_data, ml, bindptr, bindices, bdata,
                                          Du, Dv, bu, bv, cu, cv, sigma, e_coeff, tol, max_iter, x, rhs)
                    if its < 0:
                        fail[0] = BICGSTAB_FAIL
                        fail[1] = -its
                        fail[2] = res
                        return it
                    agg[A_ITERS] += its
                    kmin = _most_negative(x)
                    if kmin >= 0:
                        fail[0] = POSITIVITY
                        fail[1] = kmin
                        fail[2] = x[kmin]
                        return it
                for i in range(n):
                    uL[i] = x[i]
                    vL[i] = x[n + i]
            else:
                for i in range(n):
                    bu[i] = bu0[i]
                    bv[i] = bv0[i]
                    cu[i] = cu0[i]
                    cv[i] = cv0[i]
            its, res = _high_order(un, vn, uL, vL, w_surf, dt, n, indptr, indices, m_data, l_data, ml,
                                   cn_u_data, cn_v_data, Du, Dv, bu, bv, cu, cv, sigma, e_coeff, tol, max_iter,
                                   uH, vH, tmp, tmp2, rh)
            if its < 0:
                fail[0] = CG_FAIL
                fail[1] = -its
                fail[2] = res
                return it
            agg[A_ITERS] += its
            rec, cons, bnd, amin, asum, cnt, lim = _fct(un, uL, uH, vL, bu, cu, ei, ej, a_u, m_e, ml, dt,
                                                        limiter_mode, prelimit, u, work, f, alpha)
            agg[A_RECON] = max(agg[A_RECON], rec)
            agg[A_CONS_U] = max(agg[A_CONS_U], cons)
            agg[A_BOUND_U] = max(agg[A_BOUND_U], bnd)
            agg[A_ALPHA_MIN_U] = min(agg[A_ALPHA_MIN_U], amin)
            agg[A_ALPHA_SUM_U] += asum
            agg[A_ALPHA_CNT_U] += cnt
            agg[A_LIMITED_U] += lim
            rec, cons, bnd, amin, asum, cnt, lim = _fct(vn, vL, vH, uL, bv, cv, ei, ej, a_v, m_e, ml, dt,
                                                        limiter_mode, prelimit, v, work, f, alpha)
            agg[A_RECON] = max(agg[A_RECON], rec)
            agg[A_CONS_V] = max(agg[A_CONS_V], cons)
            agg[A_BOUND_V] = max(agg[A_BOUND_V], bnd)
            agg[A_ALPHA_MIN_V] = min(agg[A_ALPHA_MIN_V], amin)
            agg[A_ALPHA_SUM_V] += asum
            agg[A_ALPHA_CNT_V] += cnt
            agg[A_LIMITED_V] += lim
            if agg[A_RECON] > flux_rtol:
                fail[0] = FLUX_MISMATCH
                fail[1] = -1
                fail[2] = agg[A_RECON]
                _restore(u, v, un, vn)
                return it
            integral = 0.0
            for i in range(n):
                integral += ml[i] * v[i]
            a_rate = src_factor * integral / tau_b
            w3, th3 = _theta_stage(w_surf, a_rate, b_rate, 0.5 * dt)
            w4, th4 = _theta_stage(w3, a_rate, b_rate, 0.5 * dt)
            w = 0.5 * (w_surf + w4)
            th = max(max(th1, th2), max(th3, th4))
            agg[A_THETA_MAX] = max(agg[A_THETA_MAX], th)
            if th == 0.0:
                agg[A_THETA_ZERO_STEPS] += 1
        # state invariants
        rate = 0.0
        for i in range(n):
            if not (math.isfinite(u[i]) and u[i] >= 0.0):
                fail[0] = BAD_STATE
                fail[1] = i
                fail[2] = u[i]
                _restore(u, v, un, vn)
                return it
            if not (math.isfinite(v[i]) and v[i] > 0.0):
                fail[0] = BAD_STATE
                fail[1] = n + i
                fail[2] = v[i]
                _restore(u, v, un, vn)
                return it
            rate = max(rate, abs(u[i] - un[i]))
        if not (math.isfinite(w) and w >= 0.0):
            fail[0] = BAD_STATE
            fail[1] = 2 * n
            fail[2] = w
            _restore(u, v, un, vn)
            return it
        rate /= dt
        agg[A_RATE_MAX] = max(agg[A_RATE_MAX], rate)
        agg[A_W_MIN] = min(agg[A_W_MIN], w)
        if rate < steady_rate:
            steady += 1
        else:
            steady = 0
        agg[A_STEADY_RUN] = steady
        w_arr[0] = w
    return nsteps


class Integrator:
    """Prepared problem data for repeated compiled stepping on one mesh."""

    STEADY_RATE = 1e-8

    def __init__(self, ops: Operators, params: ModelParams, scheme: SchemeConfig):
        self.ops = ops
        self.params = params.with_(gamma_area=ops.area) if params.gamma_area != ops.area else params
        self.scheme = scheme
        M, L = ops.M, ops.L
        self.n = M.shape[0]
        self.indptr = M.indptr.astype(np.int64)
        self.indices = M.indices.astype(np.int64)
        self.m_data = M.data.copy()
        self.l_data = L.data.copy()
        self.ml = ops.M_lumped.copy()
        edges = ops.mesh.edges
        self.ei = edges[:, 0].astype(np.int64).copy()
        self.ej = edges[:, 1].astype(np.int64).copy()
        self.l_e = np.asarray(L[self.ei, self.ej]).ravel()
        self.m_e = np.asarray(M[self.ei, self.ej]).ravel()
        self.bindptr, self.bindices = _block_pattern(self.indptr, self.indices, self.n)
        dt = scheme.dt
        P = self.params
        self.cn_u_data = self.m_data + 0.5 * dt * P.diffusion_u * self.l_data
        self.cn_v_data = self.m_data + 0.5 * dt * P.diffusion_v * self.l_data
        self.max_iter = scheme.max_iter or max(10 * 2 * self.n, 20)
        self.steady_run = 0
        self.steps_done = 0

    def advance(self, state: State, nsteps: int):
        """Advance in place by ``nsteps``; returns ``(state, ChunkStats)``.

        Raises the matching error type (with ``step`` set) when an
        invariant fails; ``state`` is then left at the last good step.
        """
        P, S = self.params, self.scheme
        state.check(self.steps_done)
        agg = np.zeros(N_AGG)
        agg[A_ALPHA_MIN_U] = agg[A_ALPHA_MIN_V] = 1.0
        agg[A_W_MIN] = np.inf
        fail = np.zeros(3)
        w_arr = np.array([state.w])
        limiter_mode = {"limit": 0, "zero": 1, "one": 2}[S.limiter]
        done = advance_kernel(
            S.order, int(nsteps), state.u, state.v, w_arr, S.dt,
            P.p, P.q, P.r, P.s, P.epsilon, P.sigma, P.tau_s, P.tau_b, P.diffusion_u, P.diffusion_v,
            1.0, (1.0 + P.K) / P.tau_s, P.e_coeff, P.ode_decay, P.ode_source_factor, V_FLOOR,
            self.n, self.indptr, self.indices, self.m_data, self.l_data, self.ml, self.ei, self.ej,
            self.l_e, self.m_e, self.bindptr, self.bindices, self.cn_u_data, self.cn_v_data,
            S.tol, self.max_iter, limiter_mode, S.prelimit, S.reaction == "averaged", FLUX_CHECK_RTOL, self.STEADY_RATE,
            self.steady_run,
            agg, fail,
        )
        state.w = float(w_arr[0])
        state.t = state.t + done * S.dt
        self.steady_run = int(agg[A_STEADY_RUN])
        step = self.steps_done + done + 1
        self.steps_done += done
        if done < nsteps:
            self._raise(int(fail[0]), int(fail[1]), float(fail[2]), step)
        return state, ChunkStats.from_agg(done, agg)

    def _raise(self, status, node, value, step):
        n = self.n
        if status == POSITIVITY:
            name = "u" if node < n else "v"
            err = PositivityError(f"step {step}: low-order solution {name}[{node % n}] = {value:.3e} < 0",
                                  node=node % n, value=value, step=step)
        elif status == BICGSTAB_FAIL:
            err = SolverError(f"step {step}: BiCGStab did not converge", value, node)
        elif status == CG_FAIL:
            err = SolverError(f"step {step}: CG did not converge", value, node)
        elif status == V_FLOOR_HIT:
            err = PositivityLossError(node, value)
        elif status == FLUX_MISMATCH:
            err = FluxConsistencyError(f"step {step}: flux reconstruction error {value:.3e}")
        else:
            what = "u" if node < n else ("v" if node < 2 * n else "w")
            err = StateError(f"step {step}: {what}[{node % n if node < 2 * n else 0}] = {value!r} violates the state invariants",
                             node % n if node < 2 * n else -1, step)
        err.step = step
        raise err
