"""Positivity-preserving time integrators for the shadow Gierer-Meinhardt system.

Two schemes advance ``(u, v, w)``:

* order 1: implicit Euler for the bulk ODE, then the lumped Patankar-Euler
  surface solve using the new ``w``;
* order 2: Strang splitting.  Half a Patankar-theta step for the ODE, one
  surface step (lumped Patankar-Euler low-order solution, modified
  Crank-Nicolson high-order solution, Zalesak limiting of ``u`` and ``v``
  separately), then the second ODE half step with the new ``v``.

The functions here are the readable reference path built on scipy sparse
matrices.  :mod:`gmsphere.integrator` runs the same steps in compiled loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .fct import FctWorkspace, compute_fluxes, zalesak_limit
from .fem import Operators
from .linalg import BlockSystem, solve_coupled, solve_spd
from .reaction import ModelParams, group_matrix, patankar_coefficients


# tighter than the solver default: the FCT flux reconstruction inherits the Krylov residual
STEP_TOL = 1e-12
# runtime guard against mismatched matrices; exact solves satisfy the identity to ~1e-14
FLUX_CHECK_RTOL = 1e-8
# order-2 surface coefficients: frozen at t_n, or trapezoidal averages over a Patankar-Euler predictor
REACTION_MODES = ("frozen", "averaged")


class StateError(RuntimeError):
    def __init__(self, message, node=-1, step=-1):
        super().__init__(message)
        self.node = node
        self.step = step


@dataclass
class State:
    u: np.ndarray
    v: np.ndarray
    w: float
    t: float = 0.0

    def copy(self) -> "State":
        return State(self.u.copy(), self.v.copy(), float(self.w), float(self.t))

    def check(self, step: int = -1) -> "State":
        """Raise :class:`StateError` unless ``u >= 0``, ``v > 0``, ``w >= 0`` and all finite."""
        for name, x in (("u", self.u), ("v", self.v)):
            bad = np.flatnonzero(~np.isfinite(x))
            if bad.size:
                raise StateError(f"non-finite {name} at node {bad[0]} (step {step})", int(bad[0]), step)
        k = int(np.argmin(self.u))
        if self.u[k] < 0.0:
            raise StateError(f"u[{k}] = {self.u[k]:.3e} < 0 (step {step})", k, step)
        k = int(np.argmin(self.v))
        if not self.v[k] > 0.0:
            raise StateError(f"v[{k}] = {self.v[k]:.3e} <= 0 (step {step})", k, step)
        if not (math.isfinite(self.w) and self.w >= 0.0):
            raise StateError(f"w = {self.w!r} is not a nonnegative number (step {step})", -1, step)
        return self


@dataclass
class SchemeConfig:
    dt: float
    order: int = 1
    tol: float = STEP_TOL
    max_iter: int | None = None
    limiter: str = "limit"
    prelimit: bool = False
    reaction: str = "averaged"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.order not in (1, 2):
            raise ValueError(f"order must be 1 or 2, got {self.order}")
        if self.limiter not in ("limit", "zero", "one"):
            raise ValueError(f"unknown limiter mode {self.limiter!r}")
        if self.reaction not in REACTION_MODES:
            raise ValueError(f"unknown reaction mode {self.reaction!r}")


def _with_area(params: ModelParams, ops: Operators) -> ModelParams:
    if params.gamma_area != ops.area:
        return replace(params, gamma_area=ops.area)
    return params


def ode_source_total(v, ops: Operators, params: ModelParams) -> float:
    """``factor * sum_i G(v)_i`` with ``G(v) = M v``; the lumped mass gives the same sum."""
    return params.ode_source_factor * float(ops.M_lumped @ v)


def ode_step_euler(w: float, v, dt: float, ops: Operators, params: ModelParams) -> float:
    """Implicit Euler step of ``tau_b w' = -(1 + K|G|/|O|) w + K sum G(v)``."""
    src = ode_source_total(v, ops, params)
    return (params.tau_b * w + dt * src) / (params.tau_b + dt * params.ode_decay)


def theta_stage(w: float, a: float, b: float, dt: float):
    """One Patankar-theta stage for ``w' = a - b w``; returns ``(w_new, theta)``."""
    if w > 0.0:
        theta = max(0.0, 1.0 - 1.0 / (dt * b) - a / b / w) if b > 0.0 else 0.0
    else:
        theta = 0.0
    if theta > 0.0:
        # the explicit part cancels exactly for this theta
        return 0.0, theta
    w_new = (w + dt * (a - b * (1.0 - theta) * w)) / (1.0 + dt * b * theta)
    return w_new, theta


def patankar_theta(w: float, a: float, b: float, dt: float):
    """SSP-RK2 with per-stage Patankar weights; returns ``(w_new, theta1, theta2)``."""
    w1, th1 = theta_stage(w, a, b, dt)
    w2, th2 = theta_stage(w1, a, b, dt)
    return 0.5 * (w + w2), th1, th2


def ode_rates(v, ops: Operators, params: ModelParams):
    """``a`` and ``b`` of ``w' = a - b w`` for the bulk ODE with ``v`` frozen."""
    a = ode_source_total(v, ops, params) / params.tau_b
    b = params.ode_decay / params.tau_b
    return a, b


def patankar_theta_ode_step(w: float, v, dt: float, ops: Operators, params: ModelParams, info: dict | None = None) -> float:
    a, b = ode_rates(v, ops, params)
    w_new, th1, th2 = patankar_theta(w, a, b, dt)
    if info is not None:
        info.setdefault("theta", []).append((th1, th2))
    return w_new


def m_matrix_margin(u, v, dt: float, params: ModelParams) -> float:
    """``(1+dt bu)(1+dt bv) / (dt^2 max(cu) max(cv))``.

    Above 1, a constant-per-block positive vector certifies that the
    low-order block matrix is an M-matrix (given a nonpositive stiffness
    off-diagonal), so its solution is nonnegative.  Below 1 the coupling
    may overpower the diagonal and positivity is not guaranteed.
    """
    bu, bv, cu, cv = patankar_coefficients(u, v, params)
    denom = dt * dt * float(cu.max()) * float(cv.max())
    num = (1.0 + dt * float(bu.max())) * (1.0 + dt * float(bv.max()))
    return math.inf if denom == 0.0 else num / denom


def coupling_bound(coeffs, dt: float) -> float:
    """``max(dt cu / (1 + dt bu)) * max(dt cv / (1 + dt bv))``.

    Below 1 some vector that is constant on each block has a positive image
    under the low-order matrix, which is then an M-matrix for any admissible
    stiffness.  Sharper than :func:`m_matrix_margin` when coefficients vary.
    """
    bu, bv, cu, cv = coeffs
    return float((dt * cu / (1.0 + dt * bu)).max()) * float((dt * cv / (1.0 + dt * bv)).max())


def averaged_coefficients(u0, v0, u1, v1, uP, vP, params: ModelParams):
    """Patankar coefficients whose products with the new low-order solution average two rates.

    Each rate ``k(x) y`` becomes ``(k(x0) y0 + k(x1) y1) / (2 yP) * y_new``:
    the trapezoidal rule between the old state ``x0`` and a predicted end
    state ``x1``, with the Patankar weight ``y_new / yP`` taken against the
    low-order predictor ``yP``.  Nodes where ``x1`` leaves the admissible
    set fall back to the low-order predictor, and nodes where ``yP``
    vanishes keep the coefficient at ``x0``.
    """
    bad = (u1 < 0.0) | ~(v1 > 0.0)
    u1 = np.where(bad, uP, u1)
    v1 = np.where(bad, vP, v1)
    c0 = patankar_coefficients(u0, v0, params)
    c1 = patankar_coefficients(u1, v1, params)
    out = []
    for k0, k1, y0, y1, yp in zip(c0, c1, (u0, v0, v0, u0), (u1, v1, v1, u1), (uP, vP, vP, uP)):
        safe = np.where(yp > 0.0, yp, 1.0)
        out.append(np.where(yp > 0.0, 0.5 * (k0 * y0 + k1 * y1) / safe, k0))
    return tuple(out)


def low_order_system(state: State, w_next: float, dt: float, ops: Operators, params: ModelParams, coeffs=None) -> BlockSystem:
    ml = ops.M_lumped
    bu, bv, cu, cv = coeffs or patankar_coefficients(state.u, state.v, params)
    Au = params.diffusion_u * ops.L
    Av = params.diffusion_v * ops.L
    diag = sp.diags
    return BlockSystem(
        uu=(diag(ml * (1.0 + dt * bu)) + dt * Au).tocsr(),
        uv=diag(-dt * ml * cu).tocsr(),
        vu=diag(-dt * ml * cv).tocsr(),
        vv=(diag(ml * (1.0 + dt * bv)) + dt * Av).tocsr(),
        rhs_u=ml * state.u + dt * params.sigma * ml,
        rhs_v=ml * state.v + dt * params.e_coeff * w_next * ml,
    )


def surface_step_low(state: State, w_next: float, dt: float, ops: Operators, params: ModelParams, tol=STEP_TOL, max_iter=None,
                     coeffs=None):
    """Lumped Patankar-Euler step of the surface system; returns ``(u_L, v_L)``.

    ``coeffs`` overrides the Patankar coefficients, which default to their values at ``state``.
    """
    params = _with_area(params, ops)
    S = low_order_system(state, w_next, dt, ops, params, coeffs)
    return solve_coupled(S, tol=tol, max_iter=max_iter, x0=(state.u, state.v))


def surface_step_high(state: State, u_L, v_L, w_next: float, dt: float, ops: Operators, params: ModelParams, tol=STEP_TOL, max_iter=None,
                      coeffs=None):
    """Crank-Nicolson diffusion with reactions evaluated at the low-order solution."""
    params = _with_area(params, ops)
    bu, bv, cu, cv = coeffs or patankar_coefficients(state.u, state.v, params)
    M = ops.M
    Au = params.diffusion_u * ops.L
    Av = params.diffusion_v * ops.L
    ml = ops.M_lumped
    rhs_u = M @ state.u - 0.5 * dt * (Au @ state.u) + dt * (M @ (cu * v_L - bu * u_L)) + dt * params.sigma * ml
    rhs_v = M @ state.v - 0.5 * dt * (Av @ state.v) + dt * (M @ (cv * u_L - bv * v_L)) + dt * params.e_coeff * w_next * ml
    u_H = solve_spd(M + 0.5 * dt * Au, rhs_u, tol=tol, max_iter=max_iter, x0=u_L)
    v_H = solve_spd(M + 0.5 * dt * Av, rhs_v, tol=tol, max_iter=max_iter, x0=v_L)
    return u_H, v_H


def step_first_order(state: State, dt: float, ops: Operators, params: ModelParams, tol=STEP_TOL, max_iter=None) -> State:
    params = _with_area(params, ops)
    w_next = ode_step_euler(state.w, state.v, dt, ops, params)
    u, v = surface_step_low(state, w_next, dt, ops, params, tol, max_iter)
    return State(u, v, w_next, state.t + dt)


def fct_correct(state: State, u_L, v_L, u_H, v_H, dt, ops: Operators, params: ModelParams, limiter="limit", prelimit=False, info=None,
                coeffs=None):
    """Limit ``u_H`` and ``v_H`` towards the low-order bounds; returns ``(u, v)``."""
    bu, bv, cu, cv = coeffs or patankar_coefficients(state.u, state.v, params)
    M = ops.M
    out = []
    for name, xn, xL, xH, pL, b, c, D in (
        ("u", state.u, u_L, u_H, v_L, bu, cu, params.diffusion_u),
        ("v", state.v, v_L, v_H, u_L, bv, cv, params.diffusion_v),
    ):
        ws = FctWorkspace(ops.mesh.edges, xn, xL, xH, partner_L=pL, prelimit=prelimit)
        compute_fluxes(ws, D * ops.L, group_matrix(M, b), group_matrix(M, c), M, dt, rtol=FLUX_CHECK_RTOL)
        zalesak_limit(ws, ops.M_lumped, dt, mode=limiter)
        out.append(ws.stats["u_new"])
        if info is not None:
            info[f"fct_{name}"] = ws
    return out[0], out[1]


def step_second_order(state: State, dt: float, ops: Operators, params: ModelParams, tol=STEP_TOL, max_iter=None,
                      limiter="limit", prelimit=False, info: dict | None = None, reaction="averaged") -> State:
    params = _with_area(params, ops)
    w_half = patankar_theta_ode_step(state.w, state.v, 0.5 * dt, ops, params, info)
    mid = State(state.u, state.v, w_half, state.t)
    coeffs = None
    if reaction == "averaged":
        u_P, v_P = surface_step_low(mid, w_half, dt, ops, params, tol, max_iter)
        u_C, v_C = surface_step_high(mid, u_P, v_P, w_half, dt, ops, params, tol, max_iter)
        coeffs = averaged_coefficients(state.u, state.v, u_C, v_C, u_P, v_P, params)
        # stiff transients can break the M-matrix property; keep the frozen step then
        if coupling_bound(coeffs, dt) >= 1.0:
            coeffs = None
        if info is not None:
            info["averaged_fallback"] = coeffs is None
    u_L, v_L = surface_step_low(mid, w_half, dt, ops, params, tol, max_iter, coeffs)
    u_H, v_H = surface_step_high(mid, u_L, v_L, w_half, dt, ops, params, tol, max_iter, coeffs)
    u, v = fct_correct(mid, u_L, v_L, u_H, v_H, dt, ops, params, limiter, prelimit, info, coeffs)
    if info is not None:
        info.update(u_L=u_L, v_L=v_L, u_H=u_H, v_H=v_H)
    w_new = patankar_theta_ode_step(w_half, v, 0.5 * dt, ops, params, info)
    return State(u, v, w_new, state.t + dt)


def step(state: State, scheme: SchemeConfig, ops: Operators, params: ModelParams, info=None) -> State:
    if scheme.order == 1:
        return step_first_order(state, scheme.dt, ops, params, scheme.tol, scheme.max_iter)
    return step_second_order(state, scheme.dt, ops, params, scheme.tol, scheme.max_iter, scheme.limiter, scheme.prelimit, info,
                             scheme.reaction)
