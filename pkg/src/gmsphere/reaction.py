"""Patankar-linearised Gierer-Meinhardt reaction terms.

Both surface equations are written with unit time derivative: the inhibitor
equation is divided by ``tau_s`` so that every 1/tau_s lives inside the
inhibitor coefficients.  Nonlinear sources are rewritten as
``(h(u, v) / x) * x`` with ``x`` the *other* unknown, giving cross-coupling
coefficients that are nonnegative for admissible states:

    du/dt = eps^2 Lap u - 1 * u          + [u^p / v^(q+1)] * v            + sigma
    dv/dt = D_s/tau_s Lap v - (1+K)/tau_s * v + [u^(r-1) / (eps tau_s v^s)] * u + K w / (tau_s |Omega|)

Matrices use the group finite element form ``(B)_ij = m_ij * b_j``; their
lumped counterparts ``m~_i * b_i`` equal the column sums of ``B``, which is
what makes the consistent-minus-lumped difference expressible through
antisymmetric edge fluxes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.sparse as sp

V_FLOOR = 1e-14
UNIT_BALL_VOLUME = 4.0 * math.pi / 3.0


class ParameterError(ValueError):
    pass


class PositivityLossError(RuntimeError):
    """The inhibitor fell to the floor where the Patankar coefficients blow up."""

    def __init__(self, node, value):
        super().__init__(f"inhibitor value {value:.3e} at node {node} is below the floor {V_FLOOR:g}")
        self.node = node
        self.value = value


@dataclass(frozen=True)
class ModelParams:
    p: float = 2.0
    q: float = 4.0
    r: float = 3.0
    s: float = 4.0
    epsilon: float = 0.1
    sigma: float = 0.01
    D_s: float = 10.0
    tau_s: float = 0.6
    tau_b: float = 0.1
    K: float = 0.002
    gamma_area: float = 4.0 * math.pi
    omega_volume: float = UNIT_BALL_VOLUME
    ode_source_scaling: str = "direct"

    def validate(self, check_exponents: bool = True, dim: int = 3) -> "ModelParams":
        positive = ("epsilon", "D_s", "tau_s", "tau_b", "gamma_area", "omega_volume")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sigma < 0 or self.K < 0:
            raise ParameterError("sigma and K must be nonnegative")
        if self.ode_source_scaling not in ("direct", "derived"):
            raise ParameterError(f"unknown ode_source_scaling {self.ode_source_scaling!r}")
        if check_exponents:
            ratio = (self.p - 1.0) / self.r if self.r > 0 else math.inf
            if not (self.p > 1 and self.q > 0 and self.r > 0 and self.s >= 0):
                raise ParameterError("need p > 1, q > 0, r > 0, s >= 0")
            if not (0 < ratio < self.q / (self.s + 1) and ratio < 2.0 / (dim + 1)):
                raise ParameterError(
                    f"(p-1)/r = {ratio:.4g} outside the admissible window "
                    f"(0, min(q/(s+1), 2/(n+1))) = (0, {min(self.q / (self.s + 1), 2.0 / (dim + 1)):.4g})"
                )
        return self

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def ratio_area_volume(self) -> float:
        return self.gamma_area / self.omega_volume

    @property
    def ode_decay(self) -> float:
        """``1 + K |Gamma| / |Omega|``: linear decay rate of the bulk ODE times tau_b."""
        return 1.0 + self.K * self.ratio_area_volume

    @property
    def ode_source_factor(self) -> float:
        """Multiplier of the integral of v in the bulk ODE (before dividing by tau_b)."""
        return self.K if self.ode_source_scaling == "direct" else self.K / self.omega_volume

    @property
    def e_coeff(self) -> float:
        """``E(w)_i = e_coeff * w * m~_i``."""
        return self.K / (self.tau_s * self.omega_volume)

    @property
    def diffusion_u(self) -> float:
        return self.epsilon**2

    @property
    def diffusion_v(self) -> float:
        return self.D_s / self.tau_s


def patankar_coefficients(u, v, params: ModelParams):
    """Nodal coefficients ``(bu, bv, cu, cv)`` of the Patankar-linearised reactions."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    bad = np.flatnonzero(~(v > V_FLOOR))
    if bad.size:
        k = int(bad[np.argmin(v[bad])]) if np.all(np.isfinite(v[bad])) else int(bad[0])
        raise PositivityLossError(k, float(v[k]))
    bu = np.ones_like(u)
    bv = np.full_like(v, (1.0 + params.K) / params.tau_s)
    cu = u**params.p / v ** (params.q + 1.0)
    cv = u ** (params.r - 1.0) / (params.epsilon * params.tau_s * v**params.s)
    return bu, bv, cu, cv


@dataclass
class ReactionOperators:
    B_u: sp.csr_matrix
    B_v: sp.csr_matrix
    C_u: sp.csr_matrix
    C_v: sp.csr_matrix
    b_u: np.ndarray
    b_v: np.ndarray
    c_u: np.ndarray
    c_v: np.ndarray
    D: np.ndarray
    E_coeff: float
    m_lumped: np.ndarray

    def E(self, w: float) -> np.ndarray:
        return self.E_coeff * w * self.m_lumped


def group_matrix(M: sp.csr_matrix, coeff: np.ndarray) -> sp.csr_matrix:
    """``(M diag(coeff))_ij = m_ij * coeff_j``."""
    G = M.copy()
    G.data = M.data * coeff[M.indices]
    return G


def assemble_reaction(coeffs, M: sp.csr_matrix, m_lumped: np.ndarray, w: float, params: ModelParams) -> ReactionOperators:
    bu, bv, cu, cv = coeffs
    return ReactionOperators(
        B_u=group_matrix(M, bu),
        B_v=group_matrix(M, bv),
        C_u=group_matrix(M, cu),
        C_v=group_matrix(M, cv),
        b_u=m_lumped * bu,
        b_v=m_lumped * bv,
        c_u=m_lumped * cu,
        c_v=m_lumped * cv,
        D=params.sigma * m_lumped,
        E_coeff=params.e_coeff,
        m_lumped=m_lumped,
    )
