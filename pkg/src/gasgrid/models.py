"""Pipe flow model hierarchy: nonlinear/semilinear PDE fluxes and the algebraic pipe law.

Three fidelity levels are supported per pipe:

* M3 -- isothermal Euler equations for u = (p, q),
  flux f(u) = (rho0 c^2 / A * q,  A / rho0 * p + rho0 c^2 / A * q^2 / p)
* M2 -- semilinear variant of M3 with the q^2/p flux term dropped
* M1 -- quasi-stationary closed form: q constant along the pipe and
  p_out = sqrt(p_in^2 - lambda rho0^2 c^2 L / (d A^2) * |q| q)

All three share the friction source g(u) = (0, -lambda rho0 c^2 |q| q / (2 d A p)).
Pressures are in Pa, flow rates in m^3/s at standard conditions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .errors import CompressibilityOutOfRange, NonpositivePressure, RadicandNonpositive

_AREA_RTOL = 1e-9


class ModelLevel(enum.IntEnum):
    """Pipe model fidelity, ordered M1 < M2 < M3."""

    M1 = 1
    M2 = 2
    M3 = 3


@dataclass(frozen=True)
class PipeParameters:
    """Geometry and gas constants of one pipe (SI units)."""

    L: float  # length [m]
    d: float  # diameter [m]
    A: float  # cross-section [m^2]; defaults to pi d^2 / 4
    lam: float  # Darcy friction coefficient [-]
    c: float  # speed of sound [m/s]
    rho0: float  # density at standard conditions [kg/m^3]

    def __post_init__(self):
        for name in ("L", "d", "A", "lam", "c", "rho0"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"pipe parameter {name} must be positive")

    @classmethod
    def create(cls, L, d, lam=0.011, c=340.0, rho0=0.785, A=None) -> "PipeParameters":
        circular = math.pi * d * d / 4.0
        if A is None:
            A = circular
        elif abs(A - circular) > _AREA_RTOL * circular:
            # explicit override of the circular cross-section is allowed
            pass
        return cls(L=float(L), d=float(d), A=float(A), lam=float(lam), c=float(c), rho0=float(rho0))

    def with_sound_speed(self, c: float) -> "PipeParameters":
        return replace(self, c=float(c))


@dataclass(frozen=True)
class GasState:
    """Point state (pressure [Pa], standard volumetric flow rate [m^3/s])."""

    p: float
    q: float


@dataclass(frozen=True)
class EquationOfState:
    """Compressibility model z(p); 'ideal' keeps z = z0, 'affine' uses z0 - alpha p."""

    kind: str = "ideal"
    z0: float = 1.0
    alpha: float = 0.0  # [1/Pa]

    def __post_init__(self):
        if self.kind not in ("ideal", "affine"):
            raise ValueError(f"unknown equation of state kind {self.kind!r}")
        if not 0.0 < self.z0 <= 1.0:
            raise ValueError("z0 must lie in (0, 1]")
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")


def compressibility(p: float, eos: EquationOfState) -> float:
    """Compressibility factor z(p); raises if the result leaves (0, 1]."""
    if eos.kind == "ideal":
        return eos.z0
    z = eos.z0 - eos.alpha * p
    if not 0.0 < z <= 1.0:
        raise CompressibilityOutOfRange(f"z({p} Pa) = {z} outside (0, 1]")
    return z


def effective_sound_speed(par: PipeParameters, eos: EquationOfState, p_ref: float) -> float:
    """Fold the equation of state into a per-pipe constant: c_eff^2 = c^2 z(p_ref) / z0."""
    return par.c * math.sqrt(compressibility(p_ref, eos) / eos.z0)


def _require_positive_pressure(p, what: str) -> None:
    import numpy as np

    if np.any(np.asarray(p) <= 0.0):
        raise NonpositivePressure(f"{what} needs p > 0, got min p = {np.min(np.asarray(p))}")


def flux_arrays(level: ModelLevel, p, q, par: PipeParameters):
    """Elementwise flux (f1, f2); p, q may be scalars or numpy arrays."""
    if level == ModelLevel.M1:
        raise ValueError("M1 is algebraic and has no flux")
    a = par.rho0 * par.c * par.c / par.A
    f1 = a * q
    f2 = par.A / par.rho0 * p
    if level == ModelLevel.M3:
        _require_positive_pressure(p, "M3 flux")
        f2 = f2 + a * q * q / p
    return (f1, f2)


def flux_jacobian_arrays(level: ModelLevel, p, q, par: PipeParameters):
    """Elementwise (df1/dp, df1/dq, df2/dp, df2/dq)."""
    a = par.rho0 * par.c * par.c / par.A
    d11 = 0.0 * p
    d12 = a + 0.0 * p
    d21 = par.A / par.rho0 + 0.0 * p
    d22 = 0.0 * p
    if level == ModelLevel.M3:
        _require_positive_pressure(p, "M3 flux")
        d21 = d21 - a * q * q / (p * p)
        d22 = d22 + 2.0 * a * q / p
    return (d11, d12, d21, d22)


def source_arrays(p, q, par: PipeParameters):
    """Elementwise friction source (g1, g2) with g1 identically zero."""
    _require_positive_pressure(p, "friction source")
    g2 = -par.lam * par.rho0 * par.c * par.c * abs(q) * q / (2.0 * par.d * par.A * p)
    return (0.0 * p, g2)


def source_jacobian_arrays(p, q, par: PipeParameters):
    """Elementwise (dg2/dp, dg2/dq)."""
    _require_positive_pressure(p, "friction source")
    k = par.lam * par.rho0 * par.c * par.c / (2.0 * par.d * par.A)
    return (k * abs(q) * q / (p * p), -2.0 * k * abs(q) / p)


def flux(level: ModelLevel, u: GasState, par: PipeParameters) -> tuple[float, float]:
    """Flux vector of the pipe PDE at state u for level M2 or M3."""
    f1, f2 = flux_arrays(level, u.p, u.q, par)
    return (float(f1), float(f2))


def flux_jacobian(level: ModelLevel, u: GasState, par: PipeParameters) -> tuple[float, float, float, float]:
    """(df1/dp, df1/dq, df2/dp, df2/dq) at state u."""
    d11, d12, d21, d22 = flux_jacobian_arrays(level, u.p, u.q, par)
    return (float(d11), float(d12), float(d21), float(d22))


def source(u: GasState, par: PipeParameters) -> tuple[float, float]:
    """Friction source (0, -lambda rho0 c^2 |q| q / (2 d A p)); odd in q."""
    g1, g2 = source_arrays(u.p, u.q, par)
    return (float(g1), float(g2))


def source_jacobian(u: GasState, par: PipeParameters) -> tuple[float, float]:
    """(dg2/dp, dg2/dq); the first source component is identically zero."""
    dp_, dq_ = source_jacobian_arrays(u.p, u.q, par)
    return (float(dp_), float(dq_))


def m1_friction_coefficient(par: PipeParameters) -> float:
    """C = lambda rho0^2 c^2 L / (d A^2), so that p_out^2 = p_in^2 - C |q| q."""
    return par.lam * par.rho0 * par.rho0 * par.c * par.c * par.L / (par.d * par.A * par.A)


def m1_pout(p_in: float, q: float, par: PipeParameters) -> float:
    """Outlet pressure of the algebraic pipe law; q is constant along the pipe.

    Raises RadicandNonpositive when the load is too large for the algebraic
    model to be physically valid; the caller must escalate to M2.
    """
    radicand = p_in * p_in - m1_friction_coefficient(par) * abs(q) * q
    if radicand <= 0.0:
        raise RadicandNonpositive(
            f"algebraic pipe law invalid: p_in^2 - C|q|q = {radicand} <= 0"
        )
    return math.sqrt(radicand)
