"""Compressor station feasible sets and compression power.

A station's admissible operating points live in the (Q, H_ad) plane: Q is the
volumetric flow rate at inlet conditions [m^3/s], H_ad the adiabatic head
[m^2/s^2].  The raw characteristic field is a union of simple polygons (outer
linear approximation of the aggregated machine configurations).  For use as a
smooth-ish optimization constraint it is approximated by a *semiconvex* set:
a stack of Q-intervals over an increasing H_ad grid, interpolated linearly
between levels.  Every horizontal slice of the result is a single interval,
so feasibility is preserved under convex combinations in Q at fixed H_ad.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyField, ModelError
from .models import EquationOfState, compressibility
from .timeseries import BoolSeries, TimeSeries


@dataclass(frozen=True)
class CharacteristicField:
    """Union of simple polygons in (Q, H_ad) space; vertex arrays are (n, 2)."""

    polygons: tuple[np.ndarray, ...]

    def __post_init__(self):
        polys = tuple(np.asarray(p, dtype=float).reshape(-1, 2) for p in self.polygons)
        for i, p in enumerate(polys):
            if p.shape[0] < 3:
                raise ValueError(f"polygon {i} has fewer than 3 vertices")
        object.__setattr__(self, "polygons", polys)


@dataclass(frozen=True)
class SemiconvexField:
    """Q-interval bounds over an H_ad level grid; linear between levels."""

    levels: np.ndarray  # strictly increasing H_ad grid
    q_lo: np.ndarray
    q_hi: np.ndarray
    absorbed_holes: tuple[float, ...] = ()  # levels where interior gaps were filled
    max_bound_slope: float = 0.0  # max |dQ/dH| of either bound, for Lipschitz reporting

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=float)
        lo = np.asarray(self.q_lo, dtype=float)
        hi = np.asarray(self.q_hi, dtype=float)
        if lv.ndim != 1 or lv.size < 2 or lo.shape != lv.shape or hi.shape != lv.shape:
            raise ValueError("levels/q_lo/q_hi must be 1-d arrays of equal length >= 2")
        if np.any(np.diff(lv) <= 0):
            raise ValueError("H_ad levels must be strictly increasing")
        if np.any(lo > hi + 1e-12):
            raise ValueError("q_lo must not exceed q_hi")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "q_lo", lo)
        object.__setattr__(self, "q_hi", hi)

    @property
    def h_min(self) -> float:
        return float(self.levels[0])

    @property
    def h_max(self) -> float:
        return float(self.levels[-1])

    def bounds_at(self, h_ad: float) -> tuple[float, float]:
        """Interpolated (Q_lo, Q_hi) at a head value (constant outside the grid)."""
        return (
            float(np.interp(h_ad, self.levels, self.q_lo)),
            float(np.interp(h_ad, self.levels, self.q_hi)),
        )


@dataclass(frozen=True)
class CompressorControl:
    """Time-dependent operation of one station."""

    field_id: str
    h_ad: TimeSeries  # adiabatic head control [m^2/s^2]
    on: BoolSeries = None
    eta_ad: float = 0.8

    def __post_init__(self):
        if self.on is None:
            object.__setattr__(self, "on", BoolSeries.always(True))
        if not 0.0 < self.eta_ad <= 1.0:
            raise ValueError("eta_ad must lie in (0, 1]")


# ---------------------------------------------------------------------------
# geometry


def _slice_extremes(polygon: np.ndarray, h: float) -> tuple[float, float] | None:
    """Min/max Q of the intersection of a polygon with the line H_ad = h.

    Only the extremes are needed (the slice is interval-hulled anyway), so no
    crossing-parity bookkeeping is required: collect every vertex lying on the
    line and every strict edge crossing.
    """
    qs: list[float] = []
    n = polygon.shape[0]
    for i in range(n):
        q1, h1 = polygon[i]
        q2, h2 = polygon[(i + 1) % n]
        if h1 == h:
            qs.append(q1)
        if (h1 - h) * (h2 - h) < 0.0:
            qs.append(q1 + (h - h1) / (h2 - h1) * (q2 - q1))
    if not qs:
        return None
    return (min(qs), max(qs))


def build_semiconvex(char_field: CharacteristicField, m: int = 32) -> SemiconvexField:
    """Interval-hull of the polygon union on m equispaced H_ad levels.

    Per level, Q_lo/Q_hi are the extreme intersections of the level line with
    the union of polygons; interior holes of a slice are therefore absorbed
    (over-approximation).  Levels falling into a vertical gap between polygons
    are bridged by interpolating the neighbouring non-empty slices and are
    reported via ``absorbed_holes``.
    """
    if m < 2:
        raise ValueError("need at least 2 levels")
    if not char_field.polygons:
        raise EmptyField("characteristic field has no polygons")
    h_all = np.concatenate([p[:, 1] for p in char_field.polygons])
    h_min, h_max = float(h_all.min()), float(h_all.max())
    if h_min == h_max:
        raise EmptyField("characteristic field is degenerate in H_ad")
    levels = np.linspace(h_min, h_max, m)

    q_lo = np.full(m, np.nan)
    q_hi = np.full(m, np.nan)
    for k, h in enumerate(levels):
        lo, hi = math.inf, -math.inf
        for poly in char_field.polygons:
            ext = _slice_extremes(poly, h)
            if ext is not None:
                lo = min(lo, ext[0])
                hi = max(hi, ext[1])
        if lo <= hi:
            q_lo[k], q_hi[k] = lo, hi

    filled = np.isfinite(q_lo)
    if not filled.any():
        raise EmptyField("no level line intersects any polygon")
    gaps = tuple(float(levels[k]) for k in np.flatnonzero(~filled))
    if gaps:
        idx = np.flatnonzero(filled)
        q_lo = np.interp(np.arange(m), idx, q_lo[idx])
        q_hi = np.interp(np.arange(m), idx, q_hi[idx])

    dh = np.diff(levels)
    slope = max(
        float(np.max(np.abs(np.diff(q_lo) / dh))),
        float(np.max(np.abs(np.diff(q_hi) / dh))),
    )
    return SemiconvexField(levels, q_lo, q_hi, absorbed_holes=gaps, max_bound_slope=slope)


def contains(sc_field: SemiconvexField, q: float, h_ad: float) -> float:
    """Signed feasibility margin, positive inside the semiconvex set."""
    return float(np.min(constraint_values(sc_field, q, h_ad)))


def constraint_values(sc_field: SemiconvexField, q: float, h_ad: float) -> np.ndarray:
    """The four margin components (H_ad-H_0, H_m-H_ad, Q-Q_lo, Q_hi-Q), each >= 0 iff feasible."""
    lo, hi = sc_field.bounds_at(h_ad)
    return np.array([h_ad - sc_field.h_min, sc_field.h_max - h_ad, q - lo, hi - q])


def _bound_slopes(sc_field: SemiconvexField, h_ad: float) -> tuple[float, float]:
    """One-sided (dQ_lo/dH, dQ_hi/dH) of the segment containing h_ad."""
    lv = sc_field.levels
    if h_ad <= lv[0]:
        i = 0
    elif h_ad >= lv[-1]:
        i = lv.size - 2
    else:
        i = int(np.searchsorted(lv, h_ad, side="right") - 1)
    dh = lv[i + 1] - lv[i]
    return (
        float((sc_field.q_lo[i + 1] - sc_field.q_lo[i]) / dh),
        float((sc_field.q_hi[i + 1] - sc_field.q_hi[i]) / dh),
    )


def constraint_gradients(sc_field: SemiconvexField, q: float, h_ad: float) -> np.ndarray:
    """d(constraint_values)/d(q, h_ad), shape (4, 2); one-sided at level kinks."""
    s_lo, s_hi = _bound_slopes(sc_field, h_ad)
    return np.array(
        [
            [0.0, 1.0],
            [0.0, -1.0],
            [1.0, -s_lo],
            [-1.0, s_hi],
        ]
    )


# ---------------------------------------------------------------------------
# thermodynamics


def power(rho_in: float, q_vol: float, h_ad: float, eta_ad: float) -> float:
    """Compression power P = rho_in * Q * H_ad / eta_ad [W]."""
    if not 0.0 < eta_ad <= 1.0:
        raise ValueError("eta_ad must lie in (0, 1]")
    return rho_in * q_vol * h_ad / eta_ad


def inlet_density(p_in: float, eos: EquationOfState, c: float) -> float:
    """Gas density at inlet conditions, rho = p z0 / (z(p) c^2) [kg/m^3]."""
    return p_in * eos.z0 / (compressibility(p_in, eos) * c * c)


def volumetric_flow(q_std: float, p_in: float, eos: EquationOfState, c: float, rho0: float) -> float:
    """Inlet volumetric flow Q from standard flow q: mass flow rho0*q = rho_in*Q."""
    return q_std * rho0 / inlet_density(p_in, eos, c)


def pressure_ratio_from_head(h_ad: float, p_in: float, eos: EquationOfState, c: float, kappa: float) -> float:
    """Closure between adiabatic head and pressure ratio r = p_out/p_in.

    H_ad = c^2 z(p_in) * kappa/(kappa-1) * (r^((kappa-1)/kappa) - 1).
    Kept in one place so the head/pressure map can be swapped out wholesale.
    """
    beta = (kappa - 1.0) / kappa
    a = c * c * compressibility(p_in, eos) / beta
    base = 1.0 + h_ad / a
    if base <= 0.0:
        raise ModelError(f"head {h_ad} below the expansion limit of the closure")
    return base ** (1.0 / beta)


def head_from_pressure_ratio(ratio: float, p_in: float, eos: EquationOfState, c: float, kappa: float) -> float:
    beta = (kappa - 1.0) / kappa
    return c * c * compressibility(p_in, eos) / beta * (ratio**beta - 1.0)


def pressure_ratio_derivatives(
    h_ad: float, p_in: float, eos: EquationOfState, c: float, kappa: float
) -> tuple[float, float, float]:
    """(r, dr/dH_ad, dr/dp_in) of the head closure; dr/dp_in is nonzero only for affine z."""
    beta = (kappa - 1.0) / kappa
    z = compressibility(p_in, eos)
    a = c * c * z / beta
    base = 1.0 + h_ad / a
    if base <= 0.0:
        raise ModelError(f"head {h_ad} below the expansion limit of the closure")
    r = base ** (1.0 / beta)
    dr_dbase = (1.0 / beta) * base ** (1.0 / beta - 1.0)
    dr_dh = dr_dbase / a
    if eos.kind == "affine" and eos.alpha != 0.0:
        da_dp = -c * c * eos.alpha / beta
        dr_dp = dr_dbase * (-h_ad / (a * a)) * da_dp
    else:
        dr_dp = 0.0
    return (float(r), float(dr_dh), float(dr_dp))
