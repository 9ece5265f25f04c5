"""Steady 2D compressible Euler physics on the state ``w = [rho, u, v, E]``.

All functions are vectorized over leading axes; the state sits on the last
axis.  ``E`` is total energy per unit volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, UsageError

VARIABLES = ("rho", "u", "v", "E")
RHO_INF = 1.0
T_INF = 300.0


@dataclass(frozen=True)
class GasConstants:
    gamma: float = 1.4
    r_gas: float = 287.058

    def __post_init__(self):
        if not self.gamma > 1 or not self.r_gas > 0:
            raise UsageError("need gamma > 1 and R > 0")


AIR = GasConstants()


def _split(w):
    w = np.asarray(w, dtype=np.float64)
    return w[..., 0], w[..., 1], w[..., 2], w[..., 3]


def pressure(w, gas=AIR):
    rho, u, v, e = _split(w)
    return (gas.gamma - 1.0) * (e - 0.5 * rho * (u * u + v * v))


def temperature(w, gas=AIR):
    rho = np.asarray(w, dtype=np.float64)[..., 0]
    if np.any(rho == 0):
        raise NumericalError("temperature undefined for zero density")
    return pressure(w, gas) / (gas.r_gas * rho)


def speed(w):
    _, u, v, _ = _split(w)
    return np.hypot(u, v)


def sound_speed(w, gas=AIR):
    """``sqrt(gamma * P / rho)``; equals ``sqrt(gamma R T)`` and is unit-agnostic."""
    rho = np.asarray(w, dtype=np.float64)[..., 0]
    return np.sqrt(gas.gamma * pressure(w, gas) / rho)


def mach_number(w, gas=AIR):
    t = temperature(w, gas)
    if np.any(t <= 0):
        raise NumericalError("Mach number needs a positive temperature")
    return speed(w) / np.sqrt(gas.gamma * gas.r_gas * t)


def freestream_speed_of_sound(gas=AIR, t_inf=T_INF):
    return float(np.sqrt(gas.gamma * gas.r_gas * t_inf))


def freestream_state(mach, gas=AIR, rho_inf=RHO_INF, t_inf=T_INF):
    """Uniform inflow along +x at the given Mach number, in SI units."""
    if not mach > 0:
        raise UsageError("freestream Mach number must be positive")
    a_inf = freestream_speed_of_sound(gas, t_inf)
    u = mach * a_inf
    p = rho_inf * gas.r_gas * t_inf
    return np.array([rho_inf, u, 0.0, p / (gas.gamma - 1.0) + 0.5 * rho_inf * u * u])


# -- reference scaling: (rho_inf, a_inf, a_inf, rho_inf a_inf^2), lengths by the radius


def state_scales(gas=AIR, rho_inf=RHO_INF, t_inf=T_INF):
    a_inf = freestream_speed_of_sound(gas, t_inf)
    return np.array([rho_inf, a_inf, a_inf, rho_inf * a_inf * a_inf])


def nondimensionalize(w, gas=AIR):
    return np.asarray(w, dtype=np.float64) / state_scales(gas)


def dimensionalize(w, gas=AIR):
    return np.asarray(w, dtype=np.float64) * state_scales(gas)


def nondim_freestream(mach, gas=AIR):
    """Freestream in reference units: rho = 1, a = 1, so u = mach and P = 1/gamma."""
    return np.array([1.0, float(mach), 0.0, 1.0 / (gas.gamma * (gas.gamma - 1.0)) + 0.5 * mach * mach])


# -- conservative variables


def to_conservative(w):
    rho, u, v, e = _split(w)
    return np.stack([rho, rho * u, rho * v, e], axis=-1)


def to_primitive(q):
    q = np.asarray(q, dtype=np.float64)
    rho = q[..., 0]
    return np.stack([rho, q[..., 1] / rho, q[..., 2] / rho, q[..., 3]], axis=-1)


# -- fluxes


def flux_f1(w, gas=AIR):
    rho, u, v, e = _split(w)
    p = pressure(w, gas)
    return np.stack([rho * u, rho * u * u + p, rho * v * u, (e + p) * u], axis=-1)


def flux_f2(w, gas=AIR):
    rho, u, v, e = _split(w)
    p = pressure(w, gas)
    return np.stack([rho * v, rho * u * v, rho * v * v + p, (e + p) * v], axis=-1)


def normal_flux(w, normal, gas=AIR):
    """``F1 n_x + F2 n_y`` for normals broadcastable against ``w[..., :2]``."""
    rho, u, v, e = _split(w)
    nx, ny = normal[..., 0], normal[..., 1]
    p = pressure(w, gas)
    un = u * nx + v * ny
    return np.stack([rho * un, rho * u * un + p * nx, rho * v * un + p * ny, (e + p) * un], axis=-1)


def flux_jacobians(w, gas=AIR):
    """Exact ``dF1/dw`` and ``dF2/dw`` with respect to ``[rho, u, v, E]``, shape ``(..., 4, 4)``."""
    rho, u, v, e = _split(w)
    g = gas.gamma - 1.0
    p = g * (e - 0.5 * rho * (u * u + v * v))
    p_r, p_u, p_v = -0.5 * g * (u * u + v * v), -g * rho * u, -g * rho * v
    h = e + p
    zero = np.zeros_like(rho)
    gg = np.full_like(rho, g)
    a1 = np.stack([
        np.stack([u, rho, zero, zero], axis=-1),
        np.stack([u * u + p_r, 2 * rho * u + p_u, p_v, gg], axis=-1),
        np.stack([u * v, rho * v, rho * u, zero], axis=-1),
        np.stack([p_r * u, h + p_u * u, p_v * u, (1 + g) * u], axis=-1),
    ], axis=-2)
    a2 = np.stack([
        np.stack([v, zero, rho, zero], axis=-1),
        np.stack([u * v, rho * v, rho * u, zero], axis=-1),
        np.stack([v * v + p_r, p_u, 2 * rho * v + p_v, gg], axis=-1),
        np.stack([p_r * v, p_u * v, h + p_v * v, (1 + g) * v], axis=-1),
    ], axis=-2)
    return a1, a2


def interior_residual(w, wx, wy, gas=AIR):
    """``d/dx F1(w) + d/dy F2(w)`` by the chain rule from the state gradients."""
    a1, a2 = flux_jacobians(w, gas)
    return (np.einsum("...ij,...j->...i", a1, np.asarray(wx, dtype=np.float64))
            + np.einsum("...ij,...j->...i", a2, np.asarray(wy, dtype=np.float64)))


def _flux_second_directional(w, a, b, gas):
    # D^2 F1[w](a, b) and D^2 F2[w](a, b)
    rho, u, v, _ = _split(w)
    ra, ua, va, ea = _split(a)
    rb, ub, vb, eb = _split(b)
    g = gas.gamma - 1.0
    pa = g * (ea - 0.5 * ra * (u * u + v * v) - rho * (u * ua + v * va))
    pb = g * (eb - 0.5 * rb * (u * u + v * v) - rho * (u * ub + v * vb))
    pab = g * (-ra * (u * ub + v * vb) - rb * (u * ua + v * va) - rho * (ua * ub + va * vb))
    ruv = ra * (ub * v + u * vb) + rb * (ua * v + u * va) + rho * (ua * vb + ub * va)
    f1 = np.stack([
        ra * ub + rb * ua,
        2 * (ra * u * ub + rb * u * ua + rho * ua * ub) + pab,
        ruv,
        (ea + pa) * ub + (eb + pb) * ua + pab * u,
    ], axis=-1)
    f2 = np.stack([
        ra * vb + rb * va,
        ruv,
        2 * (ra * v * vb + rb * v * va + rho * va * vb) + pab,
        (ea + pa) * vb + (eb + pb) * va + pab * v,
    ], axis=-1)
    return f1, f2


def interior_residual_state_jacobian(w, wx, wy, gas=AIR):
    """``d/dw`` of :func:`interior_residual` at fixed gradients, shape ``(..., 4, 4)``."""
    w = np.asarray(w, dtype=np.float64)
    cols = []
    for k in range(4):
        e_k = np.zeros(4)
        e_k[k] = 1.0
        d1, _ = _flux_second_directional(w, wx, e_k, gas)
        _, d2 = _flux_second_directional(w, wy, e_k, gas)
        cols.append(d1 + d2)
    return np.stack(cols, axis=-1)


def pressure_gradient(w, gas=AIR):
    """``dP/dw`` with respect to ``[rho, u, v, E]``."""
    rho, u, v, _ = _split(w)
    g = gas.gamma - 1.0
    return np.stack([-0.5 * g * (u * u + v * v), -g * rho * u, -g * rho * v,
                     np.full_like(rho, g)], axis=-1)


# -- boundary operator

BOUNDARY_TAGS = ("inflow", "wall", "symmetry", "outflow")


def boundary_residual(x, w, mach, tag, normal=None, gas=AIR):
    """Boundary-condition residual at one point.

    ``inflow`` returns ``w - freestream_state(mach)``; ``wall`` and
    ``symmetry`` return the normal velocity ``u . n`` (needs ``normal``);
    ``outflow`` imposes nothing and returns an empty vector.  ``x`` is
    accepted for interface symmetry with interior residuals.
    """
    w = np.asarray(w, dtype=np.float64)
    if tag == "inflow":
        return w - freestream_state(mach, gas)
    if tag in ("wall", "symmetry"):
        if normal is None:
            raise UsageError(f"{tag} residual needs the boundary normal")
        n = np.asarray(normal, dtype=np.float64)
        return np.atleast_1d(w[..., 1] * n[..., 0] + w[..., 2] * n[..., 1])
    if tag == "outflow":
        return np.zeros(0)
    raise UsageError(f"unknown boundary tag {tag!r}; expected one of {BOUNDARY_TAGS}")
