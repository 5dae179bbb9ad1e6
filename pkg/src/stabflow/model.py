"""Physical data: power-law rheology, diffusivities, manufactured solution.

The manufactured velocity/pressure/concentration fields vanish on the
boundary of the unit square, the velocity is exactly divergence free, and
the forcing terms returned by :func:`manufactured_forcing` make them exact
solutions of the coupled flow/transport system for any parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONSTANT_DIFFUSIVITY = 0.01


@dataclass
class PhysicalParams:
    """Fluid and transport coefficients.

    ``consistency`` and ``power_index`` define the power-law viscosity
    eta = consistency * exp(coupling_exponent * c) * gamma^((power_index-1)/2)
    with gamma the shear-rate invariant floored at ``shear_floor``.  A zero
    ``coupling_exponent`` decouples the viscosity from the concentration
    (one-way coupling).
    """

    rho: float = 1.0
    consistency: float = 1.0
    coupling_exponent: float = 0.0
    power_index: float = 1.0
    alpha: float = 0.01
    diffusion_mode: str = "constant"  # "constant" | "variable"
    reynolds: float | None = None
    shear_floor: float = 1e-10

    def __post_init__(self):
        if self.rho <= 0.0:
            raise ValueError("density must be positive")
        if self.consistency <= 0.0:
            raise ValueError("consistency factor must be positive")
        if self.power_index <= 0.0:
            raise ValueError("power-law index must be positive")
        if self.alpha < 0.0:
            raise ValueError("reaction coefficient must be nonnegative")
        if self.shear_floor <= 0.0:
            raise ValueError("shear-rate floor must be positive")
        if self.diffusion_mode not in ("constant", "variable"):
            raise ValueError(f"unknown diffusion mode {self.diffusion_mode!r}")

    @classmethod
    def one_way(
        cls,
        reynolds: float,
        power_index: float,
        consistency: float | None = None,
        **kw,
    ) -> "PhysicalParams":
        """Concentration-independent viscosity at a given Reynolds number.

        The tables pin only the ratio Re = rho/consistency (unit length and
        velocity scales); the density follows as rho = Re * consistency.
        The default balanced split consistency = 1/sqrt(Re) keeps both the
        quasi-static stabilization scales and the backward-Euler pressure
        lag in the regime the reference results exhibit.
        """
        if reynolds <= 0.0:
            raise ValueError("Reynolds number must be positive")
        k = 1.0 / np.sqrt(reynolds) if consistency is None else consistency
        kw.setdefault("diffusion_mode", "constant")
        return cls(
            rho=reynolds * k,
            consistency=k,
            coupling_exponent=0.0,
            power_index=power_index,
            reynolds=reynolds,
            **kw,
        )

    @classmethod
    def strong(
        cls,
        power_index: float,
        reynolds: float = 1000.0,
        consistency: float | None = None,
        coupling_exponent: float = 1.0,
        **kw,
    ) -> "PhysicalParams":
        """Two-way coupled setup: concentration-dependent viscosity and
        variable diffusivities, same density realization as one_way."""
        k = 1.0 / np.sqrt(reynolds) if consistency is None else consistency
        kw.setdefault("diffusion_mode", "variable")
        return cls(
            rho=reynolds * k,
            consistency=k,
            coupling_exponent=coupling_exponent,
            power_index=power_index,
            reynolds=reynolds,
            **kw,
        )


def shear_rate_invariant(u1x, u1y, u2x, u2y):
    """Second invariant 2*u1x^2 + 2*u2y^2 + (u1y + u2x)^2 of the gradient."""
    return 2.0 * u1x**2 + 2.0 * u2y**2 + (u1y + u2x) ** 2


def viscosity_from_invariant(c, gamma, params: PhysicalParams):
    """Power-law viscosity for a given (already floored) shear invariant."""
    eta = params.consistency * np.asarray(gamma) ** (
        0.5 * (params.power_index - 1.0)
    )
    if params.coupling_exponent != 0.0:
        eta = eta * np.exp(params.coupling_exponent * np.asarray(c))
    return eta


def viscosity_from_parts(c, u1x, u1y, u2x, u2y, params: PhysicalParams):
    """Power-law viscosity from concentration and velocity-gradient parts.

    Vectorized over numpy arrays; the shear invariant is clamped from below
    so shear-thinning exponents stay finite at stagnation points.
    """
    gamma = np.maximum(
        shear_rate_invariant(u1x, u1y, u2x, u2y), params.shear_floor
    )
    return viscosity_from_invariant(c, gamma, params)


def power_law_viscosity(c_value, grad_u, params: PhysicalParams):
    """Viscosity for a single 2x2 velocity gradient ``grad_u``."""
    g = np.asarray(grad_u, dtype=float)
    if g.shape != (2, 2):
        raise ValueError(f"expected a 2x2 velocity gradient, got shape {g.shape}")
    return float(
        viscosity_from_parts(c_value, g[0, 0], g[0, 1], g[1, 0], g[1, 1], params)
    )


def _quartic(s):
    """s^2(s-1)^2 and its first three derivatives."""
    v = s * s * (s - 1.0) ** 2
    d1 = 2.0 * s * (s - 1.0) * (2.0 * s - 1.0)
    d2 = 12.0 * s * s - 12.0 * s + 2.0
    d3 = 24.0 * s - 12.0
    return v, d1, d2, d3


class ManufacturedSolution:
    """Closed-form fields and every derivative the forcing terms need.

    All evaluators broadcast over numpy arrays of coordinates.
    """

    def velocity(self, x, y, t):
        e = np.exp(-t)
        ax, ax1, _, _ = _quartic(x)
        by, by1, _, _ = _quartic(y)
        return 0.5 * e * ax * by1, -0.5 * e * ax1 * by

    def velocity_gradient(self, x, y, t):
        """(u1x, u1y, u2x, u2y); u1x and -u2y share one expression, so the
        divergence is zero to the last bit."""
        e = np.exp(-t)
        ax, ax1, ax2, _ = _quartic(x)
        by, by1, by2, _ = _quartic(y)
        u1x = 0.5 * e * ax1 * by1
        u1y = 0.5 * e * ax * by2
        u2x = -0.5 * e * ax2 * by
        u2y = -u1x
        return u1x, u1y, u2x, u2y

    def velocity_second_derivatives(self, x, y, t):
        """(u1xx, u1xy, u1yy, u2xx, u2xy, u2yy)."""
        e = np.exp(-t)
        ax, ax1, ax2, ax3 = _quartic(x)
        by, by1, by2, by3 = _quartic(y)
        return (
            0.5 * e * ax2 * by1,
            0.5 * e * ax1 * by2,
            0.5 * e * ax * by3,
            -0.5 * e * ax3 * by,
            -0.5 * e * ax2 * by1,
            -0.5 * e * ax1 * by2,
        )

    def pressure(self, x, y, t):
        return np.exp(-t) * (3.0 * x * x + 3.0 * y * y - 2.0)

    def pressure_gradient(self, x, y, t):
        e = np.exp(-t)
        return 6.0 * e * x, 6.0 * e * y

    def concentration(self, x, y, t):
        return np.exp(-t) * x * (x - 1.0) * y * (y - 1.0)

    def concentration_gradient(self, x, y, t):
        e = np.exp(-t)
        mx, my = x * (x - 1.0), y * (y - 1.0)
        return e * (2.0 * x - 1.0) * my, e * mx * (2.0 * y - 1.0)

    def concentration_second_derivatives(self, x, y, t):
        e = np.exp(-t)
        return 2.0 * e * y * (y - 1.0), 2.0 * e * x * (x - 1.0)


EXACT = ManufacturedSolution()


def exact_solution(x, y, t):
    """(u1, u2, p, c) of the manufactured solution."""
    u1, u2 = EXACT.velocity(x, y, t)
    return u1, u2, EXACT.pressure(x, y, t), EXACT.concentration(x, y, t)


def diffusion_coeffs(x, y, t, mode: str):
    """Diffusivities (D1, D2); constant 0.01 or the space-time polynomials."""
    if mode == "constant":
        shape = np.broadcast(x, y, t).shape
        if not shape:
            return CONSTANT_DIFFUSIVITY, CONSTANT_DIFFUSIVITY
        return (
            np.full(shape, CONSTANT_DIFFUSIVITY),
            np.full(shape, CONSTANT_DIFFUSIVITY),
        )
    if mode == "variable":
        e = np.exp(-t)
        ax, _, _, _ = _quartic(x)
        by, _, _, _ = _quartic(y)
        d1 = e * by * (2.0 * y - 1.0) ** 2 * ax * ax
        d2 = e * ax * (2.0 * x - 1.0) ** 2 * by * by
        return d1, d2
    raise ValueError(f"unknown diffusion mode {mode!r}")


def _diffusion_with_divergence_parts(x, y, t, mode: str):
    """(D1, D2, dD1/dx, dD2/dy) as needed by the transport forcing."""
    if mode == "constant":
        d1, d2 = diffusion_coeffs(x, y, t, mode)
        zero = np.zeros(np.broadcast(x, y).shape)
        return d1, d2, zero, zero
    e = np.exp(-t)
    ax, ax1, _, _ = _quartic(x)
    by, by1, _, _ = _quartic(y)
    d1 = e * by * (2.0 * y - 1.0) ** 2 * ax * ax
    d2 = e * ax * (2.0 * x - 1.0) ** 2 * by * by
    d1_dx = e * by * (2.0 * y - 1.0) ** 2 * 2.0 * ax * ax1
    d2_dy = e * ax * (2.0 * x - 1.0) ** 2 * 2.0 * by * by1
    return d1, d2, d1_dx, d2_dy


def manufactured_forcing(x, y, t, params: PhysicalParams, mode: str | None = None):
    """Body force (f1, f2) and solute source g for the manufactured fields.

    The viscous contribution expands div(2*eta*D(u)) with the chain rule of
    eta through the concentration and the shear-rate invariant; where the
    invariant sits below the floor its gradient is taken as zero, matching
    :func:`viscosity_from_parts`.
    """
    mode = params.diffusion_mode if mode is None else mode
    ex = EXACT
    u1, u2 = ex.velocity(x, y, t)
    u1x, u1y, u2x, u2y = ex.velocity_gradient(x, y, t)
    u1xx, u1xy, u1yy, u2xx, u2xy, u2yy = ex.velocity_second_derivatives(x, y, t)
    px, py = ex.pressure_gradient(x, y, t)
    c = ex.concentration(x, y, t)
    cx, cy = ex.concentration_gradient(x, y, t)
    cxx, cyy = ex.concentration_second_derivatives(x, y, t)

    gamma_raw = shear_rate_invariant(u1x, u1y, u2x, u2y)
    floored = gamma_raw < params.shear_floor
    gamma = np.where(floored, params.shear_floor, gamma_raw)
    gamma_x = np.where(
        floored,
        0.0,
        4.0 * u1x * u1xx + 4.0 * u2y * u2xy + 2.0 * (u1y + u2x) * (u1xy + u2xx),
    )
    gamma_y = np.where(
        floored,
        0.0,
        4.0 * u1x * u1xy + 4.0 * u2y * u2yy + 2.0 * (u1y + u2x) * (u1yy + u2xy),
    )

    b = params.coupling_exponent
    m = params.power_index
    eta = params.consistency * np.exp(b * c) * gamma ** (0.5 * (m - 1.0))
    eta_x = eta * (b * cx + 0.5 * (m - 1.0) * gamma_x / gamma)
    eta_y = eta * (b * cy + 0.5 * (m - 1.0) * gamma_y / gamma)

    visc1 = (
        2.0 * (eta_x * u1x + eta * u1xx)
        + eta_y * (u1y + u2x)
        + eta * (u1yy + u2xy)
    )
    visc2 = (
        eta_x * (u1y + u2x)
        + eta * (u1xy + u2xx)
        + 2.0 * (eta_y * u2y + eta * u2yy)
    )

    rho = params.rho
    f1 = rho * (-u1 + u1 * u1x + u2 * u1y) + px - visc1
    f2 = rho * (-u2 + u1 * u2x + u2 * u2y) + py - visc2

    d1, d2, d1_dx, d2_dy = _diffusion_with_divergence_parts(x, y, t, mode)
    g = (
        -c
        - (d1_dx * cx + d1 * cxx + d2_dy * cy + d2 * cyy)
        + u1 * cx
        + u2 * cy
        + params.alpha * c
    )
    return f1, f2, g
