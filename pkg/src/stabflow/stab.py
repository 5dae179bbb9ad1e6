"""Stabilization parameters and the per-element subscale state.

The algebraic parameters tau1/tau2/tau3 weight the residual-based
correction terms for momentum, continuity and transport.  Their
time-modified counterparts arise from discretizing the subscale evolution
equation with backward Euler; tracking the resulting subscale state across
steps is what distinguishes the dynamic method from the quasi-static one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StabConsts:
    """Dimensionless tuning constants; the standard linear-element values."""

    c1: float = 4.0
    c2: float = 2.0
    c3: float = 1.0

    def __post_init__(self):
        if self.c1 <= 0.0 or self.c2 <= 0.0 or self.c3 <= 0.0:
            raise ValueError("stabilization constants must be positive")


@dataclass
class TauSet:
    """Elementwise stabilization parameters, optionally time-modified.

    Fields broadcast: scalars for a single element or arrays for a mesh.
    tau2 has no time modification (the pressure row of the scaling matrix
    is zero), so no tau2_prime is stored.
    """

    tau1: np.ndarray
    tau2: np.ndarray
    tau3: np.ndarray
    tau1_prime: np.ndarray | None = None
    tau3_prime: np.ndarray | None = None


@dataclass
class SubscaleField:
    """Fine-scale values, one barycenter sample per element."""

    u1: np.ndarray
    u2: np.ndarray
    p: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, n_el: int) -> "SubscaleField":
        return cls(*(np.zeros(n_el) for _ in range(4)))

    def norms_squared(self, areas: np.ndarray):
        """(||u_tilde||^2, ||c_tilde||^2) of the piecewise-constant fields."""
        vel = float(np.sum(areas * (self.u1**2 + self.u2**2)))
        return vel, float(np.sum(areas * self.c**2))


@dataclass
class SubscaleResidual:
    """Strong residual components sampled at element barycenters."""

    u1: np.ndarray
    u2: np.ndarray
    div: np.ndarray
    c: np.ndarray


def compute_tau(h, speed, eta0, rho, d_m, alpha, consts: StabConsts) -> TauSet:
    """Algebraic stabilization parameters.

    tau1 = (c1*eta0/h^2 + c2*rho*|u|/h)^(-1)
    tau2 = h^2 / (c1*tau1)          (equivalently eta0 + (c2/c1)*rho*|u|*h)
    tau3 = c3 / (9*d_m/(4h^2) + 3*|u|/(2h) + alpha)

    Broadcasts over arrays of per-element inputs.
    """
    h = np.asarray(h, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    speed = np.asarray(speed, dtype=float)
    d_m = np.asarray(d_m, dtype=float)
    if np.any(h <= 0.0):
        raise ValueError("element size h must be positive")
    if np.any(eta0 <= 0.0):
        raise ValueError("local viscosity eta0 must be positive")
    if np.any(d_m < 0.0):
        raise ValueError("diffusivity scale must be nonnegative")
    tau1 = 1.0 / (consts.c1 * eta0 / h**2 + consts.c2 * rho * np.abs(speed) / h)
    tau2 = h**2 / (consts.c1 * tau1)
    # all three transport rates may legitimately vanish at once (resting
    # flow, zero diffusion and reaction); the infinite tau3 is reported
    # as-is and trips the assembly finiteness checks downstream
    with np.errstate(divide="ignore"):
        tau3 = consts.c3 / (
            2.25 * d_m / h**2 + 1.5 * np.abs(speed) / h + alpha
        )
    return TauSet(tau1=tau1, tau2=tau2, tau3=tau3)


def time_modify_tau(tau: TauSet, dt: float, rho: float) -> TauSet:
    """Fold the backward-Euler subscale mass term into the parameters:
    tau_k' = (M/dt + tau_k^(-1))^(-1) componentwise."""
    if dt <= 0.0:
        raise ValueError("time step must be positive")
    tau1p = tau.tau1 * dt / (dt + rho * tau.tau1)
    tau3p = tau.tau3 * dt / (dt + tau.tau3)
    return TauSet(
        tau1=tau.tau1,
        tau2=tau.tau2,
        tau3=tau.tau3,
        tau1_prime=tau1p,
        tau3_prime=tau3p,
    )


def update_subscales(
    prev: SubscaleField,
    residual: SubscaleResidual,
    taus: TauSet,
    dt: float,
    rho: float,
    mode: str,
) -> SubscaleField:
    """Advance the subscale state one step.

    Dynamic mode is the backward-Euler recursion of the subscale evolution
    equation; quasi-static mode rebuilds the subscales algebraically from
    the current residual with no history.  The pressure subscale carries no
    mass term, so it is tau2-weighted divergence residual in both modes.
    """
    if mode == "dynamic":
        if taus.tau1_prime is None or taus.tau3_prime is None:
            raise ValueError("dynamic update requires time-modified parameters")
        u1 = taus.tau1_prime * (residual.u1 + (rho / dt) * prev.u1)
        u2 = taus.tau1_prime * (residual.u2 + (rho / dt) * prev.u2)
        c = taus.tau3_prime * (residual.c + prev.c / dt)
    elif mode == "quasi_static":
        u1 = taus.tau1 * residual.u1
        u2 = taus.tau1 * residual.u2
        c = taus.tau3 * residual.c
    else:
        raise ValueError(f"unknown subscale mode {mode!r}")
    p = taus.tau2 * residual.div
    return SubscaleField(
        u1=np.asarray(u1, dtype=float),
        u2=np.asarray(u2, dtype=float),
        p=np.asarray(p, dtype=float),
        c=np.asarray(c, dtype=float),
    )
