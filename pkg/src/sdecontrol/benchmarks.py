"""Reference systems used by gradient checks and convergence studies."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .policy import init_params
from .sdecore import Calculus, ControlledSystem
from .sensitivity import CostFunctional

__all__ = [
    "gbm_system",
    "gbm_exact_path",
    "controlled_gbm_system",
    "controlled_gbm_cost",
    "build_grad_check_problem",
    "GRAD_CHECK_SYSTEMS",
]


def gbm_system(mu=0.23, sigma=0.18) -> ControlledSystem:
    """Uncontrolled geometric Brownian motion dx = mu x dt + sigma x dB (Ito)."""

    def drift(t, x, u):
        return mu * x

    def diffusion(t, x, u):
        return sigma * x[..., None]

    def drift_dx(t, x, u):
        return np.broadcast_to(np.array([[mu]]), x.shape[:-1] + (1, 1))

    def drift_du(t, x, u):
        return np.zeros(x.shape[:-1] + (1, 0))

    def diffusion_dx(t, x, u):
        return np.broadcast_to(np.array([[[sigma]]]), x.shape[:-1] + (1, 1, 1))

    def diffusion_du(t, x, u):
        return np.zeros(x.shape[:-1] + (1, 1, 0))

    def milstein_dx(t, x, u):
        return np.broadcast_to(
            np.array([[[0.5 * sigma**2]]]), x.shape[:-1] + (1, 1, 1)
        )

    def milstein_du(t, x, u):
        return np.zeros(x.shape[:-1] + (1, 1, 0))

    return ControlledSystem(
        state_dim=1,
        control_dim=0,
        noise_dim=1,
        drift=drift,
        diffusion=diffusion,
        drift_dx=drift_dx,
        drift_du=drift_du,
        diffusion_dx=diffusion_dx,
        diffusion_du=diffusion_du,
        calculus=Calculus.ITO,
        milstein_dx=milstein_dx,
        milstein_du=milstein_du,
    )


def gbm_exact_path(x0, mu, sigma, times, b_values):
    """Closed-form GBM driven by the given Brownian values at `times`."""
    times = np.asarray(times, dtype=float)
    b = np.asarray(b_values, dtype=float)
    return x0 * np.exp((mu - 0.5 * sigma**2) * (times - times[0]) + sigma * b)


def controlled_gbm_system(mu=0.23, sigma=0.18, control_gain=0.1) -> ControlledSystem:
    """GBM with a scalar control entering drift and diffusion:
    dx = (mu x + u) dt + (sigma x + c u) dB."""
    c = control_gain

    def drift(t, x, u):
        return mu * x + u

    def diffusion(t, x, u):
        return (sigma * x + c * u)[..., None]

    def drift_dx(t, x, u):
        return np.broadcast_to(np.array([[mu]]), x.shape[:-1] + (1, 1))

    def drift_du(t, x, u):
        return np.broadcast_to(np.array([[1.0]]), x.shape[:-1] + (1, 1))

    def diffusion_dx(t, x, u):
        return np.broadcast_to(np.array([[[sigma]]]), x.shape[:-1] + (1, 1, 1))

    def diffusion_du(t, x, u):
        return np.broadcast_to(np.array([[[c]]]), x.shape[:-1] + (1, 1, 1))

    def milstein_dx(t, x, u):
        # m = sigma (sigma x + c u) / 2
        return np.broadcast_to(
            np.array([[[0.5 * sigma**2]]]), x.shape[:-1] + (1, 1, 1)
        )

    def milstein_du(t, x, u):
        return np.broadcast_to(
            np.array([[[0.5 * sigma * c]]]), x.shape[:-1] + (1, 1, 1)
        )

    return ControlledSystem(
        state_dim=1,
        control_dim=1,
        noise_dim=1,
        drift=drift,
        diffusion=diffusion,
        drift_dx=drift_dx,
        drift_du=drift_du,
        diffusion_dx=diffusion_dx,
        diffusion_du=diffusion_du,
        calculus=Calculus.ITO,
        milstein_dx=milstein_dx,
        milstein_du=milstein_du,
    )


def controlled_gbm_cost(state_weight=1.0, control_weight=0.1) -> CostFunctional:
    """Quadratic running cost plus linear terminal cost for the controlled GBM."""

    def running(t, x, u):
        return state_weight * x[..., 0] ** 2 + control_weight * u[..., 0] ** 2

    def running_dx(t, x, u):
        return (2.0 * state_weight * x[..., 0])[..., None]

    def running_du(t, x, u):
        return (2.0 * control_weight * u[..., 0])[..., None]

    def terminal(x, u):
        return x[..., 0]

    def terminal_dx(x, u):
        return np.broadcast_to(np.array([1.0]), x.shape)

    return CostFunctional(
        running=running,
        terminal=terminal,
        running_dx=running_dx,
        running_du=running_du,
        terminal_dx=terminal_dx,
    )


def build_grad_check_problem(
    name,
    hidden_dims=(16,),
    policy_seed=0,
    mu=0.23,
    sigma=0.18,
    nu=0.25,
    x0=None,
):
    """(system, cost, x0, policy) for a registered gradient-check system."""
    if name == "gbm":
        system = controlled_gbm_system(mu=mu, sigma=sigma)
        cost = controlled_gbm_cost()
        x0 = np.array([1.0]) if x0 is None else np.asarray(x0, dtype=float)
        policy = init_params([1, *hidden_dims, 1], seed=policy_seed)
        return system, cost, x0, policy
    if name == "portfolio":
        from .portfolio import MarketParams, build_cost, build_system

        params = MarketParams(nu=nu)
        system = build_system(params)
        cost = build_cost(params)
        x0 = np.asarray(params.x0, dtype=float) if x0 is None else np.asarray(x0, dtype=float)
        policy = init_params([2, *hidden_dims, 2], seed=policy_seed)
        return system, cost, x0, policy
    raise ConfigurationError(
        f"unknown gradient-check system {name!r}; choose from {sorted(GRAD_CHECK_SYSTEMS)}"
    )


GRAD_CHECK_SYSTEMS = ("gbm", "portfolio")
