"""Finite-horizon portfolio optimization with proportional transaction costs.

Two-asset market: a stock S driven by geometric Brownian motion and a
riskless account V.  The control u = (u_i, u_d) gives the instantaneous
purchase and sale rates of stock; sales are charged a proportional cost
alpha.  The objective (maximized) rewards growth and penalizes large stock
positions through a running term nu * sigma * S^2; with nu = 0 a logarithmic
barrier on the solvency gap V + (1 - alpha) S acts as a soft constraint.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigurationError
from .optim import TrainConfig, evaluation_seed, train
from .policy import MlpPolicy, init_params, save_policy
from .sdecore import (
    Calculus,
    ControlledSystem,
    MILSTEIN_ITO,
    dump_trajectory_csv,
    integrate,
)
from .sensitivity import CostFunctional
from .wiener import TimeGrid, generate_path

__all__ = [
    "MarketParams",
    "build_system",
    "build_cost",
    "policy_grid",
    "write_policy_grid_csv",
    "solvency_gap",
    "evaluate_policy",
    "run_experiment",
]

Rate = Union[float, Callable[[float], float]]


def _at(value: Rate, t: float) -> float:
    return value(t) if callable(value) else value


@dataclass
class MarketParams:
    """Market and objective constants; rates may be callables of time."""

    alpha: float = 0.05
    r: Rate = 0.04
    mu: Rate = 0.23
    sigma: Rate = 0.18
    nu: float = 0.0
    barrier_weight: float = 1e-2
    horizon: float = 1.0
    x0: Tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if not callable(self.sigma) and self.sigma <= 0:
            raise ConfigurationError("sigma must be > 0")
        if self.nu < 0:
            raise ConfigurationError("nu must be >= 0")
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be > 0")


def solvency_gap(states: np.ndarray, alpha: float) -> np.ndarray:
    """V + (1 - alpha) S for states of shape (..., 2) with columns (S, V)."""
    return states[..., 1] + (1.0 - alpha) * states[..., 0]


def build_system(params: MarketParams) -> ControlledSystem:
    """Ito system for (S, V) with purchase/sale rates u = (u_i, u_d):

        dS = (mu S + u_i - u_d) dt + sigma S dB
        dV = (r V - u_i + (1 - alpha) u_d) dt
    """
    alpha = params.alpha
    p = params

    def drift(t, x, u):
        s, v = x[..., 0], x[..., 1]
        ui, ud = u[..., 0], u[..., 1]
        return np.stack(
            [
                _at(p.mu, t) * s + ui - ud,
                _at(p.r, t) * v - ui + (1.0 - alpha) * ud,
            ],
            axis=-1,
        )

    def diffusion(t, x, u):
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 0, 0] = _at(p.sigma, t) * x[..., 0]
        return g

    def drift_dx(t, x, u):
        j = np.zeros(x.shape[:-1] + (2, 2))
        j[..., 0, 0] = _at(p.mu, t)
        j[..., 1, 1] = _at(p.r, t)
        return j

    def drift_du(t, x, u):
        j = np.zeros(x.shape[:-1] + (2, 2))
        j[..., 0, 0] = 1.0
        j[..., 0, 1] = -1.0
        j[..., 1, 0] = -1.0
        j[..., 1, 1] = 1.0 - alpha
        return j

    def diffusion_dx(t, x, u):
        j = np.zeros(x.shape[:-1] + (1, 2, 2))
        j[..., 0, 0, 0] = _at(p.sigma, t)
        return j

    def diffusion_du(t, x, u):
        return np.zeros(x.shape[:-1] + (1, 2, 2))

    def milstein_dx(t, x, u):
        # m = (sigma^2 S / 2, 0); only dm_S/dS is nonzero
        j = np.zeros(x.shape[:-1] + (1, 2, 2))
        j[..., 0, 0, 0] = 0.5 * _at(p.sigma, t) ** 2
        return j

    def milstein_du(t, x, u):
        return np.zeros(x.shape[:-1] + (1, 2, 2))

    return ControlledSystem(
        state_dim=2,
        control_dim=2,
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


def build_cost(params: MarketParams) -> CostFunctional:
    """Objective (to be maximized): running reward r V + mu S - nu sigma S^2
    plus terminal reward r V_T + mu S_T.

    With nu = 0 the running reward gains barrier_weight * log(V + (1-alpha) S);
    a non-positive barrier argument yields NaN, which the integrators surface
    as path divergence.
    """
    p = params
    barrier = p.nu == 0.0 and p.barrier_weight != 0.0
    beta = p.barrier_weight
    alpha = p.alpha
    nu = p.nu

    def _log_gap(x):
        gap = solvency_gap(x, alpha)
        with np.errstate(all="ignore"):
            return np.where(gap > 0, np.log(np.where(gap > 0, gap, 1.0)), np.nan)

    def running(t, x, u):
        s, v = x[..., 0], x[..., 1]
        out = _at(p.r, t) * v + _at(p.mu, t) * s - nu * _at(p.sigma, t) * s**2
        if barrier:
            out = out + beta * _log_gap(x)
        return out

    def running_dx(t, x, u):
        s = x[..., 0]
        grad = np.zeros(x.shape[:-1] + (2,))
        grad[..., 0] = _at(p.mu, t) - 2.0 * nu * _at(p.sigma, t) * s
        grad[..., 1] = _at(p.r, t)
        if barrier:
            gap = solvency_gap(x, alpha)
            with np.errstate(all="ignore"):
                inv = np.where(gap > 0, beta / np.where(gap > 0, gap, 1.0), np.nan)
            grad[..., 0] += (1.0 - alpha) * inv
            grad[..., 1] += inv
        return grad

    def running_du(t, x, u):
        return np.zeros(u.shape[:-1] + (2,))

    T = p.horizon

    def terminal(x, u):
        return _at(p.r, T) * x[..., 1] + _at(p.mu, T) * x[..., 0]

    def terminal_dx(x, u):
        grad = np.zeros(x.shape[:-1] + (2,))
        grad[..., 0] = _at(p.mu, T)
        grad[..., 1] = _at(p.r, T)
        return grad

    return CostFunctional(
        running=running,
        terminal=terminal,
        running_dx=running_dx,
        running_du=running_du,
        terminal_dx=terminal_dx,
    )


def policy_grid(policy: MlpPolicy, s_range, v_range, resolution: int) -> np.ndarray:
    """Evaluate the policy on a lattice; rows are (S, V, u_i, u_d).

    The lattice is row-major over (S, V) with `resolution` points per axis.
    Points are evaluated one at a time so rows match direct eval calls
    bit-for-bit.
    """
    if resolution < 2:
        raise ConfigurationError("resolution must be >= 2")
    s_lo, s_hi = map(float, s_range)
    v_lo, v_hi = map(float, v_range)
    if not (np.isfinite([s_lo, s_hi, v_lo, v_hi]).all()):
        raise ConfigurationError("grid ranges must be finite")
    s_vals = np.linspace(s_lo, s_hi, resolution)
    v_vals = np.linspace(v_lo, v_hi, resolution)
    rows = np.zeros((resolution * resolution, 2 + policy.n_out))
    idx = 0
    for s in s_vals:
        for v in v_vals:
            u = policy.control(0.0, np.array([s, v]))
            rows[idx, 0] = s
            rows[idx, 1] = v
            rows[idx, 2:] = u
            idx += 1
    return rows


def write_policy_grid_csv(rows: np.ndarray, fileobj) -> None:
    fileobj.write("S,V,u_i,u_d\n")
    for row in rows:
        fileobj.write(",".join(f"{v:.17g}" for v in row) + "\n")


@dataclass
class PolicyStats:
    """Monte Carlo summary of a policy over evaluation paths."""

    mean_terminal_stock: float
    mean_terminal_bank: float
    mean_objective: float
    mean_stock_penalty: float
    solvency_crossing_fraction: float
    n_paths: int


def evaluate_policy(
    params: MarketParams,
    policy: Optional[MlpPolicy],
    grid: TimeGrid,
    n_paths: int,
    seed_base: int = 0,
    keep_trajectories: int = 0,
) -> Tuple[PolicyStats, List]:
    """Simulate fresh evaluation paths and report portfolio statistics.

    Seeds come from the evaluation stream, disjoint from all training seeds.
    The stock penalty is the left-endpoint quadrature of sigma S^2 (without
    the nu weight, so policies trained at different nu are comparable).
    """
    system = build_system(params)
    cost = build_cost(params)
    dt = grid.dt
    st, bank, obj, pen, crossed = [], [], [], [], []
    kept = []
    sigmas = np.array([_at(params.sigma, t) for t in grid.times()])
    for i in range(n_paths):
        path = generate_path(evaluation_seed(seed_base, i), grid, 1)
        traj = integrate(system, policy, np.asarray(params.x0, dtype=float), path, MILSTEIN_ITO)
        s = traj.states[:, 0]
        v = traj.states[:, 1]
        st.append(s[-1])
        bank.append(v[-1])
        pen.append(float(np.sum(sigmas[:-1] * s[:-1] ** 2) * dt))
        run = np.array(
            [
                cost.running(grid.time(k), traj.states[k], traj.controls[k])
                for k in range(grid.n_steps)
            ]
        )
        obj.append(float(np.sum(run) * dt + cost.terminal(traj.states[-1], traj.controls[-1])))
        crossed.append(bool(np.any(solvency_gap(traj.states, params.alpha) < 0)))
        if i < keep_trajectories:
            kept.append(traj)
    stats = PolicyStats(
        mean_terminal_stock=float(np.mean(st)),
        mean_terminal_bank=float(np.mean(bank)),
        mean_objective=float(np.mean(obj)),
        mean_stock_penalty=float(np.mean(pen)),
        solvency_crossing_fraction=float(np.mean(crossed)),
        n_paths=n_paths,
    )
    return stats, kept


@dataclass
class ExperimentResult:
    """Per-nu artifacts of one experiment run."""

    nu: float
    policy: MlpPolicy
    log: object
    stats: PolicyStats
    files: List[str] = field(default_factory=list)


def _nu_tag(nu: float) -> str:
    return f"{nu:g}"


def run_experiment(
    params: MarketParams,
    train_config: TrainConfig,
    nu_values=(0.0, 0.25, 0.5, 1.0),
    out_dir: str = ".",
    hidden_dims=(32, 32, 32),
    policy_seed: int = 0,
    eval_paths: int = 50,
    trajectory_dumps: int = 3,
    grid_resolution: int = 21,
    grid_s_range=(0.0, 2.0),
    grid_v_range=(-1.0, 1.0),
):
    """Train one policy per nu, evaluate it on fresh paths, export artifacts.

    Per nu the output directory receives trainlog_nu<nu>.csv, checkpoint
    policy_nu<nu>.txt, traj_nu<nu>_seed<k>.csv and policygrid_nu<nu>.csv.
    Returns {nu: ExperimentResult}.
    """
    os.makedirs(out_dir, exist_ok=True)
    results = {}
    for nu in nu_values:
        p = MarketParams(
            alpha=params.alpha,
            r=params.r,
            mu=params.mu,
            sigma=params.sigma,
            nu=float(nu),
            barrier_weight=params.barrier_weight,
            horizon=params.horizon,
            x0=params.x0,
        )
        system = build_system(p)
        cost = build_cost(p)
        policy = init_params([2, *hidden_dims, 2], seed=policy_seed)
        policy, log = train(system, policy, cost, np.asarray(p.x0, dtype=float), train_config)
        tag = _nu_tag(nu)
        files = []

        path = os.path.join(out_dir, f"trainlog_nu{tag}.csv")
        with open(path, "w") as fh:
            log.to_csv(fh)
        files.append(path)

        path = os.path.join(out_dir, f"policy_nu{tag}.txt")
        save_policy(policy, path)
        files.append(path)

        stats, kept = evaluate_policy(
            p,
            policy,
            train_config.grid,
            eval_paths,
            seed_base=train_config.base_seed,
            keep_trajectories=trajectory_dumps,
        )
        for k, traj in enumerate(kept):
            path = os.path.join(out_dir, f"traj_nu{tag}_seed{k}.csv")
            with open(path, "w") as fh:
                dump_trajectory_csv(traj, fh, ["S", "V"], ["u_i", "u_d"])
            files.append(path)

        rows = policy_grid(policy, grid_s_range, grid_v_range, grid_resolution)
        path = os.path.join(out_dir, f"policygrid_nu{tag}.csv")
        with open(path, "w") as fh:
            write_policy_grid_csv(rows, fh)
        files.append(path)

        results[nu] = ExperimentResult(
            nu=float(nu), policy=policy, log=log, stats=stats, files=files
        )
    return results
