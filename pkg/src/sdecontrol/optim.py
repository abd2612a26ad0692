"""Mini-batch gradient descent/ascent over policy parameters.

Each iteration draws a fresh batch of Wiener paths with seeds derived
deterministically from (base_seed, iteration, path index), averages the
per-path gradients, and applies an SGD or Adam update.  Diverged paths are
dropped and counted; a batch where more than half of the paths diverge is a
hard failure.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import BatchFailureError, ConfigurationError, DivergenceError
from .policy import MlpPolicy, save_policy
from .sensitivity import adjoint_core, forward_sensitivity
from .wiener import TimeGrid, generate_path

__all__ = [
    "OptimizerState",
    "TrainConfig",
    "TrainLog",
    "path_seed",
    "evaluation_seed",
    "batch_gradient",
    "sgd_update",
    "adam_update",
    "train",
]

# Seed stride between iterations; path seeds never collide while the batch
# size stays below it.
_SEED_STRIDE = 1 << 20
_EVAL_OFFSET = 1 << 40


def path_seed(base_seed: int, iteration: int, index: int) -> int:
    """Deterministic, collision-free seed for path `index` of `iteration`."""
    return base_seed + (iteration + 1) * _SEED_STRIDE + index


def evaluation_seed(base_seed: int, index: int) -> int:
    """Seeds for evaluation paths, disjoint from every training stream."""
    return base_seed + _EVAL_OFFSET + index


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 0.03
    direction: str = "minimize"
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    adam_m: Optional[np.ndarray] = None
    adam_v: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer kind {self.kind!r}")
        if self.direction not in ("minimize", "maximize"):
            raise ConfigurationError(f"unknown direction {self.direction!r}")

    @property
    def sign(self) -> float:
        return -1.0 if self.direction == "minimize" else 1.0


def _check_update(theta, grad):
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape:
        raise ConfigurationError(
            f"gradient shape {grad.shape} != parameter shape {theta.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise ConfigurationError("update rejected: non-finite gradient")
    return theta, grad


def sgd_update(state: OptimizerState, theta, grad) -> np.ndarray:
    """theta -+ lr * grad (minus when minimizing, plus when maximizing)."""
    theta, grad = _check_update(theta, grad)
    state.step_count += 1
    return theta + state.sign * state.learning_rate * grad


def adam_update(state: OptimizerState, theta, grad) -> np.ndarray:
    """Standard Adam with bias correction; moments start at zero."""
    theta, grad = _check_update(theta, grad)
    if state.adam_m is None:
        state.adam_m = np.zeros_like(theta)
        state.adam_v = np.zeros_like(theta)
    state.step_count += 1
    t = state.step_count
    state.adam_m = state.beta1 * state.adam_m + (1 - state.beta1) * grad
    state.adam_v = state.beta2 * state.adam_v + (1 - state.beta2) * grad**2
    m_hat = state.adam_m / (1 - state.beta1**t)
    v_hat = state.adam_v / (1 - state.beta2**t)
    return theta + state.sign * state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def apply_update(state: OptimizerState, theta, grad) -> np.ndarray:
    return (sgd_update if state.kind == "sgd" else adam_update)(state, theta, grad)


@dataclass
class TrainConfig:
    grid: TimeGrid
    batch_size: int = 50
    iterations: int = 100
    learning_rate: float = 0.03
    optimizer: str = "adam"
    estimator: str = "adjoint"
    direction: str = "minimize"
    base_seed: int = 0
    scheme: Optional[str] = None
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigurationError("batch_size and iterations must be >= 1")
        if self.estimator not in ("adjoint", "forward"):
            raise ConfigurationError(f"unknown estimator {self.estimator!r}")


@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)

    def append(self, **record):
        self.records.append(record)

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def to_csv(self, fileobj, include_wall=False):
        """One row per iteration.  Wall time is excluded by default so that
        reruns with identical seeds produce bit-identical files."""
        cols = ["iteration", "mean_cost", "grad_norm", "n_diverged"]
        if include_wall:
            cols.append("wall_ms")
        fileobj.write(",".join(cols) + "\n")
        for r in self.records:
            fileobj.write(",".join(f"{r[c]:.17g}" for c in cols) + "\n")


def batch_gradient(
    system,
    policy,
    cost,
    x0,
    base_seed,
    iteration,
    n_paths,
    grid,
    estimator="adjoint",
    scheme=None,
    threads=1,
):
    """Mean path-wise gradient and cost over a fresh batch of paths.

    Returns (mean_grad, mean_cost, n_diverged).  Paths that diverge (or whose
    cost/gradient comes out non-finite, e.g. a crossed log barrier) are
    dropped; more than 50% drops raise BatchFailureError.
    """
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    seeds = [path_seed(base_seed, iteration, i) for i in range(n_paths)]
    if estimator == "adjoint":
        # All paths share one batched forward/backward sweep; diverged lanes
        # turn into NaN rows and are masked out of the reduction.
        increments = np.stack(
            [generate_path(s, grid, system.noise_dim).increments for s in seeds], axis=1
        )  # (n_steps, N, n_xi)
        x0b = np.tile(np.asarray(x0, dtype=float), (n_paths, 1))
        grads, costs, _ = adjoint_core(
            system, policy, cost, x0b, increments, grid, scheme=scheme, check="none"
        )
        valid = np.isfinite(costs) & np.all(np.isfinite(grads), axis=-1)
    else:
        grads = np.zeros((n_paths, policy.n_params))
        costs = np.zeros(n_paths)
        valid = np.zeros(n_paths, dtype=bool)

        def one(i):
            path = generate_path(seeds[i], grid, system.noise_dim)
            try:
                rep = forward_sensitivity(system, policy, cost, x0, path, scheme=scheme)
            except DivergenceError:
                return i, None
            return i, rep

        if threads and threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, range(n_paths)))
        else:
            results = [one(i) for i in range(n_paths)]
        for i, rep in results:  # fixed order reduction for reproducibility
            if rep is not None and np.all(np.isfinite(rep.grad)) and np.isfinite(rep.cost_value):
                grads[i] = rep.grad
                costs[i] = rep.cost_value
                valid[i] = True
    n_valid = int(valid.sum())
    n_diverged = n_paths - n_valid
    if n_valid * 2 < n_paths:
        raise BatchFailureError(
            f"{n_diverged}/{n_paths} paths diverged in iteration {iteration}",
            iteration=iteration,
        )
    mean_grad = grads[valid].mean(axis=0)
    mean_cost = float(costs[valid].mean())
    return mean_grad, mean_cost, n_diverged


def train(system, policy, cost, x0, config: TrainConfig):
    """Run the full batch-gradient / update loop; returns (policy, TrainLog).

    Deterministic in (config.base_seed, initial parameters): the log and the
    final parameters are reproducible bit-for-bit.
    """
    state = OptimizerState(
        kind=config.optimizer,
        learning_rate=config.learning_rate,
        direction=config.direction,
    )
    log = TrainLog()
    theta = policy.get_params()
    for it in range(config.iterations):
        tic = time.perf_counter()
        try:
            grad, mean_cost, n_div = batch_gradient(
                system,
                policy,
                cost,
                x0,
                config.base_seed,
                it,
                config.batch_size,
                config.grid,
                estimator=config.estimator,
                scheme=config.scheme,
                threads=config.threads,
            )
        except BatchFailureError as exc:
            exc.iteration = it
            raise
        theta = apply_update(state, theta, grad)
        policy.set_params(theta)
        log.append(
            iteration=it,
            mean_cost=mean_cost,
            grad_norm=float(np.linalg.norm(grad)),
            n_diverged=n_div,
            wall_ms=(time.perf_counter() - tic) * 1e3,
        )
        if (
            config.checkpoint_every
            and config.checkpoint_dir
            and (it + 1) % config.checkpoint_every == 0
        ):
            save_policy(policy, f"{config.checkpoint_dir}/checkpoint_{it + 1:05d}.txt")
    return policy, log
