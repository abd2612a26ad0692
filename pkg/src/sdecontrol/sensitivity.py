"""Cost evaluation and path-wise gradients d J / d theta.

Three estimators are provided for the same discretized cost:

* ``forward_sensitivity`` propagates the state-vs-parameter sensitivity
  matrix alongside the trajectory, using the exact Jacobians of the discrete
  step map (a Milstein-consistent discretization of the forward sensitivity
  SDE driven by the same increments).
* ``adjoint_gradient`` runs the transposed recursion backward: a costate
  vector is pulled through the stored trajectory while parameter cotangents
  accumulate through the policy's VJPs.  This is the Stratonovich-Milstein
  backward sweep over the reversed increments, realized as the exact discrete
  adjoint so that the gradient of the discretized cost and the discretized
  gradient coincide.
* ``finite_difference_gradient`` central-differences the discretized cost on
  the same Brownian path, one coordinate at a time.

Ito-specified systems are used as-is (the Ito-Milstein forward scheme is
algebraically identical to Stratonovich-Milstein on the converted system);
Stratonovich-specified systems are converted to Ito form before
differentiation.

Quadrature convention: left-endpoint Riemann sums for dt-integrals; the
terminal cost is evaluated at the last grid point.  With point-wise cost
times, the running integral is replaced by a plain sum over those times and
the costate jumps by the running-cost gradient when the backward sweep
reaches each jump time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CapacityError, ConfigurationError, DivergenceError
from .policy import MlpPolicy
from .sdecore import (
    Calculus,
    EULER_MARUYAMA,
    MILSTEIN_ITO,
    convert_calculus,
    forward_states,
    milstein_terms,
    step_partials,
)
from .wiener import WienerPath

__all__ = [
    "CostFunctional",
    "GradientReport",
    "eval_cost",
    "forward_sensitivity",
    "adjoint_gradient",
    "adjoint_gradient_pointwise",
    "finite_difference_gradient",
    "gradient_agreement",
    "write_gradient_check_csv",
    "check_cost_partials",
]

_SENS_CAPACITY = 5 * 10**7  # entries allowed in the n_x * n_theta sensitivity matrix


@dataclass
class CostFunctional:
    """Running + terminal cost with analytic partials.

    Callbacks broadcast over leading batch axes:
        running(t, x, u) -> (...)            running_dx -> (..., n_x)
        terminal(x_T, u_T) -> (...)          running_du -> (..., n_u)
    ``terminal_du`` may be None when the terminal cost ignores the control.
    ``pointwise_times`` switches the running integral to a finite sum over
    those (on-grid) times.
    """

    running: Callable
    terminal: Callable
    running_dx: Callable
    running_du: Callable
    terminal_dx: Callable
    terminal_du: Optional[Callable] = None
    pointwise_times: Optional[Sequence[float]] = None


@dataclass
class GradientReport:
    grad: np.ndarray
    estimator: str
    path_seed: int
    cost_value: float


@dataclass
class AdjointState:
    """Costate at every grid point plus the accumulated parameter gradient."""

    lambdas: np.ndarray  # (n_steps + 1, ..., n_x)
    grad_acc: np.ndarray


# -- plumbing ---------------------------------------------------------------


def _as_ito(system):
    return system if system.calculus is Calculus.ITO else convert_calculus(system)


def _resolve_scheme(scheme):
    scheme = scheme or MILSTEIN_ITO
    if scheme not in (MILSTEIN_ITO, EULER_MARUYAMA):
        raise ConfigurationError(
            f"gradient estimators integrate with Ito schemes, got {scheme!r}"
        )
    return scheme


def _require_policy(policy):
    if policy is None:
        raise ConfigurationError("gradient computation requires a parametric policy")


def _net_input(policy, t, x):
    if policy.with_time:
        x = np.asarray(x, dtype=float)
        tcol = np.broadcast_to(float(t), x.shape[:-1] + (1,))
        return np.concatenate([x, tcol], axis=-1)
    return np.asarray(x, dtype=float)


def _policy_ux(policy, t, x, n_x):
    """Jacobian of u w.r.t. the state (time column dropped), (..., n_u, n_x)."""
    jac = policy.jacobian_input(_net_input(policy, t, x))
    return jac[..., :n_x]


def _policy_vjp_x(policy, t, x, cot, n_x):
    out = policy.vjp_input(_net_input(policy, t, x), cot)
    return out[..., :n_x]


def _jump_indices(cost, grid):
    if not cost.pointwise_times:
        return None
    return sorted(grid.index_of(t) for t in cost.pointwise_times)


def _quadrature(cost, grid, states, controls):
    """Discretized cost over stored states/controls; batch axes preserved."""
    jumps = _jump_indices(cost, grid)
    if jumps is None:
        total = 0.0
        dt = grid.dt
        for k in range(grid.n_steps):
            total = total + cost.running(grid.time(k), states[k], controls[k]) * dt
    else:
        total = 0.0
        for k in jumps:
            total = total + cost.running(grid.time(k), states[k], controls[k])
    return total + cost.terminal(states[-1], controls[-1])


# -- public cost evaluation -------------------------------------------------


def eval_cost(system, policy, cost, x0, path: WienerPath, scheme=None) -> float:
    """Discretized cost along the trajectory driven by `path`."""
    sys_i = _as_ito(system)
    scheme = _resolve_scheme(scheme)
    states, controls = forward_states(
        sys_i, policy, np.asarray(x0, dtype=float), path.increments, path.grid, scheme
    )
    value = _quadrature(cost, path.grid, states, controls)
    value = float(value)
    if not np.isfinite(value):
        raise DivergenceError("cost evaluation produced a non-finite value")
    return value


# -- forward sensitivity ----------------------------------------------------


def forward_sensitivity(system, policy, cost, x0, path, scheme=None) -> GradientReport:
    """Gradient via joint integration of the state and its parameter
    sensitivity matrix."""
    _require_policy(policy)
    sys_i = _as_ito(system)
    scheme = _resolve_scheme(scheme)
    n_x, n_theta = sys_i.state_dim, policy.n_params
    if n_x * n_theta > _SENS_CAPACITY:
        raise CapacityError(
            f"sensitivity matrix would hold {n_x * n_theta} entries "
            f"(limit {_SENS_CAPACITY}); use the adjoint estimator"
        )
    grid, dt = path.grid, path.grid.dt
    jumps = _jump_indices(cost, grid)
    jump_set = set(jumps or [])
    x = np.asarray(x0, dtype=float)
    S = np.zeros((n_x, n_theta))
    grad = np.zeros(n_theta)
    value = 0.0
    for k in range(grid.n_steps):
        t = grid.time(k)
        u = policy.control(t, x)
        ux = _policy_ux(policy, t, x, n_x)
        utheta = policy.jacobian_params(_net_input(policy, t, x))
        chain = ux @ S + utheta  # (n_u, n_theta): total du/dtheta
        if jumps is None:
            grad += dt * (cost.running_dx(t, x, u) @ S + cost.running_du(t, x, u) @ chain)
            value += dt * cost.running(t, x, u)
        elif k in jump_set:
            grad += cost.running_dx(t, x, u) @ S + cost.running_du(t, x, u) @ chain
            value += cost.running(t, x, u)
        x_next, jx, ju = step_partials(sys_i, t, x, u, dt, path.increments[k], scheme)
        if not np.all(np.isfinite(x_next)):
            raise DivergenceError(f"divergence at step {k}", step_index=k)
        S = jx @ S + ju @ chain
        x = x_next
    tT = grid.time(grid.n_steps)
    uT = policy.control(tT, x)
    value += cost.terminal(x, uT)
    grad += cost.terminal_dx(x, uT) @ S
    if cost.terminal_du is not None:
        ux = _policy_ux(policy, tT, x, n_x)
        utheta = policy.jacobian_params(_net_input(policy, tT, x))
        grad += cost.terminal_du(x, uT) @ (ux @ S + utheta)
    if jumps is not None and grid.n_steps in jump_set:
        ux = _policy_ux(policy, tT, x, n_x)
        utheta = policy.jacobian_params(_net_input(policy, tT, x))
        grad += cost.running_dx(tT, x, uT) @ S + cost.running_du(tT, x, uT) @ (
            ux @ S + utheta
        )
        value += cost.running(tT, x, uT)
    return GradientReport(
        grad=grad, estimator="forward", path_seed=path.seed, cost_value=float(value)
    )


# -- adjoint ----------------------------------------------------------------


def _accumulate(acc, layers, weight=None):
    if weight is not None:
        layers = [(gw * weight, gb * weight) for gw, gb in layers]
    if acc is None:
        return [[gw.copy(), gb.copy()] for gw, gb in layers]
    for slot, (gw, gb) in zip(acc, layers):
        slot[0] += gw
        slot[1] += gb
    return acc


def adjoint_core(
    system,
    policy,
    cost,
    x0,
    increments,
    grid,
    scheme=None,
    pointwise=False,
    keep_lambda=False,
    check="raise",
):
    """Batched backward-adjoint gradient over stored forward states.

    ``increments`` has shape (n_steps, ..., n_xi); x0 must carry matching
    batch axes.  Returns (per-sample grads (..., n_theta), costs (...),
    AdjointState or None).  With check="none", diverged batch lanes carry
    NaNs and must be masked by the caller.
    """
    _require_policy(policy)
    sys_i = _as_ito(system)
    scheme = _resolve_scheme(scheme)
    n_x = sys_i.state_dim
    dt = grid.dt
    if pointwise:
        if not cost.pointwise_times:
            raise ConfigurationError("pointwise adjoint requires cost.pointwise_times")
        jump_set = set(_jump_indices(cost, grid))
    else:
        jump_set = None
    states, controls = forward_states(sys_i, policy, x0, increments, grid, scheme, check)
    with np.errstate(all="ignore"):
        value = _quadrature(cost, grid, states, controls)

        K = grid.n_steps
        tT = grid.time(K)
        xT, uT = states[K], controls[K]
        lam_T = np.broadcast_to(
            np.asarray(cost.terminal_dx(xT, uT), dtype=float), xT.shape
        ).copy()
        lambdas = np.zeros_like(states) if keep_lambda else None
        if keep_lambda:
            lambdas[K] = lam_T
        a = lam_T
        acc = None
        if cost.terminal_du is not None:
            cu = np.asarray(cost.terminal_du(xT, uT), dtype=float)
            acc = _accumulate(acc, policy.vjp_params_layers(_net_input(policy, tT, xT), cu))
            a = a + _policy_vjp_x(policy, tT, xT, cu, n_x)
        if jump_set is not None and K in jump_set:
            cu = np.asarray(cost.running_du(tT, xT, uT), dtype=float)
            acc = _accumulate(acc, policy.vjp_params_layers(_net_input(policy, tT, xT), cu))
            a = a + cost.running_dx(tT, xT, uT) + _policy_vjp_x(policy, tT, xT, cu, n_x)

        for k in range(K - 1, -1, -1):
            t = grid.time(k)
            x, u = states[k], controls[k]
            _, jx, ju = step_partials(sys_i, t, x, u, dt, increments[k], scheme)
            cu = np.einsum("...au,...a->...u", ju, a)
            if jump_set is None:
                cu = cu + dt * np.asarray(cost.running_du(t, x, u), dtype=float)
            acc = _accumulate(acc, policy.vjp_params_layers(_net_input(policy, t, x), cu))
            a = np.einsum("...ab,...a->...b", jx, a) + _policy_vjp_x(policy, t, x, cu, n_x)
            if jump_set is None:
                a = a + dt * np.asarray(cost.running_dx(t, x, u), dtype=float)
            elif k in jump_set:
                cj = np.asarray(cost.running_du(t, x, u), dtype=float)
                acc = _accumulate(acc, policy.vjp_params_layers(_net_input(policy, t, x), cj))
                a = a + cost.running_dx(t, x, u) + _policy_vjp_x(policy, t, x, cj, n_x)
            if keep_lambda:
                lambdas[k] = a

    grads = policy.flatten_layer_grads(acc)
    adjoint = AdjointState(lambdas=lambdas, grad_acc=grads) if keep_lambda else None
    return grads, np.asarray(value, dtype=float), adjoint


def adjoint_gradient(system, policy, cost, x0, path, scheme=None, return_adjoint=False):
    """Gradient via the backward costate sweep on the stored trajectory."""
    grads, value, adjoint = adjoint_core(
        system,
        policy,
        cost,
        np.asarray(x0, dtype=float),
        path.increments,
        path.grid,
        scheme=scheme,
        pointwise=False,
        keep_lambda=return_adjoint,
    )
    report = GradientReport(
        grad=grads, estimator="adjoint", path_seed=path.seed, cost_value=float(value)
    )
    return (report, adjoint) if return_adjoint else report


def adjoint_gradient_pointwise(
    system, policy, cost, x0, path, scheme=None, return_adjoint=False
):
    """Adjoint gradient for point-wise running costs: the costate evolves
    cost-free between jump times and jumps by the running-cost gradient at
    each of them."""
    grads, value, adjoint = adjoint_core(
        system,
        policy,
        cost,
        np.asarray(x0, dtype=float),
        path.increments,
        path.grid,
        scheme=scheme,
        pointwise=True,
        keep_lambda=return_adjoint,
    )
    report = GradientReport(
        grad=grads, estimator="adjoint", path_seed=path.seed, cost_value=float(value)
    )
    return (report, adjoint) if return_adjoint else report


# -- finite differences -----------------------------------------------------


def _perturbation_plan(policy, idx, h_signed):
    """Per-layer scatter plan for single-coordinate parameter perturbations.

    Row r of the batch evaluates the network at theta + h_signed[r] * e_idx[r].
    Because only one coordinate differs per row, each layer is a shared affine
    map plus a rank-zero correction on the perturbed rows.
    """
    idx = np.asarray(idx)
    h_signed = np.asarray(h_signed, dtype=float)
    plan = []
    off = 0
    for w, b in zip(policy.weights, policy.biases):
        fan_in = w.shape[1]
        w_lo, w_hi, b_hi = off, off + w.size, off + w.size + b.size
        sel_w = (idx >= w_lo) & (idx < w_hi)
        sel_b = (idx >= w_hi) & (idx < b_hi)
        rows_w = np.nonzero(sel_w)[0]
        flat = idx[rows_w] - w_lo
        plan.append(
            (
                rows_w,
                flat // fan_in,
                flat % fan_in,
                h_signed[rows_w],
                np.nonzero(sel_b)[0],
                idx[sel_b] - w_hi,
                h_signed[sel_b],
            )
        )
        off = b_hi
    return plan


def _perturbed_eval(policy, plan, a):
    """Forward pass for the whole perturbation batch: one shared gemm per
    layer, then in-place corrections on the rows owning that layer."""
    last = len(policy.weights) - 1
    for k, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        z = a @ w.T + b
        rows_w, out_w, in_w, h_w, rows_b, out_b, h_b = plan[k]
        if rows_w.size:
            z[rows_w, out_w] += h_w * a[rows_w, in_w]
        if rows_b.size:
            z[rows_b, out_b] += h_b
        phi = policy.output if k == last else policy.hidden
        a = phi.value(z)
    return a


def _eval_cost_perturbed(system, policy, cost, x0, increments, grid, idx, h_signed, scheme):
    """Discretized cost for a batch of one-coordinate theta perturbations,
    all driven by the same stored increments."""
    B = len(idx)
    plan = _perturbation_plan(policy, idx, h_signed)
    x = np.tile(np.asarray(x0, dtype=float), (B, 1))
    dt = grid.dt
    jumps = _jump_indices(cost, grid)
    jump_set = set(jumps or [])
    total = np.zeros(B)
    with np.errstate(all="ignore"):
        for k in range(grid.n_steps):
            t = grid.time(k)
            u = _perturbed_eval(policy, plan, _net_input(policy, t, x))
            if jumps is None:
                total += dt * cost.running(t, x, u)
            elif k in jump_set:
                total += cost.running(t, x, u)
            f = system.drift(t, x, u)
            g = system.diffusion(t, x, u)
            dB = increments[k]
            x_next = x + f * dt + g @ dB
            if scheme == MILSTEIN_ITO:
                m = milstein_terms(system, t, x, u)
                x_next = x_next + np.tensordot(m, dB**2 - dt, axes=([1], [0]))
            x = x_next
        tT = grid.time(grid.n_steps)
        u = _perturbed_eval(policy, plan, _net_input(policy, tT, x))
        if jumps is not None and grid.n_steps in jump_set:
            total += cost.running(tT, x, u)
        total += cost.terminal(x, u)
    return total


def finite_difference_gradient(
    system, policy, cost, x0, path, h_rel=1e-5, scheme=None
) -> GradientReport:
    """Central finite differences of the discretized cost over all parameter
    coordinates, every evaluation on the same Wiener path.

    Step per coordinate: h_j = h_rel * max(1, |theta_j|).
    """
    _require_policy(policy)
    if h_rel <= 0:
        raise ConfigurationError(f"h_rel must be positive, got {h_rel}")
    sys_i = _as_ito(system)
    scheme = _resolve_scheme(scheme)
    theta0 = policy.get_params()
    n_theta = theta0.size
    h = h_rel * np.maximum(1.0, np.abs(theta0))
    grad = np.zeros(n_theta)
    # Chunked batched evaluation: all +-h perturbations for a block of
    # coordinates are integrated simultaneously.
    block = max(1, int(2e7 // max(n_theta, 1)))
    for start in range(0, n_theta, block):
        idx = np.arange(start, min(start + block, n_theta))
        rows = np.arange(idx.size)
        idx2 = np.repeat(idx, 2)
        h2 = np.repeat(h[idx], 2)
        h2[1::2] *= -1.0
        vals = _eval_cost_perturbed(
            sys_i, policy, cost, x0, path.increments, path.grid, idx2, h2, scheme
        )
        if not np.all(np.isfinite(vals)):
            raise DivergenceError("divergence during finite-difference evaluation")
        grad[idx] = (vals[2 * rows] - vals[2 * rows + 1]) / (2.0 * h[idx])
    base = eval_cost(system, policy, cost, x0, path, scheme)
    return GradientReport(
        grad=grad,
        estimator="finite_difference",
        path_seed=path.seed,
        cost_value=base,
    )


# -- comparison helpers -----------------------------------------------------


def gradient_agreement(a, b, floor=1e-8):
    """(cosine similarity, max coordinate-relative error) between gradients.

    The relative error of coordinate j is |a_j - b_j| / max(|a_j|, |b_j|) and
    is measured only where that magnitude exceeds `floor`.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    cosine = float(a @ b / (na * nb)) if na > 0 and nb > 0 else 1.0
    mags = np.maximum(np.abs(a), np.abs(b))
    mask = mags > floor
    max_rel = float(np.max(np.abs(a - b)[mask] / mags[mask])) if mask.any() else 0.0
    return cosine, max_rel


def write_gradient_check_csv(fd_report, forward_report, adjoint_report, fileobj, floor=1e-8):
    """Per-coordinate estimator comparison table."""
    fd, fw, ad = fd_report.grad, forward_report.grad, adjoint_report.grad
    fileobj.write("coord_index,fd,forward,adjoint,rel_err_fa,rel_err_fd\n")
    for j in range(fd.size):
        den_fa = max(abs(fw[j]), abs(ad[j]), floor)
        den_fd = max(abs(ad[j]), abs(fd[j]), floor)
        rel_fa = abs(fw[j] - ad[j]) / den_fa
        rel_fd = abs(ad[j] - fd[j]) / den_fd
        fileobj.write(
            ",".join(
                f"{v:.17g}" for v in (j, fd[j], fw[j], ad[j], rel_fa, rel_fd)
            )
            + "\n"
        )


def check_cost_partials(cost, n_x, n_u, n_points=50, seed=0, tol=1e-5, sampler=None):
    """Finite-difference self-check for cost partials; returns the worst
    relative error, raising when it exceeds `tol`."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    worst = 0.0
    for _ in range(n_points):
        if sampler is not None:
            t, x, u = sampler(rng)
        else:
            t = float(rng.uniform(0.0, 1.0))
            x = rng.standard_normal(n_x)
            u = rng.standard_normal(n_u)

        def fd_grad(fun, z):
            out = np.zeros(z.size)
            for b in range(z.size):
                hb = 1e-6 * max(1.0, abs(z[b]))
                zp = z.copy()
                zp[b] += hb
                zm = z.copy()
                zm[b] -= hb
                out[b] = (fun(zp) - fun(zm)) / (2 * hb)
            return out

        pairs = [
            (np.asarray(cost.running_dx(t, x, u)), fd_grad(lambda z: cost.running(t, z, u), x)),
            (np.asarray(cost.running_du(t, x, u)), fd_grad(lambda z: cost.running(t, x, z), u)),
            (np.asarray(cost.terminal_dx(x, u)), fd_grad(lambda z: cost.terminal(z, u), x)),
        ]
        if cost.terminal_du is not None:
            pairs.append(
                (np.asarray(cost.terminal_du(x, u)), fd_grad(lambda z: cost.terminal(x, z), u))
            )
        for analytic, fd in pairs:
            denom = np.maximum(1.0, np.abs(analytic))
            if analytic.size:
                worst = max(worst, float(np.max(np.abs(analytic - fd) / denom)))
    if worst > tol:
        raise ConfigurationError(
            f"cost partials disagree with finite differences: {worst:.3e} > {tol:.1e}"
        )
    return worst
