"""Controlled SDE systems and their forward/backward numerical integration.

Shape conventions (all callbacks must broadcast over leading batch axes):

    x                     (..., n_x)
    u                     (..., n_u)
    drift(t, x, u)        (..., n_x)
    diffusion(t, x, u)    (..., n_x, n_xi)
    drift_dx(t, x, u)     (..., n_x, n_x)      rows = output, cols = input
    drift_du(t, x, u)     (..., n_x, n_u)
    diffusion_dx(t, x, u) (..., n_xi, n_x, n_x)  [i] = Jacobian of noise column i
    diffusion_du(t, x, u) (..., n_xi, n_x, n_u)

Calculus conversion follows the identity that a Stratonovich integral equals
the Ito integral plus half the sum over noise channels of (dg_i/dx) g_i
integrated in time; equivalently the Ito drift minus that correction is the
Stratonovich drift.  The per-channel correction m_i = (1/2) (dg_i/dx) g_i is
also the Milstein term, so systems may supply analytic partials of it
(``milstein_dx`` / ``milstein_du``); otherwise central finite differences of
the correction are used.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DivergenceError, UnsupportedSchemeError
from .wiener import TimeGrid, WienerPath, BackwardWienerPath

__all__ = [
    "Calculus",
    "ControlledSystem",
    "Trajectory",
    "EULER_MARUYAMA",
    "MILSTEIN_ITO",
    "MILSTEIN_STRATONOVICH",
    "EULER_HEUN",
    "default_scheme",
    "euler_maruyama_step",
    "milstein_step",
    "integrate",
    "integrate_backward",
    "convert_calculus",
    "self_check_partials",
    "milstein_terms",
    "dump_trajectory_csv",
]


class Calculus(Enum):
    ITO = "ito"
    STRATONOVICH = "stratonovich"


# Scheme identifiers.
EULER_MARUYAMA = "euler_maruyama"
MILSTEIN_ITO = "milstein_ito"
MILSTEIN_STRATONOVICH = "milstein_stratonovich"
EULER_HEUN = "euler_heun"

_ITO_SCHEMES = {EULER_MARUYAMA, MILSTEIN_ITO}
_STRAT_SCHEMES = {MILSTEIN_STRATONOVICH, EULER_HEUN}
_ALL_SCHEMES = _ITO_SCHEMES | _STRAT_SCHEMES


@dataclass
class ControlledSystem:
    """Drift/diffusion callbacks with analytic first partials.

    ``milstein_dx`` / ``milstein_du`` are optional analytic partials of the
    per-channel Milstein term m_i = (1/2)(dg_i/dx) g_i with shapes
    (..., n_xi, n_x, n_x) and (..., n_xi, n_x, n_u); when absent they are
    approximated by central finite differences of the term itself.

    ``commutative_noise`` declares that multi-channel noise is diagonal or
    commutative, which is what the diagonal Milstein correction assumes.
    """

    state_dim: int
    control_dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    drift_dx: Callable
    drift_du: Callable
    diffusion_dx: Callable
    diffusion_du: Callable
    calculus: Calculus
    milstein_dx: Optional[Callable] = None
    milstein_du: Optional[Callable] = None
    commutative_noise: bool = False


@dataclass
class Trajectory:
    """States and controls recorded at every grid point."""

    grid: TimeGrid
    states: np.ndarray  # (n_steps + 1, ..., n_x)
    controls: np.ndarray  # (n_steps + 1, ..., n_u)


def default_scheme(calculus: Calculus) -> str:
    return MILSTEIN_ITO if calculus is Calculus.ITO else MILSTEIN_STRATONOVICH


def control_value(policy, t, x, control_dim: int) -> np.ndarray:
    """Evaluate the feedback policy, or a zero control when policy is None."""
    if policy is None:
        return np.zeros(np.shape(x)[:-1] + (control_dim,))
    return policy.control(t, x)


def milstein_terms(system: ControlledSystem, t, x, u) -> np.ndarray:
    """Per-channel Milstein term m_i = (1/2)(dg_i/dx) g_i, shape (..., n_xi, n_x)."""
    g = system.diffusion(t, x, u)
    gdx = system.diffusion_dx(t, x, u)
    return 0.5 * np.einsum("...iab,...bi->...ia", gdx, g)


def _fd_milstein_dx(system, t, x, u, h_rel=1e-6):
    """Central FD of the Milstein term w.r.t. x, shape (..., n_xi, n_x, n_x)."""
    x = np.asarray(x, dtype=float)
    n_x = system.state_dim
    cols = []
    for b in range(n_x):
        h = h_rel * np.maximum(1.0, np.abs(x[..., b]))
        xp = x.copy()
        xp[..., b] = x[..., b] + h
        xm = x.copy()
        xm[..., b] = x[..., b] - h
        diff = milstein_terms(system, t, xp, u) - milstein_terms(system, t, xm, u)
        cols.append(diff / (2.0 * h)[..., None, None])
    return np.stack(cols, axis=-1)


def _fd_milstein_du(system, t, x, u, h_rel=1e-6):
    u = np.asarray(u, dtype=float)
    cols = []
    for b in range(system.control_dim):
        h = h_rel * np.maximum(1.0, np.abs(u[..., b]))
        up = u.copy()
        up[..., b] = u[..., b] + h
        um = u.copy()
        um[..., b] = u[..., b] - h
        diff = milstein_terms(system, t, x, up) - milstein_terms(system, t, x, um)
        cols.append(diff / (2.0 * h)[..., None, None])
    if not cols:
        return np.zeros(np.shape(x)[:-1] + (system.noise_dim, system.state_dim, 0))
    return np.stack(cols, axis=-1)


def milstein_term_partials(system, t, x, u):
    """(dm/dx, dm/du), analytic when the system supplies them, FD otherwise."""
    mdx = (
        system.milstein_dx(t, x, u)
        if system.milstein_dx is not None
        else _fd_milstein_dx(system, t, x, u)
    )
    mdu = (
        system.milstein_du(t, x, u)
        if system.milstein_du is not None
        else _fd_milstein_du(system, t, x, u)
    )
    return mdx, mdu


def _require_diagonal_noise(system):
    if system.noise_dim > 1 and not system.commutative_noise:
        raise UnsupportedSchemeError(
            "Milstein schemes support scalar or diagonal/commutative noise only; "
            "declare commutative_noise=True or use Euler-Maruyama / Euler-Heun"
        )


def _check_scheme(system, scheme):
    if scheme not in _ALL_SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    wants_ito = scheme in _ITO_SCHEMES
    if wants_ito != (system.calculus is Calculus.ITO):
        raise ConfigurationError(
            f"scheme {scheme!r} is incompatible with {system.calculus.name} calculus"
        )
    if scheme in (MILSTEIN_ITO, MILSTEIN_STRATONOVICH):
        _require_diagonal_noise(system)


def step_control(system, control_fn, t, x, u, dt, dB, scheme):
    """One step of the chosen scheme with the control already evaluated at x.

    ``control_fn`` is only consulted by schemes that need coefficient values at
    auxiliary points (Euler-Heun corrector, derivative-free Stratonovich
    Milstein support point); it may be None for open-loop/no-control systems.
    """
    f = system.drift(t, x, u)
    g = system.diffusion(t, x, u)
    euler = x + f * dt + np.einsum("...xi,...i->...x", g, dB)
    if scheme == EULER_MARUYAMA:
        return euler
    if scheme == MILSTEIN_ITO:
        m = milstein_terms(system, t, x, u)
        w = np.asarray(dB) ** 2 - dt
        return euler + np.einsum("...ia,...i->...a", m, w)
    if scheme == MILSTEIN_STRATONOVICH:
        # Derivative-free Milstein: the correction is formed from diffusion
        # values at per-channel support points, re-evaluating the feedback
        # control there so closed-loop coefficients are differenced correctly.
        sq = np.sqrt(abs(dt)) * np.sign(dt) if dt < 0 else np.sqrt(dt)
        out = euler
        for i in range(system.noise_dim):
            support = x + f * dt + g[..., :, i] * sq
            u_sup = u if control_fn is None else control_fn(t, support)
            g_sup = system.diffusion(t, support, u_sup)
            corr = (g_sup[..., :, i] - g[..., :, i]) * (
                np.asarray(dB)[..., i] ** 2 / (2.0 * sq)
            )[..., None]
            out = out + corr
        return out
    if scheme == EULER_HEUN:
        predictor = euler
        u_bar = u if control_fn is None else control_fn(t, predictor)
        f_bar = system.drift(t, predictor, u_bar)
        g_bar = system.diffusion(t, predictor, u_bar)
        return (
            x
            + 0.5 * (f + f_bar) * dt
            + np.einsum("...xi,...i->...x", 0.5 * (g + g_bar), dB)
        )
    raise ConfigurationError(f"unknown scheme {scheme!r}")


def step_partials(system, t, x, u, dt, dB, scheme):
    """Step plus exact Jacobians of the discrete update map.

    Returns (x_next, Jx, Ju) where Jx = d x_next / dx at fixed u and
    Ju = d x_next / du.  Supported for the Ito schemes, which is what the
    gradient estimators integrate (Stratonovich systems are converted first).
    """
    if scheme not in _ITO_SCHEMES:
        raise UnsupportedSchemeError(
            f"step partials are available for Ito schemes only, not {scheme!r}"
        )
    dB = np.asarray(dB)
    f = system.drift(t, x, u)
    g = system.diffusion(t, x, u)
    fdx = system.drift_dx(t, x, u)
    fdu = system.drift_du(t, x, u)
    gdx = system.diffusion_dx(t, x, u)
    gdu = system.diffusion_du(t, x, u)
    x_next = x + f * dt + np.einsum("...xi,...i->...x", g, dB)
    eye = np.eye(system.state_dim)
    jx = eye + fdx * dt + np.einsum("...i,...iab->...ab", dB, gdx)
    ju = fdu * dt + np.einsum("...i,...iau->...au", dB, gdu)
    if scheme == MILSTEIN_ITO:
        _require_diagonal_noise(system)
        m = milstein_terms(system, t, x, u)
        mdx, mdu = milstein_term_partials(system, t, x, u)
        w = dB**2 - dt
        x_next = x_next + np.einsum("...ia,...i->...a", m, w)
        jx = jx + np.einsum("...i,...iab->...ab", w, mdx)
        ju = ju + np.einsum("...i,...iau->...au", w, mdu)
    return x_next, jx, ju


def euler_maruyama_step(system, policy, t, x, dt, dB):
    """Euler-Maruyama step x + f dt + g dB (Ito systems)."""
    if system.calculus is not Calculus.ITO:
        raise ConfigurationError("euler_maruyama_step requires an Ito system")
    u = control_value(policy, t, x, system.control_dim)
    out = step_control(system, None, t, x, u, dt, dB, EULER_MARUYAMA)
    _raise_if_divergent(out, step_index=None)
    return out


def milstein_step(system, policy, t, x, dt, dB, calculus=None):
    """Milstein step; the Ito variant weights the correction by (dB^2 - dt),
    the Stratonovich variant by dB^2 (realized derivative-free)."""
    calculus = calculus or system.calculus
    _require_diagonal_noise(system)
    u = control_value(policy, t, x, system.control_dim)
    control_fn = None
    if policy is not None:
        control_fn = lambda tt, xx: policy.control(tt, xx)  # noqa: E731
    scheme = MILSTEIN_ITO if calculus is Calculus.ITO else MILSTEIN_STRATONOVICH
    out = step_control(system, control_fn, t, x, u, dt, dB, scheme)
    _raise_if_divergent(out, step_index=None)
    return out


def _raise_if_divergent(x, step_index):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(
            f"non-finite state encountered at step {step_index}", step_index=step_index
        )


def _validate_dims(system, policy, x0):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != system.state_dim:
        raise ConfigurationError(
            f"initial state dimension {x0.shape[-1]} != state_dim {system.state_dim}"
        )
    if policy is not None and getattr(policy, "n_out", system.control_dim) != system.control_dim:
        raise ConfigurationError(
            f"policy output dim {policy.n_out} != control_dim {system.control_dim}"
        )
    return x0


def forward_states(system, policy, x0, increments, grid, scheme, check="raise"):
    """Integrate and return (states, controls) arrays over the whole grid.

    ``increments`` has shape (n_steps, ..., n_xi); batch axes broadcast against
    x0.  With check="raise" a non-finite state aborts with the step index;
    with check="none" NaNs propagate (batched callers mask afterwards).
    """
    x0 = _validate_dims(system, policy, x0)
    n = grid.n_steps
    control_fn = None
    if policy is not None:
        control_fn = lambda tt, xx: policy.control(tt, xx)  # noqa: E731
    dt = grid.dt
    u0 = control_value(policy, grid.time(0), x0, system.control_dim)
    batch = np.broadcast_shapes(x0.shape[:-1], np.shape(increments)[1:-1])
    states = np.zeros((n + 1,) + batch + (system.state_dim,))
    controls = np.zeros((n + 1,) + batch + (system.control_dim,))
    x = np.broadcast_to(x0, batch + (system.state_dim,)).copy()
    states[0] = x
    controls[0] = u0
    u = u0
    with np.errstate(all="ignore"):
        for k in range(n):
            t = grid.time(k)
            x = step_control(system, control_fn, t, x, u, dt, increments[k], scheme)
            if check == "raise":
                _raise_if_divergent(x, step_index=k)
            states[k + 1] = x
            u = control_value(policy, grid.time(k + 1), x, system.control_dim)
            controls[k + 1] = u
    return states, controls


def integrate(system, policy, x0, path: WienerPath, scheme=None) -> Trajectory:
    """Full forward trajectory on the path's grid; controls are recorded at
    every grid point."""
    scheme = scheme or default_scheme(system.calculus)
    _check_scheme(system, scheme)
    if path.dims != system.noise_dim:
        raise ConfigurationError(
            f"path has {path.dims} noise dims, system expects {system.noise_dim}"
        )
    states, controls = forward_states(
        system, policy, x0, path.increments, path.grid, scheme
    )
    return Trajectory(grid=path.grid, states=states, controls=controls)


def integrate_backward(
    system, policy, xT, backward_path: BackwardWienerPath, scheme=None
) -> Trajectory:
    """Integrate the inverse flow from xT back to t_start.

    Ito systems are converted to Stratonovich form first; each reverse step
    applies the Stratonovich scheme with negated (dt, dB), consuming the stored
    forward increments in reverse order.  Returned states are in forward time
    order (states[-1] == xT).
    """
    if system.calculus is Calculus.ITO:
        system = convert_calculus(system)
    scheme = scheme or MILSTEIN_STRATONOVICH
    if scheme not in _STRAT_SCHEMES:
        raise ConfigurationError(
            f"integrate_backward requires a Stratonovich scheme, got {scheme!r}"
        )
    if scheme == MILSTEIN_STRATONOVICH:
        _require_diagonal_noise(system)
    grid = backward_path.grid
    xT = _validate_dims(system, policy, xT)
    control_fn = None
    if policy is not None:
        control_fn = lambda tt, xx: policy.control(tt, xx)  # noqa: E731
    n = grid.n_steps
    batch = xT.shape[:-1]
    states = np.zeros((n + 1,) + batch + (system.state_dim,))
    controls = np.zeros((n + 1,) + batch + (system.control_dim,))
    x = xT.copy()
    states[n] = x
    u = control_value(policy, grid.time(n), x, system.control_dim)
    controls[n] = u
    dt = grid.dt
    with np.errstate(all="ignore"):
        for k in range(n, 0, -1):
            t = grid.time(k)
            dB = backward_path.increments[k - 1]
            x = step_control(system, control_fn, t, x, u, -dt, -np.asarray(dB), scheme)
            _raise_if_divergent(x, step_index=k - 1)
            states[k - 1] = x
            u = control_value(policy, grid.time(k - 1), x, system.control_dim)
            controls[k - 1] = u
    return Trajectory(grid=grid, states=states, controls=controls)


def convert_calculus(system: ControlledSystem) -> ControlledSystem:
    """Equivalent system under the opposite calculus.

    Ito -> Stratonovich subtracts the correction sum_i m_i from the drift;
    Stratonovich -> Ito adds it back.  Partials of the correction come from
    the analytic Milstein partials when supplied, otherwise from central
    finite differences; the diffusion and its partials are unchanged.
    """
    sign = -1.0 if system.calculus is Calculus.ITO else 1.0
    base_drift = system.drift
    base_dx = system.drift_dx
    base_du = system.drift_du
    src = system

    def drift(t, x, u):
        return base_drift(t, x, u) + sign * milstein_terms(src, t, x, u).sum(axis=-2)

    def drift_dx(t, x, u):
        mdx, _ = milstein_term_partials(src, t, x, u)
        return base_dx(t, x, u) + sign * mdx.sum(axis=-3)

    def drift_du(t, x, u):
        _, mdu = milstein_term_partials(src, t, x, u)
        return base_du(t, x, u) + sign * mdu.sum(axis=-3)

    return replace(
        system,
        drift=drift,
        drift_dx=drift_dx,
        drift_du=drift_du,
        calculus=(
            Calculus.STRATONOVICH if system.calculus is Calculus.ITO else Calculus.ITO
        ),
    )


def self_check_partials(system, n_points=100, seed=0, tol=1e-5, sampler=None):
    """Compare analytic partials against central finite differences.

    Returns the worst relative error over sampled (t, x, u) points; raises
    ConfigurationError when it exceeds `tol`.  `sampler(rng)` may supply
    domain-appropriate points; the default samples standard normals.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    worst = 0.0

    def rel_err(analytic, fd):
        denom = np.maximum(1.0, np.abs(analytic))
        return float(np.max(np.abs(analytic - fd) / denom)) if analytic.size else 0.0

    for _ in range(n_points):
        if sampler is not None:
            t, x, u = sampler(rng)
        else:
            t = float(rng.uniform(0.0, 1.0))
            x = rng.standard_normal(system.state_dim)
            u = rng.standard_normal(system.control_dim)

        def fd_jac(fun, z, out_shape):
            if z.size == 0:
                return np.zeros(out_shape)
            cols = []
            for b in range(z.size):
                h = 1e-6 * max(1.0, abs(z[b]))
                zp = z.copy()
                zp[b] += h
                zm = z.copy()
                zm[b] -= h
                cols.append((fun(zp) - fun(zm)) / (2 * h))
            return np.stack(cols, axis=-1).reshape(out_shape)

        n_x, n_u, n_xi = system.state_dim, system.control_dim, system.noise_dim
        worst = max(
            worst,
            rel_err(
                np.asarray(system.drift_dx(t, x, u)),
                fd_jac(lambda z: system.drift(t, z, u), x, (n_x, n_x)),
            ),
            rel_err(
                np.asarray(system.drift_du(t, x, u)),
                fd_jac(lambda z: system.drift(t, x, z), u, (n_x, n_u)),
            ),
            rel_err(
                np.asarray(system.diffusion_dx(t, x, u)),
                np.moveaxis(
                    fd_jac(lambda z: system.diffusion(t, z, u), x, (n_x, n_xi, n_x)), 1, 0
                ),
            ),
            rel_err(
                np.asarray(system.diffusion_du(t, x, u)),
                np.moveaxis(
                    fd_jac(lambda z: system.diffusion(t, x, z), u, (n_x, n_xi, n_u)), 1, 0
                ),
            ),
        )
        if system.milstein_dx is not None:
            worst = max(
                worst,
                rel_err(
                    np.asarray(system.milstein_dx(t, x, u)),
                    _fd_milstein_dx(system, t, x, u),
                ),
            )
        if system.milstein_du is not None and n_u:
            worst = max(
                worst,
                rel_err(
                    np.asarray(system.milstein_du(t, x, u)),
                    _fd_milstein_du(system, t, x, u),
                ),
            )
    if worst > tol:
        raise ConfigurationError(
            f"analytic partials disagree with finite differences: {worst:.3e} > {tol:.1e}"
        )
    return worst


def dump_trajectory_csv(traj: Trajectory, fileobj, state_names=None, control_names=None):
    """Write `t, x_1.., u_1..` rows at 17 significant digits."""
    n_x = traj.states.shape[-1]
    n_u = traj.controls.shape[-1]
    state_names = state_names or [f"x_{i + 1}" for i in range(n_x)]
    control_names = control_names or [f"u_{i + 1}" for i in range(n_u)]
    fileobj.write("t," + ",".join(state_names + control_names) + "\n")
    for t, x, u in zip(traj.grid.times(), traj.states, traj.controls):
        fileobj.write(",".join(f"{v:.17g}" for v in (t, *x, *u)) + "\n")
