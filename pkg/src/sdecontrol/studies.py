"""Numerical verification studies: strong-convergence orders against the
closed-form GBM solution, the Ito/Stratonovich scheme equivalence gap, and
inverse-flow reversibility.  Shared by the CLI and the test suite.

All studies reuse one fine Brownian path per seed, coarsened by summing
adjacent increments, so errors at every resolution are driven by the same
noise realization.
"""

from __future__ import annotations

import numpy as np

from .benchmarks import gbm_exact_path, gbm_system
from .sdecore import (
    EULER_MARUYAMA,
    MILSTEIN_ITO,
    MILSTEIN_STRATONOVICH,
    convert_calculus,
    integrate,
    integrate_backward,
)
from .wiener import TimeGrid, coarsen_path, generate_path, reverse_path

__all__ = [
    "fit_order",
    "strong_convergence_study",
    "calculus_equivalence_study",
    "reversibility_study",
    "write_convergence_csv",
]


def fit_order(n_steps_list, errors) -> float:
    """Least-squares slope of log(error) against log(step size)."""
    h = np.log(1.0 / np.asarray(n_steps_list, dtype=float))
    e = np.log(np.asarray(errors, dtype=float))
    slope, _ = np.polyfit(h, e, 1)
    return float(slope)


def _fine_grid(t_end, max_exp):
    return TimeGrid(0.0, t_end, 2**max_exp)


def strong_convergence_study(
    mu=0.23,
    sigma=0.18,
    x0=1.0,
    t_end=1.0,
    min_exp=4,
    max_exp=10,
    n_paths=200,
    seed=0,
    schemes=(EULER_MARUYAMA, MILSTEIN_ITO),
):
    """Median endpoint error vs the exact GBM solution, per scheme and level.

    Returns {scheme: {"n_steps": [...], "median_error": [...], "order": p}}.
    """
    system = gbm_system(mu=mu, sigma=sigma)
    fine = _fine_grid(t_end, max_exp)
    levels = list(range(min_exp, max_exp + 1))
    errors = {s: np.zeros((len(levels), n_paths)) for s in schemes}
    x0v = np.array([float(x0)])
    for p in range(n_paths):
        fine_path = generate_path(seed + p, fine, 1)
        b_total = float(fine_path.increments.sum())
        exact_end = gbm_exact_path(x0, mu, sigma, [0.0, t_end], [0.0, b_total])[-1]
        for li, exp in enumerate(levels):
            path = coarsen_path(fine_path, 2 ** (max_exp - exp))
            for scheme in schemes:
                traj = integrate(system, None, x0v, path, scheme)
                errors[scheme][li, p] = abs(float(traj.states[-1, 0]) - exact_end)
    out = {}
    for scheme in schemes:
        med = np.median(errors[scheme], axis=1)
        out[scheme] = {
            "n_steps": [2**e for e in levels],
            "median_error": med.tolist(),
            "order": fit_order([2**e for e in levels], med),
        }
    return out


def calculus_equivalence_study(
    mu=0.23,
    sigma=0.18,
    x0=1.0,
    t_end=1.0,
    min_exp=4,
    n_halvings=4,
    n_paths=50,
    seed=0,
):
    """Median endpoint gap between the Ito system under Ito-Milstein and its
    Stratonovich conversion under (derivative-free) Stratonovich-Milstein.

    Returns (n_steps_list, median_gaps); the gap should shrink with the step.
    """
    ito = gbm_system(mu=mu, sigma=sigma)
    strat = convert_calculus(ito)
    max_exp = min_exp + n_halvings
    fine = _fine_grid(t_end, max_exp)
    levels = list(range(min_exp, max_exp + 1))
    gaps = np.zeros((len(levels), n_paths))
    x0v = np.array([float(x0)])
    for p in range(n_paths):
        fine_path = generate_path(seed + p, fine, 1)
        for li, exp in enumerate(levels):
            path = coarsen_path(fine_path, 2 ** (max_exp - exp))
            end_i = integrate(ito, None, x0v, path, MILSTEIN_ITO).states[-1, 0]
            end_s = integrate(strat, None, x0v, path, MILSTEIN_STRATONOVICH).states[-1, 0]
            gaps[li, p] = abs(float(end_i) - float(end_s))
    return [2**e for e in levels], np.median(gaps, axis=1).tolist()


def reversibility_study(
    mu=0.23,
    sigma=0.18,
    x0=1.0,
    t_end=1.0,
    min_exp=4,
    n_halvings=4,
    n_paths=100,
    seed=0,
):
    """Median round-trip error of the inverse flow: integrate forward, then
    integrate the backward system over the reversed increments, compare with
    the initial state.  Returns (n_steps_list, median_errors)."""
    system = gbm_system(mu=mu, sigma=sigma)
    max_exp = min_exp + n_halvings
    fine = _fine_grid(t_end, max_exp)
    levels = list(range(min_exp, max_exp + 1))
    errs = np.zeros((len(levels), n_paths))
    x0v = np.array([float(x0)])
    for p in range(n_paths):
        fine_path = generate_path(seed + p, fine, 1)
        for li, exp in enumerate(levels):
            path = coarsen_path(fine_path, 2 ** (max_exp - exp))
            fwd = integrate(system, None, x0v, path, MILSTEIN_ITO)
            back = integrate_backward(system, None, fwd.states[-1], reverse_path(path))
            errs[li, p] = float(np.linalg.norm(back.states[0] - x0v))
    return [2**e for e in levels], np.median(errs, axis=1).tolist()


def write_convergence_csv(study, fileobj):
    """Rows (n_steps, scheme, median_error) from a strong-convergence study."""
    fileobj.write("n_steps,scheme,median_error\n")
    for scheme in sorted(study):
        res = study[scheme]
        for n, err in zip(res["n_steps"], res["median_error"]):
            fileobj.write(f"{n},{scheme},{err:.17g}\n")
