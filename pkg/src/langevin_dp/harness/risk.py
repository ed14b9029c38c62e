"""Excess risk, uniform stability, and non-convergence measurements."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from ..diffusion import GibbsGrid, Trajectory
from ..errors import ConvergenceError, ValidationError
from ..model import ConstraintSet, Dataset, EmpiricalLoss, LossModel


def solve_constrained_minimizer(
    empirical_loss: EmpiricalLoss,
    constraint: ConstraintSet,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    theta0=None,
) -> np.ndarray:
    """Accelerated projected gradient (FISTA) until the gradient mapping is below ``tol``.

    Needs a smoothness constant on the loss; nonsmooth losses have no
    gradient-mapping certificate and are rejected.
    """
    M = empirical_loss.smoothness
    if M is None or not M > 0:
        raise ValidationError("numeric minimization needs a smooth loss (declared M)")
    step = 1.0 / M
    x = constraint.project(constraint.center() if theta0 is None else np.asarray(theta0, float))
    y, t = x, 1.0
    for _ in range(max_iter):
        x_new = constraint.project(y - step * empirical_loss.gradient(y))
        mapping = np.linalg.norm(
            (x_new - constraint.project(x_new - step * empirical_loss.gradient(x_new))) / step
        )
        if mapping <= tol:
            return x_new
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        y = x_new + ((t - 1) / t_new) * (x_new - x)
        x, t = x_new, t_new
    raise ConvergenceError(f"projected gradient did not reach gradient-mapping norm {tol}")


def constrained_minimizer(
    empirical_loss: EmpiricalLoss, constraint: ConstraintSet, minimizer_hint=None
) -> np.ndarray:
    if minimizer_hint is not None:
        return np.asarray(minimizer_hint, dtype=float)
    exact = empirical_loss.exact_minimizer(constraint)
    if exact is not None:
        return exact
    return solve_constrained_minimizer(empirical_loss, constraint)


def excess_empirical_risk(
    theta, empirical_loss: EmpiricalLoss, constraint: ConstraintSet, minimizer_hint=None
) -> float:
    """``L(theta; D) - min_C L(.; D)``."""
    th_star = constrained_minimizer(empirical_loss, constraint, minimizer_hint)
    return float(empirical_loss.value(theta) - empirical_loss.value(th_star))


class Estimate(NamedTuple):
    estimate: float
    std_error: float


def excess_population_risk(
    theta,
    loss: LossModel,
    distribution_sampler: Callable[[np.random.Generator, int], np.ndarray],
    holdout_m: int = 10_000,
    minimizer_hint=None,
    seed: int = 0,
    constraint: Optional[ConstraintSet] = None,
) -> Estimate:
    """Monte-Carlo excess population risk with a paired-difference standard error.

    The population minimizer is ``minimizer_hint`` when given, otherwise a numeric
    solve on a separate sample of ``10 * holdout_m`` records (needs ``constraint``).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if minimizer_hint is None:
        if constraint is None:
            raise ValidationError("a constraint set is needed to solve for the population minimizer")
        big = EmpiricalLoss(loss, Dataset(distribution_sampler(rng, 10 * holdout_m)))
        minimizer_hint = constrained_minimizer(big, constraint)
    recs = distribution_sampler(rng, holdout_m)
    th = np.asarray(theta, dtype=float)
    diff = loss.per_example_value(th, recs) - loss.per_example_value(
        np.asarray(minimizer_hint, dtype=float), recs
    )
    return Estimate(float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(holdout_m)))


@dataclass
class StabilityEstimate:
    gap: float
    std_error: float
    probe_index: int
    per_probe: np.ndarray


def measure_uniform_stability(
    mechanism_closure: Callable[[Dataset, int], np.ndarray],
    loss: LossModel,
    dataset: Dataset,
    probe_records: Sequence,
    trials: int,
    seed: int,
    replacement=None,
) -> StabilityEstimate:
    """Estimate ``max_d |E l(M(D), d) - E l(M(D'), d)|`` over probe records.

    ``D'`` replaces record 0 by ``replacement`` (default: the record's
    reflection through the origin, which is maximally far for symmetric
    domains). Trial ``t`` calls the mechanism with the same seed on ``D`` and
    ``D'`` so the two outputs share their randomness.
    """
    probes = np.atleast_2d(np.asarray(probe_records, dtype=float))
    if probes.shape[0] == 0:
        raise ValidationError("probe_records must be nonempty")
    if trials < 2:
        raise ValidationError("need at least two trials for a standard error")
    if replacement is None:
        replacement = -dataset.points[0]
    d2 = dataset.neighbor(0, replacement)
    ss = np.random.SeedSequence(seed)
    trial_seeds = ss.generate_state(trials, np.uint64)
    diffs = np.empty((trials, probes.shape[0]))
    for t, s in enumerate(trial_seeds):
        a = np.asarray(mechanism_closure(dataset, int(s)), dtype=float)
        b = np.asarray(mechanism_closure(d2, int(s)), dtype=float)
        diffs[t] = loss.per_example_value(a, probes) - loss.per_example_value(b, probes)
    means = diffs.mean(axis=0)
    ses = diffs.std(axis=0, ddof=1) / math.sqrt(trials)
    j = int(np.argmax(np.abs(means)))
    return StabilityEstimate(float(abs(means[j])), float(ses[j]), j, means)


@dataclass
class NonConvergenceRecord:
    path_length: float
    net_displacement: float
    stationary_mass: Optional[float]
    note: str = ""


def nonconvergence_diagnostic(
    trajectory: Trajectory,
    constraint: ConstraintSet,
    beta: float,
    empirical_loss: Optional[EmpiricalLoss] = None,
    grid_points: int = 512,
) -> NonConvergenceRecord:
    """Path length, net displacement, and stationary mass of ``Ball(theta_0, displacement)``.

    The mass is the probability under ``exp(-beta L)`` on the set, by grid
    integration; it is only available in dimension <= 2 with a loss supplied.
    """
    th = np.asarray(trajectory.thetas)
    steps = np.diff(th, axis=0)
    path = float(np.linalg.norm(steps, axis=1).sum()) if len(steps) else 0.0
    net = float(np.linalg.norm(th[-1] - th[0]))
    if th.shape[1] > 2:
        return NonConvergenceRecord(path, net, None, "stationary mass unavailable for dimension > 2")
    if empirical_loss is None:
        return NonConvergenceRecord(path, net, None, "stationary mass needs the empirical loss")
    grid = GibbsGrid(empirical_loss, constraint, beta, grid_points)
    inside = np.linalg.norm(grid.centers - th[0], axis=1) <= net
    mass = float(np.clip(grid.prob[inside].sum(), 0.0, 1.0))
    return NonConvergenceRecord(path, net, mass)
