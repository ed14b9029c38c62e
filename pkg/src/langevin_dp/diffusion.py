"""Discretized projected Langevin chains, their private output rules, and Gibbs samplers.

Each chain ``j`` of a run seeded with ``seed`` draws its Gaussian increments from
its own counter-based generator (Philox keyed by ``(seed, j)``), so a chain's
path does not depend on how many chains run alongside it. A single chain
(``run_pld``) is chain 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import accountant
from .errors import NumericalError, ValidationError
from .model import (
    ConstantSchedule,
    ConstraintSet,
    EmpiricalLoss,
    PowerSchedule,
    TemperatureSchedule,
)

# Per-step drift is kept below this fraction of the per-step noise displacement
# for nonsmooth losses, and eta * beta * M below SMOOTH_RESOLUTION for smooth ones.
DRIFT_RESOLUTION = 0.25
SMOOTH_RESOLUTION = 0.05
MAX_DEFAULT_STEPS = 2_000_000


def chain_generator(seed: int, chain: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chain,))))


def schedule_beta_max(schedule: TemperatureSchedule, T: float) -> float:
    if isinstance(schedule, ConstantSchedule):
        return schedule.beta
    return float(schedule.beta_at(T))


def default_steps(
    T: float,
    p: int,
    beta_max: Optional[float] = None,
    lipschitz_L: Optional[float] = None,
    smoothness_M: Optional[float] = None,
) -> int:
    """Default discretization: ``max(1000, ceil(100 T p))`` refined by a drift-resolution rule.

    For smooth losses the rule enforces ``eta * beta_max * M <= 0.05``; otherwise
    the per-step drift ``eta beta L`` is capped at a quarter of the per-step
    noise scale ``sqrt(2 eta p)``.
    """
    steps = max(1000, math.ceil(100.0 * T * p))
    if beta_max is not None and beta_max > 0:
        if smoothness_M is not None:
            steps = max(steps, math.ceil(T * beta_max * smoothness_M / SMOOTH_RESOLUTION))
        elif lipschitz_L is not None and lipschitz_L > 0:
            need = T * (beta_max * lipschitz_L) ** 2 / (2.0 * p * DRIFT_RESOLUTION**2)
            steps = max(steps, math.ceil(need))
    return int(min(steps, MAX_DEFAULT_STEPS))


def steps_for(empirical_loss: EmpiricalLoss, schedule: TemperatureSchedule, T: float) -> int:
    return default_steps(
        T,
        empirical_loss.p,
        schedule_beta_max(schedule, T),
        empirical_loss.lipschitz_L,
        empirical_loss.smoothness,
    )


@dataclass(frozen=True)
class DiffusionConfig:
    schedule: TemperatureSchedule
    horizon_T: float
    steps: int
    seed: int
    theta0: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (self.horizon_T >= 0 and math.isfinite(self.horizon_T)):
            raise ValidationError("horizon_T must be finite and nonnegative")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValidationError("steps must be a nonnegative integer")
        if self.steps == 0 and self.horizon_T > 0:
            raise ValidationError("a positive horizon needs at least one step")

    @property
    def eta(self) -> float:
        return self.horizon_T / self.steps if self.steps else 0.0


@dataclass
class Trajectory:
    thetas: np.ndarray  # (steps + 1, p), includes theta_0
    times: np.ndarray
    schedule: TemperatureSchedule
    step: float
    seed: int

    @property
    def final(self) -> np.ndarray:
        return self.thetas[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time"] + [f"theta_{i}" for i in range(self.thetas.shape[1])])
            for k, (t, th) in enumerate(zip(self.times, self.thetas)):
                w.writerow([k, repr(float(t))] + [repr(float(x)) for x in th])


@dataclass
class ChainBatch:
    final: np.ndarray  # (count, p)
    path: Optional[np.ndarray] = None  # (steps + 1, count, p)
    weighted: Optional[np.ndarray] = None  # (count, p)


def _start(constraint, theta0, count, p):
    if theta0 is None:
        theta0 = constraint.center()
    th = np.broadcast_to(np.asarray(theta0, dtype=float), (count, p)).copy()
    if not np.all(constraint.contains(th)):
        raise ValidationError("theta0 must lie in the constraint set")
    return th


def simulate_chains(
    empirical_loss: EmpiricalLoss,
    constraint: ConstraintSet,
    config: DiffusionConfig,
    count: int,
    theta0=None,
    record_path: bool = False,
    weights: Optional[np.ndarray] = None,
    noise_scale: float = 1.0,
    first_chain: int = 0,
) -> ChainBatch:
    """Run ``count`` independent projected Langevin chains in lockstep.

    ``weights`` (length ``steps``) accumulates ``sum_k w_k theta_k`` over the
    pre-update iterates. ``noise_scale=0`` removes the Brownian increments,
    leaving projected gradient descent.
    """
    p = empirical_loss.p
    if constraint.dim != p:
        raise ValidationError(f"constraint dimension {constraint.dim} does not match p={p}")
    if count < 1:
        raise ValidationError("count must be positive")
    K = int(config.steps)
    eta = config.eta
    theta = _start(constraint, config.theta0 if theta0 is None else theta0, count, p)
    times = np.arange(K + 1) * eta
    if K:
        times[-1] = config.horizon_T
    drift = np.asarray(config.schedule.segment_integral(times[:-1], times[1:]), dtype=float)
    if weights is not None and len(weights) != K:
        raise ValidationError("weights must have one entry per step")

    gens = [chain_generator(config.seed, first_chain + j) for j in range(count)]
    sd = math.sqrt(2.0 * eta) * noise_scale
    block = int(max(1, min(256, (1 << 21) // max(1, count * p))))
    path = np.empty((K + 1, count, p)) if record_path else None
    if path is not None:
        path[0] = theta
    acc = np.zeros((count, p)) if weights is not None else None

    k = 0
    while k < K:
        b = min(block, K - k)
        if sd > 0:
            noise = np.stack([g.standard_normal((b, p)) for g in gens], axis=1) * sd
        else:
            noise = None
        for i in range(b):
            if acc is not None:
                acc += weights[k] * theta
            grad = empirical_loss.gradient(theta)
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite gradient at step {k}")
            step = theta - drift[k] * grad
            if noise is not None:
                step = step + noise[i]
            theta = constraint.project(step)
            k += 1
            if path is not None:
                path[k] = theta
    return ChainBatch(final=theta, path=path, weighted=acc)


def run_pld(
    empirical_loss: EmpiricalLoss,
    constraint: ConstraintSet,
    config: DiffusionConfig,
    noise_scale: float = 1.0,
) -> Trajectory:
    """Projected Langevin chain with exact per-segment drift integrals."""
    batch = simulate_chains(
        empirical_loss, constraint, config, 1, record_path=True, noise_scale=noise_scale
    )
    times = np.arange(config.steps + 1) * config.eta
    if config.steps:
        times[-1] = config.horizon_T
    return Trajectory(batch.path[:, 0, :], times, config.schedule, config.eta, config.seed)


# --------------------------------------------------------------------------
# Private output rules
# --------------------------------------------------------------------------


@dataclass
class DiffusionRelease:
    """A private diffusion output with the realized calibration."""

    theta_priv: np.ndarray
    eps: float
    delta: float
    schedule: TemperatureSchedule
    horizon_T: float
    steps: int
    seed: int
    certified_eps: float
    alpha_star: float
    extra: dict = field(default_factory=dict)

    def privacy_curve(self, delta_grad: float) -> accountant.RenyiCurve:
        return accountant.rdp_finite_time(delta_grad, self.schedule, self.horizon_T)


def _check_eps_delta(eps, delta):
    if not eps > 0:
        raise ValidationError("eps must be positive")
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")


def calibrate_constant_beta(eps: float, delta: float, L: float, n: int, T: float) -> float:
    """``beta = eps n / (L sqrt(8 T log(1/delta)))``."""
    _check_eps_delta(eps, delta)
    if not (L > 0 and T > 0 and n > 0):
        raise ValidationError("L, T and n must be positive")
    return eps * n / (L * math.sqrt(8.0 * T * math.log(1.0 / delta)))


def calibrate_convex(eps, delta, L, n, diameter, p) -> tuple[float, float]:
    """``(beta, T)`` for the constant-temperature last iterate on convex losses."""
    _check_eps_delta(eps, delta)
    if 2.0 * math.log(1.0 / delta) / eps < 1.0:
        raise ValidationError(
            "requires 2 log(1/delta) / eps >= 1 so that the chosen Renyi order exceeds 2"
        )
    T = diameter**2 / (2.0 * p)
    return calibrate_constant_beta(eps, delta, L, n, T), T


def _certify(delta_grad, schedule, T, delta):
    curve = accountant.rdp_finite_time(delta_grad, schedule, T)
    return accountant.rdp_to_approx_dp(curve, delta)


def _release(empirical_loss, constraint, schedule, T, steps, seed, eps, delta, theta0, extra):
    if steps is None:
        steps = steps_for(empirical_loss, schedule, T)
    cfg = DiffusionConfig(schedule, T, steps, seed, theta0)
    batch = simulate_chains(empirical_loss, constraint, cfg, 1)
    cert = _certify(empirical_loss.gradient_sensitivity, schedule, T, delta)
    return DiffusionRelease(
        batch.final[0], eps, delta, schedule, T, steps, seed, cert.eps, cert.alpha, extra
    )


def convex_last_iterate(
    empirical_loss: EmpiricalLoss,
    constraint: ConstraintSet,
    eps: float,
    delta: float,
    seed: int,
    steps: Optional[int] = None,
    theta0=None,
) -> DiffusionRelease:
    """Constant-temperature chain for ``T = ||C||^2 / (2p)``; releases the last iterate."""
    beta, T = calibrate_convex(
        eps, delta, empirical_loss.lipschitz_L, empirical_loss.n, constraint.diameter, empirical_loss.p
    )
    return _release(
        empirical_loss, constraint, ConstantSchedule(beta), T, steps, seed, eps, delta, theta0,
        {"beta": beta},
    )


@dataclass(frozen=True)
class ScCalibration:
    a: float
    T: float
    c: float
    R: float
    eps_calibrated: float


def _sc_fixed_point(Q, logR1, m):
    """Solve ``T = g(T)`` where the logarithm base in ``a`` is ``max{2, T}``."""

    def g(T):
        a = math.log(Q) / math.log(max(2.0, T)) - 0.5
        return (logR1 * (a + 1.0) / (m * Q)) ** 2, a

    g2, a2 = g(2.0)
    if g2 <= 2.0:
        return g2, a2
    lo, hi = 2.0, 4.0
    while hi - g(hi)[0] < 0:
        lo, hi = hi, 2 * hi
        if hi > 1e300:
            raise NumericalError("weighted-average horizon equation has no finite root")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid - g(mid)[0] < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * hi:
            break
    return hi, g(hi)[1]


def calibrate_sc_weighted(eps, delta, L, n, m, p, phi0, exact_accounting: bool = False) -> ScCalibration:
    """Power-law schedule ``beta_t = t^a`` and horizon for the weighted-average output.

    The closed form treats the Renyi order as ``2 log(1/delta) / eps`` and so
    can overshoot the budget by up to ``eps^2 / (4 log(1/delta))`` when ``a``
    is near 0. With ``exact_accounting`` the budget fed to the closed form is
    shrunk so that even that worst case converts to exactly ``eps``.
    """
    _check_eps_delta(eps, delta)
    if not (m > 0 and L > 0 and n > 0 and p > 0 and phi0 >= 0):
        raise ValidationError("m, L, n, p must be positive and phi0 nonnegative")
    lg = math.log(1.0 / delta)
    e = eps
    if exact_accounting:
        c_star = (math.sqrt(lg + eps) - math.sqrt(lg)) ** 2
        e = 2.0 * math.sqrt(lg * c_star) * (1.0 - 1e-9)
    Q = e * n / (2.0 * L * math.sqrt(lg))
    if not Q > 1.0:
        raise ValidationError("eps n / (2 L sqrt(log(1/delta))) must exceed 1 for a >= 0")
    R = m**2 * e**2 * n**2 * p * phi0 / (2.0 * L**2 * lg)
    T, a = _sc_fixed_point(Q, math.log1p(R), m)
    if a < 0:
        raise ValidationError(f"calibrated exponent a={a:.4g} is negative; increase n or eps")
    c = m * Q / (a + 1.0)
    return ScCalibration(a=a, T=T, c=c, R=R, eps_calibrated=e)


def log_average_weights(schedule: PowerSchedule, m: float, times: np.ndarray) -> np.ndarray:
    """Log of ``(e^{m B_{t_{k+1}}} - e^{m B_{t_k}}) / (e^{m B_T} - 1)`` for each step ``k``."""
    B = schedule.cumulative(times)
    mB = m * B
    dB = m * np.diff(B)
    with np.errstate(divide="ignore"):
        num = mB[1:] + np.log(-np.expm1(-dB))
        den = mB[-1] + math.log(-math.expm1(-mB[-1]))
    return num - den


def average_weights(schedule: PowerSchedule, m: float, times: np.ndarray) -> np.ndarray:
    return np.exp(log_average_weights(schedule, m, times))


def sc_weighted_average(
    empirical_loss: EmpiricalLoss,
    constraint: ConstraintSet,
    m: float,
    eps: float,
    delta: float,
    seed: int,
    steps: Optional[int] = None,
    theta0=None,
    phi0: Optional[float] = None,
) -> DiffusionRelease:
    """Power-law schedule with the exponentially weighted trajectory average.

    ``m`` is half the strong convexity of the empirical loss (the weights are
    ``e^{m B_t}`` for a ``2m``-strongly convex loss). ``phi0`` bounds
    ``||theta_0 - theta*||^2`` and defaults to the squared diameter, which is
    data independent.
    """
    if not m > 0:
        raise ValidationError("m must be positive")
    if phi0 is None:
        phi0 = constraint.diameter**2
    args = (eps, delta, empirical_loss.lipschitz_L, empirical_loss.n, m, empirical_loss.p, phi0)
    cal = calibrate_sc_weighted(*args)
    delta_grad = empirical_loss.gradient_sensitivity
    if _certify(delta_grad, PowerSchedule(cal.a), cal.T, delta).eps > eps:
        cal = calibrate_sc_weighted(*args, exact_accounting=True)
    schedule = PowerSchedule(cal.a)
    T = cal.T
    if steps is None:
        steps = steps_for(empirical_loss, schedule, T)
    cfg = DiffusionConfig(schedule, T, steps, seed, theta0)
    times = np.arange(steps + 1) * cfg.eta
    times[-1] = T
    w = average_weights(schedule, m, times)
    batch = simulate_chains(empirical_loss, constraint, cfg, 1, weights=w)
    cert = _certify(delta_grad, schedule, T, delta)
    if cert.eps > eps * (1 + 1e-9):
        raise NumericalError(f"certified eps {cert.eps} exceeds the budget {eps}")
    return DiffusionRelease(
        batch.weighted[0], eps, delta, schedule, T, steps, seed, cert.eps, cert.alpha,
        {"a": cal.a, "c": cal.c, "R": cal.R, "m": m, "eps_calibrated": cal.eps_calibrated},
    )


def calibrate_smooth_sc(eps, delta, L, n, m, p, lambda_const) -> tuple[float, float]:
    """``(beta, T)`` with ``T = 2 lam log(1/delta) L^2 log^2 R / (m^2 eps^2 n^2)``.

    ``R = eps^2 n^2 / (p log(1/delta))``.
    """
    _check_eps_delta(eps, delta)
    if not (m > 0 and lambda_const > 0):
        raise ValidationError("m and lambda_const must be positive")
    lg = math.log(1.0 / delta)
    R = eps**2 * n**2 / (p * lg)
    if not R > 1:
        raise ValidationError("eps^2 n^2 / (p log(1/delta)) must exceed 1")
    T = 2.0 * lambda_const * lg * L**2 * math.log(R) ** 2 / (m**2 * eps**2 * n**2)
    return calibrate_constant_beta(eps, delta, L, n, T), T


def smooth_sc_last_iterate(
    empirical_loss: EmpiricalLoss,
    constraint: ConstraintSet,
    m: float,
    M: float,
    eps: float,
    delta: float,
    lambda_const: float,
    seed: int,
    steps: Optional[int] = None,
    theta0=None,
) -> DiffusionRelease:
    """Constant-temperature last iterate for smooth, strongly convex losses."""
    if M is None or not M > 0:
        raise ValidationError("a positive smoothness constant M is required")
    if M < m:
        raise ValidationError("need m <= M")
    beta, T = calibrate_smooth_sc(
        eps, delta, empirical_loss.lipschitz_L, empirical_loss.n, m, empirical_loss.p, lambda_const
    )
    return _release(
        empirical_loss, constraint, ConstantSchedule(beta), T, steps, seed, eps, delta, theta0,
        {"beta": beta, "m": m, "M": M, "lambda": lambda_const},
    )


# --------------------------------------------------------------------------
# Gibbs sampling
# --------------------------------------------------------------------------


def gibbs_sample_langevin(
    empirical_loss: EmpiricalLoss,
    constraint: ConstraintSet,
    beta: float,
    burn_in_T: float,
    steps: Optional[int],
    count: int,
    seed: int,
    theta0=None,
) -> np.ndarray:
    """Approximate draws from ``exp(-beta L)`` on the set: final iterates of independent chains."""
    if not beta >= 0:
        raise ValidationError("beta must be nonnegative")
    schedule = ConstantSchedule(beta)
    if steps is None:
        steps = steps_for(empirical_loss, schedule, burn_in_T)
    cfg = DiffusionConfig(schedule, burn_in_T, steps, seed, theta0)
    return simulate_chains(empirical_loss, constraint, cfg, count).final


class GibbsGrid:
    """Tabulated ``exp(-beta L)`` on a uniform cell grid over the set (dimension <= 2)."""

    def __init__(self, empirical_loss, constraint, beta, grid_points: int = 1024):
        p = empirical_loss.p
        if p > 2:
            raise ValidationError(f"grid oracle supports dimension <= 2, got {p}")
        if grid_points < 256:
            raise ValidationError("grid_points must be at least 256 per axis")
        lo, hi = constraint.bounds()
        self.lo, self.hi, self.p, self.G = lo, hi, p, grid_points
        self.h = (hi - lo) / grid_points
        self.constraint = constraint
        axes = [lo[i] + (np.arange(grid_points) + 0.5) * self.h[i] for i in range(p)]
        if p == 1:
            centers = axes[0][:, None]
        else:
            X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
            centers = np.stack([X.ravel(), Y.ravel()], axis=1)
        inside = constraint.contains(centers)
        vals = np.full(centers.shape[0], np.inf)
        if np.any(inside):
            vals[inside] = empirical_loss.value(centers[inside])
        logw = np.where(inside, -beta * vals, -np.inf) if beta > 0 else np.where(inside, 0.0, -np.inf)
        if not np.any(np.isfinite(logw)):
            raise NumericalError("no grid cell lies inside the constraint set")
        logw = logw - np.max(logw)
        w = np.exp(logw)
        self.centers = centers
        self.values = vals
        self.prob = w / w.sum()
        self.cum = np.cumsum(self.prob)
        self.cum[-1] = 1.0

    def mean(self) -> np.ndarray:
        return self.prob @ self.centers

    def expectation(self, f_values: np.ndarray) -> float:
        return float(self.prob @ f_values)

    def cdf(self, x) -> np.ndarray:
        """Piecewise-linear CDF of the 1-D cell density."""
        if self.p != 1:
            raise ValidationError("cdf is only defined in one dimension")
        u = (np.asarray(x, dtype=float) - self.lo[0]) / self.h[0]
        idx = np.clip(np.floor(u).astype(int), 0, self.G - 1)
        frac = np.clip(u - idx, 0.0, 1.0)
        base = np.concatenate(([0.0], self.cum))[idx]
        out = base + frac * self.prob[idx]
        out = np.where(u <= 0, 0.0, out)
        return np.where(u >= self.G, 1.0, out)

    def sample(self, count: int, rng: np.random.Generator, max_rounds: int = 1000) -> np.ndarray:
        out = np.empty((0, self.p))
        for _ in range(max_rounds):
            need = count - out.shape[0]
            if need <= 0:
                break
            u = rng.random(need)
            cell = np.minimum(np.searchsorted(self.cum, u, side="right"), self.cum.size - 1)
            jitter = rng.random((need, self.p)) - 0.5
            pts = self.centers[cell] + jitter * self.h
            keep = self.constraint.contains(pts, tol=0.0)
            out = np.concatenate([out, pts[keep]])
        if out.shape[0] < count:
            raise NumericalError("grid sampler rejection rate too high")
        return out[:count]


def gibbs_oracle_sample(
    empirical_loss: EmpiricalLoss,
    constraint: ConstraintSet,
    beta: float,
    grid_points: int,
    count: int,
    seed: int,
) -> np.ndarray:
    """Brute-force sampler for ``exp(-beta L)`` in dimension 1 or 2.

    Cells are chosen by inverse CDF and a point is jittered uniformly inside
    the cell; jittered points outside the set are redrawn.
    """
    grid = GibbsGrid(empirical_loss, constraint, beta, grid_points)
    return grid.sample(count, chain_generator(seed, 0))
