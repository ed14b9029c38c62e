"""Renyi-divergence privacy curves, (eps, delta) conversion, and stability bounds.

All logarithms are natural.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

from .errors import NumericalError, PreTransitionError, ValidationError
from .model import TemperatureSchedule

StationaryDivergence = Callable[[float], float]


@dataclass(frozen=True)
class RenyiCurve:
    """A bound ``alpha -> R_alpha`` on the Renyi divergence between neighboring runs.

    ``linear_coefficient`` is set when the bound has the form ``c * alpha``; the
    converter then adds the closed-form optimal order to its search grid.
    """

    fn: Callable[[float], float]
    valid_alpha_min: float = 1.0
    description: str = ""
    linear_coefficient: Optional[float] = None

    def eval(self, alpha: float) -> float:
        if not alpha > 1.0 or alpha < self.valid_alpha_min:
            raise ValidationError(
                f"order alpha={alpha} outside the valid range (> 1 and >= {self.valid_alpha_min})"
            )
        return float(self.fn(float(alpha)))

    __call__ = eval

    def table(self, alphas: Iterable[float]) -> list[tuple[float, float]]:
        """``(alpha, bound)`` rows; orders where the bound is undefined are skipped."""
        rows = []
        for a in alphas:
            try:
                rows.append((float(a), self.eval(a)))
            except ValidationError:
                continue
        return rows

    def to_csv(self, path, alphas: Iterable[float]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "bound"])
            for a, b in self.table(alphas):
                w.writerow([repr(a), repr(b)])


def linear_curve(c: float, description: str = "") -> RenyiCurve:
    """The curve ``alpha -> c * alpha``."""
    if c < 0 or not math.isfinite(c):
        raise ValidationError("linear coefficient must be finite and nonnegative")
    return RenyiCurve(lambda a: c * a, 1.0, description, linear_coefficient=float(c))


@dataclass(frozen=True)
class ScBoundParams:
    """Constants for the strongly convex, smooth long-horizon bound.

    ``R`` bounds the norms of both minimizers, ``delta_grad`` is the gradient
    sensitivity between the two losses.
    """

    m: float
    M: float
    R: float
    beta: float
    delta_grad: float
    p: int

    def __post_init__(self):
        for name in ("m", "M", "R", "beta", "delta_grad"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValidationError(f"{name} must be positive and finite")
        if self.p < 1:
            raise ValidationError("p must be a positive integer")
        if self.m > self.M:
            raise ValidationError("need m <= M")

    def t0(self, alpha: float) -> float:
        """Start time of the long-horizon regime, ``2 log((alpha - 1) max{2, M})``."""
        return 2.0 * math.log((alpha - 1.0) * max(2.0, self.M))

    def decay_coefficient(self, alpha: float) -> float:
        m, M, R, beta, p = self.m, self.M, self.R, self.beta, self.p
        return (
            beta * m * R**2 * (max(30.0, 5 * M**2 + 10 * M) + 18 * alpha - 3) / 6.0
            + (5 * M * p + 3 * p) / 6.0 * math.log(M / m)
        )


def rdp_finite_time(delta_grad: float, schedule: TemperatureSchedule, T: float) -> RenyiCurve:
    """Trajectory-level bound ``alpha * Delta^2 / 4 * int_0^T beta_t^2 dt``."""
    if delta_grad < 0 or T < 0:
        raise ValidationError("delta_grad and T must be nonnegative")
    if not (math.isfinite(delta_grad) and math.isfinite(T)):
        raise ValidationError("delta_grad and T must be finite")
    try:
        c = delta_grad**2 / 4.0 * schedule.integral(T, 2)
    except OverflowError as exc:
        raise NumericalError("finite-time bound overflows") from exc
    if not math.isfinite(c):
        raise NumericalError("finite-time bound overflows")
    return linear_curve(
        c,
        f"finite-time trajectory bound; Delta={delta_grad}, T={T}, schedule={schedule.describe()}; "
        "any common initial distribution",
    )


def rdp_short_term_sc(delta_grad: float, beta: float, m: float, T: float) -> RenyiCurve:
    """``alpha * beta * Delta^2 / m * (1 - exp(-beta m T / 2))`` for m-strongly convex losses."""
    if not m > 0 or not beta > 0:
        raise ValidationError("m and beta must be positive")
    if delta_grad < 0 or T < 0:
        raise ValidationError("delta_grad and T must be nonnegative")
    c = beta * delta_grad**2 / m * -math.expm1(-beta * m * T / 2.0)
    return linear_curve(
        c,
        f"short-horizon strongly convex bound; Delta={delta_grad}, beta={beta}, m={m}, T={T}; "
        "assumes both chains start from N(0, (beta m)^-1 I)",
    )


def rdp_long_term_sc(
    params: ScBoundParams, stationary_divergence: StationaryDivergence, T: float
) -> RenyiCurve:
    """Long-horizon bound: a decaying transient plus ``(4/3) R_{3 alpha}`` of the stationary laws.

    Evaluating at an order with ``T < t0(alpha)`` raises :class:`PreTransitionError`.
    """

    def fn(alpha):
        t0 = params.t0(alpha)
        if T < t0:
            raise PreTransitionError(
                f"pre-transition: T={T} is below t0={t0:.6g} for alpha={alpha}"
            )
        decay = math.exp(-(T - t0) * params.beta * params.m / (3.0 * alpha))
        return params.decay_coefficient(alpha) * decay + (4.0 / 3.0) * stationary_divergence(
            3.0 * alpha
        )

    return RenyiCurve(
        fn,
        2.0,
        f"long-horizon strongly convex smooth bound; {params}, T={T}; "
        "initial law as for the short-horizon bound; the variant approaching R_alpha "
        "instead of (4/3) R_(3 alpha) is not provided",
    )


class ApproxDP(NamedTuple):
    eps: float
    alpha: float


def default_alpha_grid() -> np.ndarray:
    return np.concatenate(([1.25, 1.5], np.arange(2.0, 1025.0)))


def preset_alpha(eps: float, delta: float) -> float:
    """The fixed order ``1 + 2 log(1/delta) / eps`` used by the constant-temperature analysis."""
    _check_delta(delta)
    if not eps > 0:
        raise ValidationError("eps must be positive")
    return 1.0 + 2.0 * math.log(1.0 / delta) / eps


def analytic_optimum_linear(c: float, delta: float) -> ApproxDP:
    """Minimizer of ``c alpha + log(1/delta)/(alpha-1)`` over ``alpha > 1``."""
    _check_delta(delta)
    if not c > 0:
        raise ValidationError("analytic optimum needs c > 0")
    lg = math.log(1.0 / delta)
    return ApproxDP(c + 2.0 * math.sqrt(c * lg), 1.0 + math.sqrt(lg / c))


def rdp_to_approx_dp(
    curve: RenyiCurve, delta: float, alpha_grid: Optional[Iterable[float]] = None
) -> ApproxDP:
    """Convert an RDP curve to ``(eps, delta)`` by minimizing over a grid of orders."""
    _check_delta(delta)
    grid = default_alpha_grid() if alpha_grid is None else np.asarray(list(alpha_grid), float)
    if grid.size == 0:
        raise ValidationError("alpha grid is empty")
    if np.any(grid <= 1.0) or not np.all(np.isfinite(grid)):
        raise ValidationError("alpha grid must lie in (1, inf)")
    if alpha_grid is None and curve.linear_coefficient and curve.linear_coefficient > 0:
        grid = np.append(grid, analytic_optimum_linear(curve.linear_coefficient, delta).alpha)
    lg = math.log(1.0 / delta)
    best = ApproxDP(math.inf, math.nan)
    evaluated = 0
    for a in grid:
        try:
            val = curve.eval(a) + lg / (a - 1.0)
        except ValidationError:
            continue
        evaluated += 1
        if val < best.eps:
            best = ApproxDP(float(val), float(a))
    if not evaluated:
        raise ValidationError("curve is undefined at every order on the grid")
    if not math.isfinite(best.eps):
        raise NumericalError("RDP bound is not finite at any order on the grid")
    return best


def expmech_temperature(eps: float, L: float, diameter: float, n: int) -> float:
    """Inverse temperature ``eps n / (2 L ||C||)`` of the pure-DP exponential mechanism."""
    if not (eps > 0 and L > 0 and diameter > 0 and n > 0):
        raise ValidationError("eps, L, diameter, n must be positive")
    return eps * n / (2.0 * L * diameter)


def pure_dp_expmech_epsilon(L: float, diameter: float, n: int, temperature: float) -> float:
    """Privacy level of sampling ``exp(-temperature * empirical loss)``."""
    if not (L > 0 and diameter > 0 and n > 0) or temperature < 0:
        raise ValidationError("L, diameter, n must be positive and temperature nonnegative")
    return temperature * 2.0 * L * diameter / n


def stability_bound(L: float, n: int, schedule: TemperatureSchedule, T: float) -> float:
    """Uniform stability ``4 L^2 / n * int_0^T beta_t dt`` of the diffusion."""
    if L < 0 or n <= 0 or T < 0:
        raise ValidationError("L, T must be nonnegative and n positive")
    return 4.0 * L**2 / n * schedule.integral(T, 1)


class PhaseTransition(NamedTuple):
    T_star: float
    t0: float
    approximation: float


def phase_transition_time(
    params: ScBoundParams,
    stationary_divergence: StationaryDivergence,
    alpha: float,
    tol: float = 1e-6,
) -> Optional[PhaseTransition]:
    """First time the long-horizon bound drops to the short-horizon bound.

    Returns ``None`` when the long-horizon asymptote is not below the
    short-horizon one, since the bounds then never cross.
    """
    if alpha < 2:
        raise ValidationError("alpha must be at least 2")
    short_asym = alpha * params.beta * params.delta_grad**2 / params.m
    stat = (4.0 / 3.0) * stationary_divergence(3.0 * alpha)
    if not stat < short_asym:
        return None
    t0 = params.t0(alpha)

    def gap(T):
        long = rdp_long_term_sc(params, stationary_divergence, T).eval(alpha)
        short = rdp_short_term_sc(params.delta_grad, params.beta, params.m, T).eval(alpha)
        return long - short

    bm = params.beta * params.m
    num = bm * params.R * (params.M + alpha) + params.M * params.p * math.log(params.M / params.m)
    approx = t0 + alpha / bm * math.log(num / (short_asym - stat))

    if gap(t0) <= 0:
        return PhaseTransition(t0, t0, approx)
    lo, width = t0, max(1.0, 3.0 * alpha / bm)
    hi = t0 + width
    while gap(hi) > 0:
        lo, width = hi, 2 * width
        hi = t0 + width
        if not math.isfinite(hi):
            return None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
    return PhaseTransition(hi, t0, approx)


@dataclass(frozen=True)
class ShiftedQuadraticPair:
    """``f = 0.5 th' A th`` and ``f' = 0.5 (th - v)' A (th - v)`` with diagonal ``A``.

    The gradient gap is ``||A v||`` everywhere; strong convexity and smoothness
    are the extreme diagonal entries.
    """

    spectrum: np.ndarray
    shift: np.ndarray
    ball_radius: Optional[float] = None

    def __post_init__(self):
        s = np.asarray(self.spectrum, dtype=float).reshape(-1)
        v = np.asarray(self.shift, dtype=float).reshape(-1)
        if s.shape != v.shape or np.any(s <= 0):
            raise ValidationError("spectrum must be positive with the same length as shift")
        object.__setattr__(self, "spectrum", s)
        object.__setattr__(self, "shift", v)

    @property
    def m(self) -> float:
        return float(self.spectrum.min())

    @property
    def M(self) -> float:
        return float(self.spectrum.max())

    @property
    def delta_grad(self) -> float:
        return float(np.linalg.norm(self.spectrum * self.shift))


def pgd_trajectory_stability_check(
    f_params: ShiftedQuadraticPair, noise_seed: int, eta: float, steps: int, block: int = 4096
) -> float:
    """Max gap between two projected noisy gradient descent runs sharing their noise."""
    if not eta > 0 or steps < 0:
        raise ValidationError("eta must be positive and steps nonnegative")
    if f_params.M > 1.0 / eta:
        raise ValidationError(f"smoothness M={f_params.M} exceeds 1/eta={1.0 / eta}")
    A, v = f_params.spectrum, f_params.shift
    rad = f_params.ball_radius

    def proj(x):
        if rad is None:
            return x
        nrm = np.linalg.norm(x)
        return x if nrm <= rad else x * (rad / nrm)

    rng = np.random.default_rng(noise_seed)
    th = np.zeros_like(A)
    th2 = np.zeros_like(A)
    sd = math.sqrt(2.0 * eta)
    worst = 0.0
    done = 0
    while done < steps:
        b = min(block, steps - done)
        noise = rng.standard_normal((b, A.size)) * sd
        for xi in noise:
            th = proj(th - eta * A * th + xi)
            th2 = proj(th2 - eta * A * (th2 - v) + xi)
            gap = float(np.linalg.norm(th - th2))
            if gap > worst:
                worst = gap
        done += b
    return worst


def _check_delta(delta):
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
