"""End-to-end private optimizers built on the Langevin primitives."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import accountant, diffusion
from .errors import NumericalError, ValidationError
from .model import (
    ConstantSchedule,
    ConstraintSet,
    Dataset,
    EmpiricalLoss,
    L2Ball,
    LossModel,
    PowerSchedule,
)

SAMPLERS = ("grid_oracle", "langevin")


@dataclass
class MechanismReport:
    mechanism: str
    theta_priv: np.ndarray
    claimed_eps: float
    claimed_delta: float
    temperature_or_schedule: dict
    internal_trace: list = field(default_factory=list)
    seed: int = 0
    wall_time: float = 0.0
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return _jsonable(d)

    def to_json(self, **kw) -> str:
        d = self.to_dict()
        out = {
            "mechanism": d["mechanism"],
            "theta_priv": d["theta_priv"],
            "eps": d["claimed_eps"],
            "delta": d["claimed_delta"],
            "temperature_or_schedule": d["temperature_or_schedule"],
            "trace": d["internal_trace"],
            "seed": d["seed"],
            "wall_time": d["wall_time"],
            "notes": d["notes"],
        }
        return json.dumps(out, **kw)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(keys)).generate_state(1, np.uint64)[0])


def default_grid_points(p: int) -> int:
    return 1024 if p == 1 else 512


def sample_gibbs(
    empirical_loss: EmpiricalLoss,
    constraint: ConstraintSet,
    beta: float,
    sampler_choice: str,
    seed: int,
    count: int = 1,
    grid_points: Optional[int] = None,
    burn_in_T: Optional[float] = None,
    langevin_steps: Optional[int] = None,
) -> np.ndarray:
    """Draw ``count`` points from ``exp(-beta L)`` restricted to ``constraint``."""
    if sampler_choice not in SAMPLERS:
        raise ValidationError(f"sampler_choice must be one of {SAMPLERS}")
    if sampler_choice == "grid_oracle":
        if empirical_loss.p > 2:
            raise ValidationError("grid_oracle sampler needs dimension <= 2; use 'langevin'")
        g = grid_points or default_grid_points(empirical_loss.p)
        return diffusion.gibbs_oracle_sample(empirical_loss, constraint, beta, g, count, seed)
    if burn_in_T is None:
        burn_in_T = max(5.0, constraint.diameter**2)
    return diffusion.gibbs_sample_langevin(
        empirical_loss, constraint, beta, burn_in_T, langevin_steps, count, seed,
        theta0=constraint.center(),
    )


def exponential_mechanism(
    loss: LossModel,
    dataset: Dataset,
    constraint: ConstraintSet,
    eps: float,
    sampler_choice: str = "grid_oracle",
    seed: int = 0,
    l2_reg: float = 0.0,
    **sampler_kw,
) -> MechanismReport:
    """Sample from ``exp(-(eps n / (2 L ||C||)) L(theta; D))`` over the set (pure eps-DP).

    ``l2_reg`` adds the data-independent term ``(l2_reg/2)||theta||^2`` to the
    score; the temperature still uses the Lipschitz constant of the data loss.
    """
    t0 = time.perf_counter()
    if not eps > 0:
        raise ValidationError("eps must be positive")
    el = EmpiricalLoss(loss, dataset, l2_reg)
    temp = accountant.expmech_temperature(eps, loss.lipschitz_L, constraint.diameter, dataset.n)
    theta = sample_gibbs(el, constraint, temp, sampler_choice, seed, 1, **sampler_kw)[0]
    return MechanismReport(
        "exponential_mechanism",
        theta,
        eps,
        0.0,
        {"temperature": temp, "sampler": sampler_choice, "l2_reg": l2_reg},
        seed=seed,
        wall_time=time.perf_counter() - t0,
    )


def exponential_mechanism_samples(
    loss: LossModel,
    dataset: Dataset,
    constraint: ConstraintSet,
    eps: float,
    count: int,
    sampler_choice: str = "grid_oracle",
    seed: int = 0,
    l2_reg: float = 0.0,
    **sampler_kw,
) -> np.ndarray:
    """``count`` independent exponential-mechanism outputs sharing one sampler setup."""
    el = EmpiricalLoss(loss, dataset, l2_reg)
    temp = accountant.expmech_temperature(eps, loss.lipschitz_L, constraint.diameter, dataset.n)
    return sample_gibbs(el, constraint, temp, sampler_choice, seed, count, **sampler_kw)


def iterated_rounds(eps: float, n: int, p: int) -> tuple[int, list[float]]:
    """Number of rounds ``k = 1 + ceil(ln ln(eps n / (p + ln n)))`` and budgets ``eps / 2^(k-i+1)``."""
    ratio = eps * n / (p + math.log(n))
    if not ratio > math.e:
        raise ValidationError(
            f"eps n / (p + ln n) = {ratio:.4g} must exceed e for a positive round count"
        )
    k = 1 + math.ceil(math.log(math.log(ratio)))
    return k, [eps / 2 ** (k - i + 1) for i in range(1, k + 1)]


def iterated_radius(c_const, L, p, n, diameter, m, eps_i) -> float:
    return math.sqrt(c_const * L * (p + 3.0 * math.log(n)) * diameter / (m * eps_i * n))


def iterated_exponential_mechanism(
    loss: LossModel,
    dataset: Dataset,
    constraint0: ConstraintSet,
    m: float,
    eps: float,
    c_const: float = 4.0,
    sampler_choice: str = "grid_oracle",
    seed: int = 0,
    **sampler_kw,
) -> MechanismReport:
    """Localized exponential mechanism for strongly convex losses.

    Round ``i`` samples from the current set at temperature
    ``eps_i n / (2 L D_{i-1})`` and intersects the set with a ball around the
    sample. ``D_i = min(D_{i-1}, 2 r_i)`` bounds the diameter of the new set.
    """
    t_start = time.perf_counter()
    if not m > 0:
        raise ValidationError("m must be positive")
    if not c_const > 0:
        raise ValidationError("c_const must be positive")
    n, p, L = dataset.n, loss.p, loss.lipschitz_L
    k, eps_sched = iterated_rounds(eps, n, p)
    el = EmpiricalLoss(loss, dataset)
    current: ConstraintSet = constraint0
    D = constraint0.diameter
    trace = []
    theta = None
    for i, eps_i in enumerate(eps_sched, start=1):
        temp = eps_i * n / (2.0 * L * D)
        theta = sample_gibbs(
            el, current, temp, sampler_choice, _sub_seed(seed, i), 1, **sampler_kw
        )[0]
        r = iterated_radius(c_const, L, p, n, D, m, eps_i)
        rec = {
            "round": i,
            "eps_i": eps_i,
            "temperature": temp,
            "diameter_prev": D,
            "center": theta.copy(),
            "radius": r,
        }
        trace.append(rec)
        if not (math.isfinite(r) and r > 0):
            err = NumericalError(f"degenerate radius {r} in round {i}")
            err.trace = trace
            raise err
        current = current.intersect(L2Ball(theta, r))
        D = min(D, 2.0 * r)
    return MechanismReport(
        "iterated_exponential_mechanism",
        theta,
        eps,
        0.0,
        {"rounds": k, "eps_schedule": eps_sched, "sampler": sampler_choice},
        trace,
        seed,
        time.perf_counter() - t_start,
        {"c_const": c_const, "m": m},
    )


def trace_sets(report: MechanismReport, constraint0: ConstraintSet, upto: int) -> ConstraintSet:
    """Rebuild the localized set after ``upto`` rounds from a report's trace."""
    s = constraint0
    for rec in report.internal_trace[:upto]:
        s = s.intersect(L2Ball(rec["center"], rec["radius"]))
    return s


def dp_sgd_sigma2(eps: float, delta: float, steps_T: int, L: float) -> float:
    """Per-step noise variance ``8 T L^2 log(1/delta) / eps^2``."""
    return 8.0 * steps_T * L**2 * math.log(1.0 / delta) / eps**2


def dp_sgd(
    loss: LossModel,
    dataset: Dataset,
    constraint: ConstraintSet,
    eps: float,
    delta: float,
    steps_T: int,
    eta: float,
    seed: int = 0,
    theta0=None,
) -> MechanismReport:
    """Projected noisy SGD with one uniformly sampled record per step."""
    t0 = time.perf_counter()
    if not (eps > 0 and 0 < delta < 1 and eta >= 0):
        raise ValidationError("need eps > 0, delta in (0, 1), eta >= 0")
    if steps_T < 0:
        raise ValidationError("steps_T must be nonnegative")
    sigma2 = dp_sgd_sigma2(eps, delta, steps_T, loss.lipschitz_L)
    sigma = math.sqrt(sigma2)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    theta = np.array(constraint.center() if theta0 is None else theta0, dtype=float)
    pts = dataset.points
    for t in range(steps_T):
        i = rng.integers(dataset.n)
        g = loss.per_example_gradient(theta, pts[i : i + 1])[0]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient at step {t}")
        theta = constraint.project(theta - eta * (g + sigma * rng.standard_normal(loss.p)))
    return MechanismReport(
        "dp_sgd",
        theta,
        eps,
        delta,
        {"sigma2": sigma2, "eta": eta, "steps": steps_T},
        seed=seed,
        wall_time=time.perf_counter() - t0,
    )


def regularization_strength(L: float, diameter: float, n: int) -> float:
    """``m = L / (||C|| sqrt(n))``."""
    return L / (diameter * math.sqrt(n))


def regularized_sco_pure(
    loss: LossModel,
    dataset: Dataset,
    constraint: ConstraintSet,
    eps: float,
    sampler_choice: str = "grid_oracle",
    seed: int = 0,
    m: Optional[float] = None,
    **sampler_kw,
) -> MechanismReport:
    """Exponential mechanism on ``L(theta; D) + (m/2)||theta||^2`` (requires 0 in the set)."""
    if not np.all(constraint.contains(np.zeros(constraint.dim))):
        raise ValidationError("the origin must lie in the constraint set")
    L = loss.lipschitz_L
    if m is None:
        m = regularization_strength(L, constraint.diameter, dataset.n)
    if not m > 0:
        raise ValidationError("m must be positive")
    rep = exponential_mechanism(
        loss, dataset, constraint, eps, sampler_choice, seed, l2_reg=m, **sampler_kw
    )
    rep.mechanism = "regularized_sco_pure"
    rep.notes.update(
        {"regularizer_m": m, "stability_certificate": 2.0 * L**2 / (m * dataset.n)}
    )
    return rep


def sco_convex_horizon(eps, delta, diameter, p, n) -> float:
    """``T = min(||C||^2 / p, log(1/delta) ||C||^2 / (eps^2 n))``."""
    return min(diameter**2 / p, math.log(1.0 / delta) * diameter**2 / (eps**2 * n))


def sco_approx_dp(
    loss: LossModel,
    dataset: Dataset,
    constraint: ConstraintSet,
    eps: float,
    delta: float,
    variant: str = "convex",
    seed: int = 0,
    m: Optional[float] = None,
    steps: Optional[int] = None,
) -> MechanismReport:
    """(eps, delta)-DP stochastic convex optimization through the diffusion.

    The ``strongly_convex`` variant takes ``m`` with the weighted-average
    convention (the loss is ``2m``-strongly convex).
    """
    t0 = time.perf_counter()
    el = EmpiricalLoss(loss, dataset)
    L, n = loss.lipschitz_L, dataset.n
    if variant == "convex":
        if 2.0 * math.log(1.0 / delta) / eps < 1.0:
            raise ValidationError("requires 2 log(1/delta) / eps >= 1")
        T = sco_convex_horizon(eps, delta, constraint.diameter, loss.p, n)
        beta = diffusion.calibrate_constant_beta(eps, delta, L, n, T)
        sched = ConstantSchedule(beta)
        if steps is None:
            steps = diffusion.steps_for(el, sched, T)
        cfg = diffusion.DiffusionConfig(sched, T, steps, seed)
        theta = diffusion.simulate_chains(el, constraint, cfg, 1).final[0]
        cert = accountant.rdp_to_approx_dp(
            accountant.rdp_finite_time(el.gradient_sensitivity, sched, T), delta
        )
        info = {"kind": "constant", "beta": beta, "T": T, "steps": steps}
    elif variant == "strongly_convex":
        if m is None:
            raise ValidationError("strongly_convex variant needs m")
        rel = diffusion.sc_weighted_average(el, constraint, m, eps, delta, seed, steps=steps)
        theta, sched, T = rel.theta_priv, rel.schedule, rel.horizon_T
        cert = accountant.ApproxDP(rel.certified_eps, rel.alpha_star)
        info = {"kind": "power", "a": sched.a, "T": T, "steps": rel.steps}
    else:
        raise ValidationError("variant must be 'convex' or 'strongly_convex'")
    mu = accountant.stability_bound(L, n, sched, T)
    return MechanismReport(
        f"sco_approx_dp[{variant}]",
        theta,
        eps,
        delta,
        info,
        seed=seed,
        wall_time=time.perf_counter() - t0,
        notes={"stability_mu": mu, "certified_eps": cert.eps, "alpha_star": cert.alpha},
    )


def nonconvex_erm_bound(L: float, diameter: float, p: int, eps: float, n: int) -> float:
    """Excess empirical risk bound (unit constant) of the exponential mechanism without convexity."""
    en = eps * n
    if p > en / 2.0:
        return 2.0 * L * diameter
    r = p / en
    return L * diameter * (r * math.log(en / p) + r)
