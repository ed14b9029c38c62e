"""Domain types: datasets, per-example losses, constraint sets, temperature schedules.

Array conventions used throughout the package: a parameter batch ``theta`` has
shape ``(..., p)``; a record matrix has shape ``(n, dim_data)``. Per-example
oracles return ``(..., n)`` values and ``(..., n, p)`` gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ValidationError

ArrayFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Leading-batch chunking for losses without an aggregate fast path.
_MAX_CHUNK_ELEMENTS = 1 << 22


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable collection of ``n`` fixed-length records."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValidationError("dataset needs at least one record of fixed length")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("dataset records must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim_data(self) -> int:
        return self.points.shape[1]

    def neighbor(self, index: int, record) -> "Dataset":
        """Return the dataset with record ``index`` replaced by ``record``."""
        record = np.asarray(record, dtype=float).reshape(-1)
        if record.shape[0] != self.dim_data:
            raise ValidationError(
                f"replacement record has length {record.shape[0]}, expected {self.dim_data}"
            )
        pts = np.array(self.points)
        pts[index] = record
        return Dataset(pts)

    def is_binary(self) -> bool:
        return bool(np.all((self.points == 0.0) | (self.points == 1.0)))

    def save(self, path, bits: Optional[bool] = None) -> None:
        """Write one comma-separated record per line."""
        if bits is None:
            bits = self.is_binary()
        fmt = "%d" if bits else "%.17g"
        np.savetxt(Path(path), self.points, fmt=fmt, delimiter=",")

    @classmethod
    def load(cls, path) -> "Dataset":
        try:
            pts = np.loadtxt(Path(path), delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ValidationError(f"cannot parse dataset {path}: {exc}") from exc
        return cls(pts)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossModel:
    """A per-example loss family with value/gradient oracles and declared constants.

    ``empirical_value`` / ``empirical_gradient`` are optional fast paths computing
    the dataset average directly; ``argmin`` optionally returns the exact
    constrained minimizer of the empirical loss.
    """

    name: str
    p: int
    per_example_value: ArrayFn
    per_example_gradient: ArrayFn
    lipschitz_L: float
    strong_convexity_m: Optional[float] = None
    smoothness_M: Optional[float] = None
    convex: bool = True
    empirical_value: Optional[ArrayFn] = None
    empirical_gradient: Optional[ArrayFn] = None
    argmin: Optional[Callable[[np.ndarray, "ConstraintSet"], Optional[np.ndarray]]] = None
    validate_records: Optional[Callable[[np.ndarray], None]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.p < 1:
            raise ValidationError("parameter dimension must be positive")
        if not self.lipschitz_L >= 0:
            raise ValidationError("Lipschitz constant must be nonnegative")
        for attr in ("strong_convexity_m", "smoothness_M"):
            v = getattr(self, attr)
            if v is not None and v < 0:
                raise ValidationError(f"{attr} must be nonnegative")

    def value(self, theta, record) -> np.ndarray:
        """Loss of ``theta`` (shape ``(..., p)``) on a single record."""
        rec = np.atleast_2d(np.asarray(record, dtype=float))
        return self.per_example_value(np.asarray(theta, dtype=float), rec)[..., 0]

    def gradient(self, theta, record) -> np.ndarray:
        rec = np.atleast_2d(np.asarray(record, dtype=float))
        return self.per_example_gradient(np.asarray(theta, dtype=float), rec)[..., 0, :]


def _quadratic_value(theta, records):
    diff = theta[..., None, :] - records
    return 0.5 * np.sum(diff * diff, axis=-1)


def _quadratic_gradient(theta, records):
    return theta[..., None, :] - records


def _quadratic_emp_value(theta, records):
    mu = records.mean(axis=0)
    spread = 0.5 * np.mean(np.sum((records - mu) ** 2, axis=-1))
    diff = theta - mu
    return 0.5 * np.sum(diff * diff, axis=-1) + spread


def _quadratic_emp_gradient(theta, records):
    return theta - records.mean(axis=0)


def _quadratic_argmin(records, constraint):
    return constraint.project(records.mean(axis=0))


def make_quadratic_loss(p: int, constraint: "ConstraintSet", data_radius: float) -> LossModel:
    """Quadratic loss ``0.5 * ||theta - d||^2`` (m = M = 1).

    ``L`` is the sup of ``||theta - d||`` over ``theta`` in ``constraint`` and
    records with ``||d|| <= data_radius``.
    """
    if data_radius < 0:
        raise ValidationError("data_radius must be nonnegative")
    lip = constraint.max_norm() + data_radius

    def check(records):
        if records.shape[1] != p:
            raise ValidationError(f"quadratic loss expects records of length {p}")
        if np.max(np.linalg.norm(records, axis=1)) > data_radius * (1 + 1e-12) + 1e-12:
            raise ValidationError(f"records must satisfy ||d|| <= {data_radius}")

    return LossModel(
        name="quadratic",
        p=p,
        per_example_value=_quadratic_value,
        per_example_gradient=_quadratic_gradient,
        lipschitz_L=float(lip),
        strong_convexity_m=1.0,
        smoothness_M=1.0,
        empirical_value=_quadratic_emp_value,
        empirical_gradient=_quadratic_emp_gradient,
        argmin=_quadratic_argmin,
        validate_records=check,
        params={"data_radius": float(data_radius)},
    )


def _abs_linear_value(theta, records):
    return np.abs(theta @ records.T)


def _abs_linear_gradient(theta, records):
    # sign(0) = 0 selects the zero subgradient at the kink
    s = np.sign(theta @ records.T)
    return s[..., None] * records


def _abs_linear_emp_value(theta, records):
    return np.mean(np.abs(theta @ records.T), axis=-1)


def _abs_linear_emp_gradient(theta, records):
    s = np.sign(theta @ records.T)
    return (s @ records) / records.shape[0]


def _abs_linear_argmin(records, constraint):
    origin = np.zeros(records.shape[1])
    if constraint.contains(origin):
        return origin
    return None


def make_abs_linear_loss(p: int) -> LossModel:
    """Convex, not strongly convex loss ``|<theta, d>|`` for records with ``||d|| <= 1``."""

    def check(records):
        if records.shape[1] != p:
            raise ValidationError(f"abs-linear loss expects records of length {p}")
        if np.max(np.linalg.norm(records, axis=1)) > 1 + 1e-12:
            raise ValidationError("abs-linear loss requires records with ||d|| <= 1")

    return LossModel(
        name="abs_linear",
        p=p,
        per_example_value=_abs_linear_value,
        per_example_gradient=_abs_linear_gradient,
        lipschitz_L=1.0,
        empirical_value=_abs_linear_emp_value,
        empirical_gradient=_abs_linear_emp_gradient,
        argmin=_abs_linear_argmin,
        validate_records=check,
    )


def _distance_value(theta, records):
    return np.linalg.norm(theta[..., None, :] - records, axis=-1)


def _distance_gradient(theta, records):
    diff = theta[..., None, :] - records
    nrm = np.linalg.norm(diff, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(nrm > 0, diff / nrm, 0.0)
    return g


def _distance_argmin(records, constraint):
    if records.shape[0] == 1:
        return constraint.project(records[0])
    return None


def make_distance_loss(p: int) -> LossModel:
    """Euclidean distance loss ``||theta - d||`` (convex, 1-Lipschitz, nonsmooth at ``d``)."""

    def check(records):
        if records.shape[1] != p:
            raise ValidationError(f"distance loss expects records of length {p}")

    return LossModel(
        name="distance",
        p=p,
        per_example_value=_distance_value,
        per_example_gradient=_distance_gradient,
        lipschitz_L=1.0,
        argmin=_distance_argmin,
        validate_records=check,
    )


def make_packing_loss(alpha: float, centers, dataset: Optional[Dataset] = None) -> LossModel:
    """Non-convex packing loss ``min_j (||theta - c_j|| / alpha - 1) * d_j``.

    Records are bit vectors with one bit per center. Ties in the minimum go to
    the lowest center index. Each per-example loss is ``1/alpha``-Lipschitz.
    """
    if not 0 < alpha < 0.5:
        raise ValidationError("alpha must lie in (0, 1/2)")
    C = np.atleast_2d(np.asarray(centers, dtype=float))
    s, p = C.shape
    if s < 1:
        raise ValidationError("need at least one center")
    if np.any(np.linalg.norm(C, axis=1) > 1 + 1e-12):
        raise ValidationError("packing centers must lie in the unit ball")
    if s > 1:
        gaps = np.linalg.norm(C[:, None, :] - C[None, :, :], axis=-1)
        gaps[np.diag_indices(s)] = np.inf
        if gaps.min() < alpha * (1 - 1e-12):
            raise ValidationError("packing centers must be pairwise at least alpha apart")

    def check(records):
        if records.shape[1] != s:
            raise ValidationError(
                f"packing records need one bit per center ({s}), got length {records.shape[1]}"
            )
        if not np.all((records == 0) | (records == 1)):
            raise ValidationError("packing records must be 0/1 bit vectors")

    def terms(theta, records):
        dist = np.linalg.norm(theta[..., None, :] - C, axis=-1)  # (..., s)
        return dist, (dist / alpha - 1.0)[..., None, :] * records  # (..., n, s)

    def value(theta, records):
        check(records)
        return terms(theta, records)[1].min(axis=-1)

    def gradient(theta, records):
        check(records)
        dist, t = terms(theta, records)
        j = np.argmin(t, axis=-1)  # (..., n), lowest index on ties
        bit = records[np.arange(records.shape[0]), j]  # (..., n)
        diff = theta[..., None, :] - C[j]  # (..., n, p)
        dj = np.take_along_axis(dist, j, axis=-1)  # (..., n)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(dj[..., None] > 0, diff / (alpha * dj[..., None]), 0.0)
        return bit[..., None] * g

    if dataset is not None:
        check(dataset.points)

    return LossModel(
        name="packing",
        p=p,
        per_example_value=value,
        per_example_gradient=gradient,
        lipschitz_L=1.0 / alpha,
        convex=False,
        validate_records=check,
        params={"alpha": float(alpha), "centers": C},
    )


def greedy_packing_centers(
    p: int, alpha: float, max_count: int, seed: int, attempt_budget: int = 2000
) -> np.ndarray:
    """Greedy rejection construction of an ``alpha``-separated set in the unit ball.

    Uniform candidates are accepted when at least ``alpha`` from every accepted
    center; the construction stops at ``max_count`` centers or after
    ``attempt_budget`` consecutive rejections. ``alpha = 1/2`` is accepted as
    the closed end of the range.
    """
    if not 0 < alpha <= 0.5:
        raise ValidationError("alpha must lie in (0, 1/2]")
    rng = np.random.default_rng(seed)
    ball = L2Ball(np.zeros(p), 1.0)
    accepted: list[np.ndarray] = []
    fails = 0
    while len(accepted) < max_count and fails < attempt_budget:
        cand = ball.sample_uniform(rng, 1)[0]
        if accepted and np.min(np.linalg.norm(np.asarray(accepted) - cand, axis=1)) < alpha:
            fails += 1
            continue
        accepted.append(cand)
        fails = 0
    return np.asarray(accepted).reshape(-1, p)


@dataclass(frozen=True, eq=False)
class EmpiricalLoss:
    """Average loss over a dataset, optionally plus ``(l2_reg / 2) * ||theta||^2``.

    The gradient sensitivity between neighboring datasets is ``2 L / n``; the
    regularizer is data independent and does not change it.
    """

    loss: LossModel
    dataset: Dataset
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.l2_reg < 0:
            raise ValidationError("l2_reg must be nonnegative")
        if self.loss.validate_records is not None:
            self.loss.validate_records(self.dataset.points)

    @property
    def p(self) -> int:
        return self.loss.p

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def lipschitz_L(self) -> float:
        return self.loss.lipschitz_L

    @property
    def gradient_sensitivity(self) -> float:
        return 2.0 * self.loss.lipschitz_L / self.n

    @property
    def strong_convexity(self) -> Optional[float]:
        m = self.loss.strong_convexity_m
        if m is None:
            return self.l2_reg if self.l2_reg > 0 else None
        return m + self.l2_reg

    @property
    def smoothness(self) -> Optional[float]:
        M = self.loss.smoothness_M
        return None if M is None else M + self.l2_reg

    def with_l2(self, l2_reg: float) -> "EmpiricalLoss":
        return replace(self, l2_reg=float(l2_reg))

    def neighbor(self, index: int, record) -> "EmpiricalLoss":
        return replace(self, dataset=self.dataset.neighbor(index, record))

    def _chunked(self, fn, theta, out_tail):
        flat = theta.reshape(-1, self.p)
        rows = max(1, _MAX_CHUNK_ELEMENTS // max(1, self.n * self.p))
        out = np.empty((flat.shape[0],) + out_tail)
        recs = self.dataset.points
        for start in range(0, flat.shape[0], rows):
            out[start : start + rows] = fn(flat[start : start + rows], recs)
        return out.reshape(theta.shape[:-1] + out_tail)

    def value(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.loss.empirical_value is not None:
            v = self.loss.empirical_value(theta, self.dataset.points)
        else:
            v = self._chunked(
                lambda t, r: self.loss.per_example_value(t, r).mean(axis=-1), theta, ()
            )
        if self.l2_reg:
            v = v + 0.5 * self.l2_reg * np.sum(theta * theta, axis=-1)
        return v

    def gradient(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.loss.empirical_gradient is not None:
            g = self.loss.empirical_gradient(theta, self.dataset.points)
        else:
            g = self._chunked(
                lambda t, r: self.loss.per_example_gradient(t, r).mean(axis=-2),
                theta,
                (self.p,),
            )
        if self.l2_reg:
            g = g + self.l2_reg * theta
        return g

    def exact_minimizer(self, constraint: "ConstraintSet") -> Optional[np.ndarray]:
        """Closed-form constrained minimizer when the loss provides one."""
        if self.loss.argmin is None:
            return None
        if self.l2_reg:
            if self.loss.name == "quadratic":
                mu = self.dataset.points.mean(axis=0)
                return constraint.project(mu / (1.0 + self.l2_reg))
            return None
        return self.loss.argmin(self.dataset.points, constraint)


# --------------------------------------------------------------------------
# Constraint sets
# --------------------------------------------------------------------------


class ConstraintSet:
    """A closed convex body with Euclidean projection."""

    kind: str = "abstract"

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def diameter(self) -> float:
        raise NotImplementedError

    def project(self, x) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x, tol: float = 1e-9):
        raise NotImplementedError

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box ``(lo, hi)``."""
        raise NotImplementedError

    def center(self) -> np.ndarray:
        raise NotImplementedError

    def max_norm(self) -> float:
        """``sup ||theta||`` over the set."""
        raise NotImplementedError

    def intersect(self, other: "ConstraintSet") -> "Intersection":
        parts = []
        for s in (self, other):
            parts.extend(s.parts if isinstance(s, Intersection) else [s])
        return Intersection(tuple(parts))


@dataclass(frozen=True, eq=False)
class L2Ball(ConstraintSet):
    center_: np.ndarray
    radius: float
    kind = "l2_ball"

    def __post_init__(self):
        c = np.array(self.center_, dtype=float).reshape(-1)
        c.setflags(write=False)
        object.__setattr__(self, "center_", c)
        if not self.radius > 0:
            raise ValidationError("ball radius must be positive")

    @property
    def dim(self) -> int:
        return self.center_.shape[0]

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def project(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center_
        nrm = np.linalg.norm(d, axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(nrm > self.radius, self.radius / nrm, 1.0)
        return self.center_ + d * scale

    def contains(self, x, tol=1e-9):
        d = np.linalg.norm(np.asarray(x, dtype=float) - self.center_, axis=-1)
        return d <= self.radius * (1 + tol) + tol

    def bounds(self):
        return self.center_ - self.radius, self.center_ + self.radius

    def center(self):
        return np.array(self.center_)

    def max_norm(self):
        return float(np.linalg.norm(self.center_) + self.radius)

    def sample_uniform(self, rng: np.random.Generator, count: int) -> np.ndarray:
        z = rng.standard_normal((count, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        r = self.radius * rng.random(count) ** (1.0 / self.dim)
        return self.center_ + z * r[:, None]


@dataclass(frozen=True, eq=False)
class Box(ConstraintSet):
    lo: np.ndarray
    hi: np.ndarray
    kind = "box"

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).reshape(-1)
        hi = np.array(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValidationError("box needs lo < hi coordinatewise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, p: int, half_width: float, center=0.0) -> "Box":
        c = np.broadcast_to(np.asarray(center, dtype=float), (p,))
        return cls(c - half_width, c + half_width)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def project(self, x):
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def contains(self, x, tol=1e-9):
        x = np.asarray(x, dtype=float)
        slack = tol * (1 + np.abs(self.hi - self.lo))
        return np.all((x >= self.lo - slack) & (x <= self.hi + slack), axis=-1)

    def bounds(self):
        return np.array(self.lo), np.array(self.hi)

    def center(self):
        return 0.5 * (self.lo + self.hi)

    def max_norm(self):
        return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))

    def sample_uniform(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((count, self.dim))


@dataclass(frozen=True, eq=False)
class Intersection(ConstraintSet):
    """Intersection of balls and boxes; projection by Dykstra's algorithm."""

    parts: tuple
    max_iter: int = 100
    tol: float = 1e-12
    kind = "intersection"

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    @property
    def diameter(self) -> float:
        return min(s.diameter for s in self.parts)

    def project(self, x):
        x = np.asarray(x, dtype=float)
        if np.all(self.contains(x, tol=0.0)):
            return np.array(x)
        y = np.array(x)
        incr = [np.zeros_like(y) for _ in self.parts]
        for _ in range(self.max_iter):
            prev = y
            for i, s in enumerate(self.parts):
                z = s.project(y + incr[i])
                incr[i] = y + incr[i] - z
                y = z
            if np.max(np.abs(y - prev)) <= self.tol:
                break
        return y

    def contains(self, x, tol=1e-9):
        out = self.parts[0].contains(x, tol)
        for s in self.parts[1:]:
            out = out & s.contains(x, tol)
        return out

    def bounds(self):
        lo, hi = self.parts[0].bounds()
        for s in self.parts[1:]:
            l2, h2 = s.bounds()
            lo, hi = np.maximum(lo, l2), np.minimum(hi, h2)
        return lo, hi

    def center(self):
        lo, hi = self.bounds()
        return self.project(0.5 * (lo + hi))

    def max_norm(self):
        return min(s.max_norm() for s in self.parts)


# --------------------------------------------------------------------------
# Temperature schedules
# --------------------------------------------------------------------------


class TemperatureSchedule:
    """Inverse temperature ``beta_t`` with closed-form integrals."""

    def beta_at(self, t):
        raise NotImplementedError

    def integral(self, T: float, power: int = 1) -> float:
        """``int_0^T beta_t^power dt`` for ``power`` in {1, 2}."""
        raise NotImplementedError

    def segment_integral(self, t0, t1):
        """``int_{t0}^{t1} beta_t dt`` (vectorized over endpoints)."""
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantSchedule(TemperatureSchedule):
    beta: float

    def __post_init__(self):
        if not self.beta >= 0 or not math.isfinite(self.beta):
            raise ValidationError("beta must be finite and nonnegative")

    def beta_at(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.beta)

    def integral(self, T, power=1):
        _check_power(power)
        return self.beta**power * T

    def segment_integral(self, t0, t1):
        return self.beta * (np.asarray(t1, dtype=float) - np.asarray(t0, dtype=float))

    def describe(self):
        return {"kind": "constant", "beta": self.beta}


@dataclass(frozen=True)
class PowerSchedule(TemperatureSchedule):
    """``beta_t = t ** a`` for ``a >= 0``."""

    a: float

    def __post_init__(self):
        if not self.a >= 0 or not math.isfinite(self.a):
            raise ValidationError("power-law exponent a must be finite and >= 0")

    def beta_at(self, t):
        return np.power(np.asarray(t, dtype=float), self.a)

    def integral(self, T, power=1):
        _check_power(power)
        k = power * self.a + 1.0
        return T**k / k

    def cumulative(self, t):
        """``B_t = t^(a+1) / (a+1)``."""
        return np.power(np.asarray(t, dtype=float), self.a + 1.0) / (self.a + 1.0)

    def segment_integral(self, t0, t1):
        return self.cumulative(t1) - self.cumulative(t0)

    def describe(self):
        return {"kind": "power", "a": self.a}


def _check_power(power):
    if power not in (1, 2):
        raise ValidationError("integral power must be 1 or 2")


def as_vector(x: Sequence[float] | float, p: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=float), (p,)).copy()
