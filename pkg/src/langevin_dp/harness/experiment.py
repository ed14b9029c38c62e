"""Grid experiments over (n, p, eps) with seeded trials and CSV/JSON reports.

Seed scheme: every random stream is keyed by a tuple of small integers mixed
into the master seed by ``numpy.random.SeedSequence`` (a fixed 64-bit hash):

* mechanism randomness: ``(master, 1, trial)`` when trials are paired across
  cells, ``(master, 1, cell, trial)`` otherwise;
* training data: ``(master, 2, p_index, trial)``; a cell with ``n`` records
  uses the first ``n`` records of that stream, so cells differing only in
  ``n`` or ``eps`` see nested datasets;
* population holdout: ``(master, 3, p_index, trial)``.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .. import diffusion, mechanisms
from ..errors import LangevinDPError, ValidationError
from ..model import (
    Box,
    ConstraintSet,
    Dataset,
    EmpiricalLoss,
    L2Ball,
    LossModel,
    make_abs_linear_loss,
    make_distance_loss,
    make_quadratic_loss,
)
from .risk import excess_empirical_risk, excess_population_risk

CSV_COLUMNS = [
    "cell",
    "mechanism",
    "loss",
    "n",
    "p",
    "eps",
    "delta",
    "trials",
    "failures",
    "mean_excess_empirical_risk",
    "median_excess_empirical_risk",
    "std_error_empirical",
    "mean_excess_population_risk",
    "std_error_population",
    "error",
]

MECHANISMS = (
    "convex_last_iterate",
    "sc_weighted_average",
    "smooth_sc_last_iterate",
    "exponential_mechanism",
    "iterated_exponential_mechanism",
    "regularized_sco_pure",
    "sco_approx_dp",
    "dp_sgd",
)
LOSSES = ("quadratic", "abs_linear", "distance")


def derive_seed(master: int, *keys: int) -> int:
    """64-bit seed for the stream identified by ``keys`` under ``master``."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class ExperimentSpec:
    mechanism: str
    loss: str
    n_grid: list
    p_grid: list
    eps_grid: list
    delta: float = 1e-5
    trials: int = 50
    seed: int = 0
    output_path: str = ""
    mechanism_params: dict = field(default_factory=dict)
    loss_params: dict = field(default_factory=dict)
    constraint: dict = field(default_factory=lambda: {"kind": "l2_ball", "radius": 1.0})
    data: dict = field(default_factory=lambda: {"mean": 0.2, "std": 0.3})
    paired: bool = True
    population_holdout: int = 0
    workers: int = 1

    def __post_init__(self):
        self.n_grid = [int(x) for x in _as_list(self.n_grid)]
        self.p_grid = [int(x) for x in _as_list(self.p_grid)]
        self.eps_grid = [float(x) for x in _as_list(self.eps_grid)]
        if not (self.n_grid and self.p_grid and self.eps_grid):
            raise ValidationError("n_grid, p_grid and eps_grid must be nonempty")
        if self.trials < 1:
            raise ValidationError("trials must be at least 1")
        if self.mechanism not in MECHANISMS:
            raise ValidationError(f"unknown mechanism {self.mechanism!r}; choose from {MECHANISMS}")
        if self.loss not in LOSSES:
            raise ValidationError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if not 0 < self.delta < 1:
            raise ValidationError("delta must lie in (0, 1)")

    def cells(self):
        out = []
        for pi, p in enumerate(self.p_grid):
            for n in self.n_grid:
                for eps in self.eps_grid:
                    out.append((len(out), pi, p, n, eps))
        return out

    @classmethod
    def from_config(cls, path, overrides: Optional[dict] = None) -> "ExperimentSpec":
        """Read an INI-style key-value file.

        ``[experiment]`` holds the top-level fields; ``[mechanism]``, ``[loss]``,
        ``[constraint]`` and ``[data]`` hold the parameter dictionaries. Values
        are parsed as JSON when possible and kept as strings otherwise.
        """
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ValidationError(f"cannot read config file {path}")
        if "experiment" not in cp:
            raise ValidationError("config needs an [experiment] section")
        kw = {k: _parse_value(v) for k, v in cp["experiment"].items()}
        for section, key in (
            ("mechanism", "mechanism_params"),
            ("loss", "loss_params"),
            ("constraint", "constraint"),
            ("data", "data"),
        ):
            if section in cp:
                kw[key] = {k: _parse_value(v) for k, v in cp[section].items()}
        kw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ValidationError(f"bad experiment config: {exc}") from exc


def _as_list(x):
    if isinstance(x, (list, tuple)):
        return list(x)
    if isinstance(x, str):
        return [v for v in x.replace(",", " ").split()]
    return [x]


def _parse_value(v: str):
    try:
        return json.loads(v)
    except (json.JSONDecodeError, TypeError):
        return v


# --------------------------------------------------------------------------
# Instance construction
# --------------------------------------------------------------------------


def build_constraint(cfg: dict, p: int) -> ConstraintSet:
    kind = cfg.get("kind", "l2_ball")
    if kind == "l2_ball":
        return L2Ball(np.zeros(p), float(cfg.get("radius", 1.0)))
    if kind == "box":
        return Box.cube(p, float(cfg.get("half_width", 1.0)))
    raise ValidationError(f"unknown constraint kind {kind!r}")


def build_loss(name: str, params: dict, constraint: ConstraintSet, p: int) -> LossModel:
    if name == "quadratic":
        return make_quadratic_loss(p, constraint, float(params.get("data_radius", 0.5)))
    if name == "abs_linear":
        return make_abs_linear_loss(p)
    if name == "distance":
        return make_distance_loss(p)
    raise ValidationError(f"unknown loss {name!r}")


def data_sampler(loss_name: str, loss_params: dict, data_cfg: dict, p: int):
    """Sampler ``(rng, count) -> records`` for the synthetic data distribution.

    Quadratic and distance losses use ``N(mu, std^2 I)`` restricted to a ball
    around ``mu`` (so the mean stays ``mu``) of radius ``data_radius - ||mu||``;
    the abs-linear loss uses unit directions of ``N(mu, I)``.
    """
    mu = np.broadcast_to(np.asarray(data_cfg.get("mean", 0.2), dtype=float), (p,)).copy()
    std = float(data_cfg.get("std", 0.3))
    if loss_name == "abs_linear":

        def sample(rng, count):
            z = rng.standard_normal((count, p)) + mu
            nrm = np.linalg.norm(z, axis=1, keepdims=True)
            nrm[nrm == 0] = 1.0
            return z / nrm

        return sample
    radius = float(loss_params.get("data_radius", 0.5)) - float(np.linalg.norm(mu))
    if loss_name == "distance" and "data_radius" not in loss_params:
        radius = math.inf
    if not radius > 0:
        raise ValidationError("data mean must lie strictly inside the data radius")

    def sample(rng, count):
        out = np.empty((0, p))
        while out.shape[0] < count:
            z = rng.standard_normal((2 * (count - out.shape[0]) + 8, p)) * std
            z = z[np.linalg.norm(z, axis=1) <= radius]
            out = np.concatenate([out, z + mu])
        return out[:count]

    return sample


def population_minimizer(loss_name: str, data_cfg: dict, constraint: ConstraintSet, p: int):
    """Closed-form population minimizer when one exists, else ``None``."""
    if loss_name == "quadratic":
        mu = np.broadcast_to(np.asarray(data_cfg.get("mean", 0.2), dtype=float), (p,))
        return constraint.project(mu)
    if loss_name == "abs_linear" and np.all(constraint.contains(np.zeros(p))):
        return np.zeros(p)
    return None


def run_mechanism(
    name: str,
    params: dict,
    loss: LossModel,
    dataset: Dataset,
    constraint: ConstraintSet,
    eps: float,
    delta: float,
    seed: int,
) -> np.ndarray:
    el = EmpiricalLoss(loss, dataset)
    steps = params.get("steps")
    if name == "convex_last_iterate":
        return diffusion.convex_last_iterate(el, constraint, eps, delta, seed, steps=steps).theta_priv
    if name == "sc_weighted_average":
        m = params.get("m", (loss.strong_convexity_m or 0.0) / 2.0)
        return diffusion.sc_weighted_average(el, constraint, m, eps, delta, seed, steps=steps).theta_priv
    if name == "smooth_sc_last_iterate":
        m = params.get("m", loss.strong_convexity_m)
        M = params.get("M", loss.smoothness_M)
        lam = params.get("lambda_const", 1.0)
        return diffusion.smooth_sc_last_iterate(
            el, constraint, m, M, eps, delta, lam, seed, steps=steps
        ).theta_priv
    sampler = params.get("sampler", "grid_oracle")
    if name == "exponential_mechanism":
        return mechanisms.exponential_mechanism(loss, dataset, constraint, eps, sampler, seed).theta_priv
    if name == "iterated_exponential_mechanism":
        m = params.get("m", loss.strong_convexity_m)
        c = params.get("c_const", 4.0)
        return mechanisms.iterated_exponential_mechanism(
            loss, dataset, constraint, m, eps, c, sampler, seed
        ).theta_priv
    if name == "regularized_sco_pure":
        return mechanisms.regularized_sco_pure(
            loss, dataset, constraint, eps, sampler, seed, m=params.get("m")
        ).theta_priv
    if name == "sco_approx_dp":
        return mechanisms.sco_approx_dp(
            loss, dataset, constraint, eps, delta, params.get("variant", "convex"), seed,
            m=params.get("m"), steps=steps,
        ).theta_priv
    if name == "dp_sgd":
        return mechanisms.dp_sgd(
            loss, dataset, constraint, eps, delta, int(params.get("steps_T", 100)),
            float(params.get("eta", 0.01)), seed,
        ).theta_priv
    raise ValidationError(f"unknown mechanism {name!r}")


# --------------------------------------------------------------------------
# Running and reporting
# --------------------------------------------------------------------------


@dataclass
class CellResult:
    cell: int
    mechanism: str
    loss: str
    n: int
    p: int
    eps: float
    delta: float
    trials: int
    failures: int
    mean_excess_empirical_risk: float
    median_excess_empirical_risk: float
    std_error_empirical: float
    mean_excess_population_risk: Optional[float]
    std_error_population: Optional[float]
    error: str
    empirical_risks: list = field(default_factory=list)
    population_risks: list = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in CSV_COLUMNS}


@dataclass
class RiskReport:
    spec: ExperimentSpec
    cells: list

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "cells": [_clean(asdict(c)) for c in self.cells],
            "csv_columns": CSV_COLUMNS,
        }

    def write_csv(self, target) -> None:
        """Write to a path or an open text stream."""
        if hasattr(target, "write"):
            self._csv_rows(target)
            return
        with open(target, "w", newline="") as fh:
            self._csv_rows(fh)

    def _csv_rows(self, fh) -> None:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for c in self.cells:
            w.writerow({k: _fmt(v) for k, v in c.row().items()})

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def median(self, n: int, p: Optional[int] = None, eps: Optional[float] = None) -> float:
        for c in self.cells:
            if c.n == n and (p is None or c.p == p) and (eps is None or c.eps == eps):
                return c.median_excess_empirical_risk
        raise KeyError((n, p, eps))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def schema() -> dict:
    """The JSON schema that :meth:`RiskReport.write_json` output satisfies."""
    text = resources.files(__package__).joinpath("report_schema.json").read_text()
    return json.loads(text)


def _run_cell(spec: ExperimentSpec, cell_idx: int, pi: int, p: int, n: int, eps: float) -> CellResult:
    constraint = build_constraint(spec.constraint, p)
    loss = build_loss(spec.loss, spec.loss_params, constraint, p)
    sampler = data_sampler(spec.loss, spec.loss_params, spec.data, p)
    pop_min = population_minimizer(spec.loss, spec.data, constraint, p)
    n_max = max(spec.n_grid)
    emp, pop, errors = [], [], []
    for t in range(spec.trials):
        data_rng = np.random.default_rng(derive_seed(spec.seed, 2, pi, t))
        records = sampler(data_rng, n_max)[:n]
        mech_seed = (
            derive_seed(spec.seed, 1, t) if spec.paired else derive_seed(spec.seed, 1, cell_idx, t)
        )
        try:
            ds = Dataset(records)
            theta = run_mechanism(
                spec.mechanism, spec.mechanism_params, loss, ds, constraint, eps, spec.delta, mech_seed
            )
            emp.append(excess_empirical_risk(theta, EmpiricalLoss(loss, ds), constraint))
            if spec.population_holdout and pop_min is not None:
                est = excess_population_risk(
                    theta, loss, sampler, spec.population_holdout, pop_min,
                    derive_seed(spec.seed, 3, pi, t),
                )
                pop.append(est.estimate)
        except LangevinDPError as exc:
            errors.append(f"trial {t}: {exc}")
    k = len(emp)
    arr = np.asarray(emp)
    mean = float(arr.mean()) if k else math.nan
    med = float(np.median(arr)) if k else math.nan
    se = float(arr.std(ddof=1) / math.sqrt(k)) if k > 1 else math.nan
    pop_mean = float(np.mean(pop)) if pop else None
    pop_se = float(np.std(pop, ddof=1) / math.sqrt(len(pop))) if len(pop) > 1 else None
    return CellResult(
        cell_idx, spec.mechanism, spec.loss, n, p, eps, spec.delta, spec.trials, len(errors),
        mean, med, se, pop_mean, pop_se, errors[0] if errors else "",
        [float(x) for x in emp], [float(x) for x in pop],
    )


def run_experiment(spec: ExperimentSpec, csv_path=None, json_path=None) -> RiskReport:
    """Run every grid cell and optionally write the CSV and JSON reports.

    When ``spec.output_path`` is set and no explicit paths are given, the
    reports go to ``<output_path>/report.csv`` and ``report.json``.
    """
    cells = spec.cells()
    args = [(spec, c, pi, p, n, eps) for c, pi, p, n, eps in cells]
    if spec.workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as ex:
            results = list(ex.map(_run_cell_star, args))
    else:
        results = [_run_cell(*a) for a in args]
    report = RiskReport(spec, results)
    if spec.output_path and csv_path is None and json_path is None:
        out = Path(spec.output_path)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "report.csv", out / "report.json"
    if csv_path is not None:
        report.write_csv(csv_path)
    if json_path is not None:
        report.write_json(json_path)
    return report


def _run_cell_star(a):
    return _run_cell(*a)
