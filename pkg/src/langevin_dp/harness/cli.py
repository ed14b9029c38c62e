"""Command-line entry point ``langevin-dp``.

Exit codes: 0 on success, 1 on invalid input, 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .. import accountant, diffusion, mechanisms
from ..errors import ValidationError
from ..model import (
    ConstantSchedule,
    Dataset,
    EmpiricalLoss,
    L2Ball,
    Box,
    PowerSchedule,
    greedy_packing_centers,
    make_distance_loss,
    make_packing_loss,
    make_quadratic_loss,
)
from .experiment import ExperimentSpec, derive_seed, run_experiment
from .risk import measure_uniform_stability, nonconvergence_diagnostic


def _global_parent() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=argparse.SUPPRESS, help="INI-style key-value experiment file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (u64)")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    g.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS)
    g.add_argument("--trials", type=int, default=argparse.SUPPRESS)
    return g


def build_parser() -> argparse.ArgumentParser:
    parent = _global_parent()
    ap = argparse.ArgumentParser(prog="langevin-dp", parents=[parent], description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def grid_args(sp, mechanism, loss):
        sp.add_argument("--mechanism", default=mechanism, choices=list(_mechs()))
        sp.add_argument("--loss", default=loss, choices=("quadratic", "abs_linear", "distance"))
        sp.add_argument("--n", type=int, nargs="+", default=[250, 500, 1000])
        sp.add_argument("--p", type=int, nargs="+", default=[2])
        sp.add_argument("--eps", type=float, nargs="+", default=[1.0])
        sp.add_argument("--delta", type=float, default=1e-5)
        sp.add_argument("--radius", type=float, default=1.0, help="L2-ball constraint radius")
        sp.add_argument("--data-radius", type=float, default=0.5)
        sp.add_argument("--data-mean", type=float, default=0.2)
        sp.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                        help="mechanism parameter (repeatable)")
        sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("erm", parents=[parent], help="excess empirical risk grid experiment")
    grid_args(sp, "convex_last_iterate", "abs_linear")
    sp = sub.add_parser("sco", parents=[parent], help="population risk grid experiment")
    grid_args(sp, "sco_approx_dp", "quadratic")
    sp.add_argument("--holdout", type=int, default=10_000)

    sp = sub.add_parser("expmech", parents=[parent], help="single exponential-mechanism run")
    sp.add_argument("--variant", choices=("basic", "iterated", "regularized"), default="basic")
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--p", type=int, default=2)
    sp.add_argument("--eps", type=float, default=1.0)
    sp.add_argument("--sampler", choices=mechanisms.SAMPLERS, default="grid_oracle")
    sp.add_argument("--c-const", type=float, default=4.0)

    sp = sub.add_parser("accountant", parents=[parent], help="print an RDP curve and its (eps, delta)")
    sp.add_argument("--curve", choices=("finite", "short", "long"), default="finite")
    sp.add_argument("--delta-grad", type=float, required=True)
    sp.add_argument("--T", type=float, required=True)
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--power", type=float, default=None, help="use beta_t = t^a instead of constant beta")
    sp.add_argument("--m", type=float, default=1.0)
    sp.add_argument("--M", type=float, default=1.0)
    sp.add_argument("--R", type=float, default=1.0)
    sp.add_argument("--p", type=int, default=1)
    sp.add_argument("--stationary", type=float, default=0.0,
                    help="coefficient s of a linear stationary divergence s * alpha")
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.add_argument("--alphas", type=float, nargs="+", default=[1.5, 2, 4, 8, 16, 32, 64])

    sp = sub.add_parser("phase", parents=[parent], help="phase-transition time of the RDP bounds")
    for name, default in (("m", 1.0), ("M", 1.0), ("beta", 1.0), ("R", 1.0), ("delta-grad", 1.0)):
        sp.add_argument(f"--{name}", type=float, default=default)
    sp.add_argument("--p", type=int, default=1)
    sp.add_argument("--alpha", type=float, default=2.0)
    sp.add_argument("--stationary", type=float, default=0.0)

    sp = sub.add_parser("diagnose", parents=[parent], help="non-convergence diagnostic for ||theta||")
    sp.add_argument("--p", type=int, nargs="+", default=[16, 64])
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--eps", type=float, default=1.0)
    sp.add_argument("--delta", type=float, default=1e-5)

    sp = sub.add_parser("stability", parents=[parent], help="uniform stability of the regularized mechanism")
    sp.add_argument("--n", type=int, nargs="+", default=[50, 100])
    sp.add_argument("--m", type=float, default=0.5)
    sp.add_argument("--eps", type=float, default=1.0)

    sp = sub.add_parser("lowerbound-loss", parents=[parent], help="packing loss instance")
    sp.add_argument("--p", type=int, default=2)
    sp.add_argument("--alpha", type=float, default=0.25)
    sp.add_argument("--max-count", type=int, default=32)
    sp.add_argument("--n", type=int, default=100)
    return ap


def _mechs():
    from .experiment import MECHANISMS

    return MECHANISMS


def _parse_params(items):
    out = {}
    for it in items:
        if "=" not in it:
            raise ValidationError(f"--param expects KEY=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _emit(args, rows: list[dict], name: str, out=None):
    """Print rows in the chosen format and mirror them into ``--out`` when given."""
    fmt = getattr(args, "format", "csv")
    if fmt == "json":
        text = json.dumps(rows, indent=2, default=_json_default) + "\n"
    else:
        buf = io.StringIO()
        keys = list(rows[0].keys()) if rows else []
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_value(v) for k, v in r.items()})
        text = buf.getvalue()
    (out or sys.stdout).write(text)
    od = getattr(args, "out", None)
    if od:
        Path(od).mkdir(parents=True, exist_ok=True)
        (Path(od) / f"{name}.{fmt}").write_text(text)


def _csv_value(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return json.dumps(np.asarray(v).tolist())
    if v is None:
        return ""
    return v


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def cmd_grid(args, population: bool):
    overrides = {"seed": getattr(args, "seed", None), "trials": getattr(args, "trials", None)}
    if hasattr(args, "config"):
        spec = ExperimentSpec.from_config(args.config, overrides)
    else:
        spec = ExperimentSpec(
            mechanism=args.mechanism,
            loss=args.loss,
            n_grid=args.n,
            p_grid=args.p,
            eps_grid=args.eps,
            delta=args.delta,
            trials=getattr(args, "trials", 50),
            seed=getattr(args, "seed", 0),
            mechanism_params=_parse_params(args.param),
            loss_params={"data_radius": args.data_radius},
            constraint={"kind": "l2_ball", "radius": args.radius},
            data={"mean": args.data_mean, "std": 0.3},
            population_holdout=args.holdout if population else 0,
            workers=args.workers,
        )
    fmt = getattr(args, "format", "csv")
    od = getattr(args, "out", None)
    csv_path = json_path = None
    if od:
        Path(od).mkdir(parents=True, exist_ok=True)
        csv_path = Path(od) / "report.csv" if fmt == "csv" else None
        json_path = Path(od) / "report.json" if fmt == "json" else None
    report = run_experiment(spec, csv_path, json_path)
    if fmt == "json":
        sys.stdout.write(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    else:
        buf = io.StringIO()
        report.write_csv(buf)
        sys.stdout.write(buf.getvalue())
    return 0


def _quad_instance(n, p, seed, radius=1.0, data_radius=0.5, mean=0.2):
    from .experiment import data_sampler

    ball = L2Ball(np.zeros(p), radius)
    loss = make_quadratic_loss(p, ball, data_radius)
    sampler = data_sampler("quadratic", {"data_radius": data_radius}, {"mean": mean / math.sqrt(p), "std": 0.3}, p)
    data = Dataset(sampler(np.random.default_rng(derive_seed(seed, 2, 0, 0)), n))
    return ball, loss, data


def cmd_expmech(args):
    seed = getattr(args, "seed", 0)
    ball, loss, data = _quad_instance(args.n, args.p, seed)
    if args.variant == "basic":
        rep = mechanisms.exponential_mechanism(loss, data, ball, args.eps, args.sampler, seed)
    elif args.variant == "iterated":
        rep = mechanisms.iterated_exponential_mechanism(
            loss, data, ball, loss.strong_convexity_m, args.eps, args.c_const, args.sampler, seed
        )
    else:
        rep = mechanisms.regularized_sco_pure(loss, data, ball, args.eps, args.sampler, seed)
    text = rep.to_json(indent=2) + "\n"
    sys.stdout.write(text)
    od = getattr(args, "out", None)
    if od:
        Path(od).mkdir(parents=True, exist_ok=True)
        (Path(od) / "mechanism_report.json").write_text(text)
    return 0


def cmd_accountant(args):
    if args.curve == "finite":
        sched = PowerSchedule(args.power) if args.power is not None else ConstantSchedule(args.beta)
        curve = accountant.rdp_finite_time(args.delta_grad, sched, args.T)
    elif args.curve == "short":
        curve = accountant.rdp_short_term_sc(args.delta_grad, args.beta, args.m, args.T)
    else:
        params = accountant.ScBoundParams(args.m, args.M, args.R, args.beta, args.delta_grad, args.p)
        s = args.stationary
        curve = accountant.rdp_long_term_sc(params, lambda a: s * a, args.T)
    rows = [{"alpha": a, "bound": b} for a, b in curve.table(args.alphas)]
    conv = accountant.rdp_to_approx_dp(curve, args.delta)
    _emit(args, rows, "curve")
    sys.stdout.write(f"# (eps, delta) = ({conv.eps!r}, {args.delta!r}) at alpha = {conv.alpha!r}\n")
    return 0


def cmd_phase(args):
    params = accountant.ScBoundParams(args.m, args.M, args.R, args.beta, args.delta_grad, args.p)
    s = args.stationary
    res = accountant.phase_transition_time(params, lambda a: s * a, args.alpha)
    if res is None:
        row = {"T_star": None, "t0": params.t0(args.alpha), "approximation": None}
    else:
        row = res._asdict()
    _emit(args, [row], "phase")
    return 0


def cmd_diagnose(args):
    seed = getattr(args, "seed", 0)
    trials = getattr(args, "trials", 100)
    rows = []
    for p in args.p:
        ball = L2Ball(np.zeros(p), 1.0)
        loss = make_distance_loss(p)
        el = EmpiricalLoss(loss, Dataset(np.zeros((1, p))))
        T = 1.0 / (100 * p)
        beta = diffusion.calibrate_constant_beta(args.eps, args.delta, 1.0, args.n, T)
        start = np.zeros(p)
        start[0] = 1.0
        nets = []
        for t in range(trials):
            cfg = diffusion.DiffusionConfig(
                ConstantSchedule(beta), T, diffusion.steps_for(el, ConstantSchedule(beta), T),
                derive_seed(seed, 4, p, t), start,
            )
            rec = nonconvergence_diagnostic(diffusion.run_pld(el, ball, cfg), ball, beta)
            nets.append(rec.net_displacement)
        rows.append({"p": p, "T": T, "beta": beta, "median_net_displacement": float(np.median(nets))})
    _emit(args, rows, "diagnose")
    return 0


def cmd_stability(args):
    seed = getattr(args, "seed", 0)
    trials = getattr(args, "trials", 2000)
    rows = []
    C = Box.cube(1, 0.5)
    loss = make_quadratic_loss(1, C, 0.5)
    probes = np.linspace(-0.5, 0.5, 11)[:, None]
    for n in args.n:
        rng = np.random.default_rng(derive_seed(seed, 5, n))
        pts = rng.uniform(-0.5, 0.5, (n, 1))
        pts[0] = 0.5
        data = Dataset(pts)

        def mech(ds, s):
            return mechanisms.regularized_sco_pure(loss, ds, C, args.eps, "grid_oracle", s, m=args.m).theta_priv

        est = measure_uniform_stability(mech, loss, data, probes, trials, seed, replacement=[-0.5])
        rows.append({"n": n, "m": args.m, "gap": est.gap, "std_error": est.std_error,
                     "bound": 2 * loss.lipschitz_L**2 / (args.m * n)})
    _emit(args, rows, "stability")
    return 0


def cmd_lowerbound(args):
    seed = getattr(args, "seed", 0)
    centers = greedy_packing_centers(args.p, args.alpha, args.max_count, seed)
    rng = np.random.default_rng(derive_seed(seed, 6))
    bits = (rng.random((args.n, centers.shape[0])) < 0.5).astype(float)
    data = Dataset(bits)
    loss = make_packing_loss(args.alpha, centers, data)
    el = EmpiricalLoss(loss, data)
    vals = el.value(centers)
    rows = [{"center": j, "coords": centers[j], "loss": float(vals[j])} for j in range(len(centers))]
    od = getattr(args, "out", None)
    if od:
        Path(od).mkdir(parents=True, exist_ok=True)
        data.save(Path(od) / "packing_dataset.txt", bits=True)
        np.savetxt(Path(od) / "packing_centers.txt", centers, delimiter=",")
    _emit(args, rows, "packing_loss")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "erm":
            return cmd_grid(args, population=False)
        if args.command == "sco":
            return cmd_grid(args, population=True)
        handlers = {
            "expmech": cmd_expmech,
            "accountant": cmd_accountant,
            "phase": cmd_phase,
            "diagnose": cmd_diagnose,
            "stability": cmd_stability,
            "lowerbound-loss": cmd_lowerbound,
        }
        return handlers[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ArithmeticError as exc:  # NumericalError and float overflow
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
