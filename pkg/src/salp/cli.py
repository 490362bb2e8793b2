"""Command-line entry point (``salp``).

Exit codes: 0 success, 1 usage or input error, 2 bound-check failure, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

# single-threaded BLAS; parallelism lives in the numba kernels
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402

EXIT_OK, EXIT_INPUT, EXIT_BOUND, EXIT_SOLVER = 0, 1, 2, 3


def _load_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".json":
        return np.array(json.loads(path.read_text()), dtype=float)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _basis(args, model):
    from .harness import random_basis

    if args.basis:
        Phi = _load_matrix(args.basis)
    else:
        Phi = random_basis(model.n_states, args.K, np.random.default_rng(args.basis_seed))
    return Phi


def _nu(args, n):
    return np.full(n, 1.0 / n) if args.nu is None else np.asarray(_load_matrix(args.nu), dtype=float).ravel()


def _emit(obj, out) -> None:
    from .harness import _json_default

    text = json.dumps(obj, indent=2, default=_json_default)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_solve_exact(args) -> int:
    from .mdp import greedy_policy, load_mdp, optimal_values, solve_exact_lp

    model = load_mdp(args.mdp)
    J = solve_exact_lp(model, _nu(args, model.n_states)) if args.lp else optimal_values(model)
    _emit({"values": J, "policy": greedy_policy(J, model)}, args.out)
    return EXIT_OK


def cmd_solve_alp(args) -> int:
    from .formulations import BasisSet, solve_alp
    from .mdp import load_mdp

    model = load_mdp(args.mdp)
    Phi = _basis(args, model)
    nu = _nu(args, model.n_states)
    r = solve_alp(model, BasisSet.from_matrix(Phi), nu)
    _emit({"weights": r, "objective": float(nu @ Phi @ r), "approximation": Phi @ r}, args.out)
    return EXIT_OK


def cmd_solve_salp(args) -> int:
    from .formulations import BasisSet, solve_salp, solve_salp_penalty
    from .mdp import greedy_policy, load_mdp, occupancy, optimal_values

    model = load_mdp(args.mdp)
    Phi = _basis(args, model)
    nu = _nu(args, model.n_states)
    basis = BasisSet.from_matrix(Phi)
    if args.pi == "optimal":
        pi = occupancy(model, greedy_policy(optimal_values(model), model), nu)
    elif args.pi == "uniform":
        pi = np.full(model.n_states, 1.0 / model.n_states)
    else:
        pi = np.asarray(_load_matrix(args.pi), dtype=float).ravel()
    if args.theta is None:
        sol = solve_salp_penalty(model, basis, nu, pi)
    else:
        sol = solve_salp(model, basis, nu, pi, args.theta)
    _emit({"weights": sol.weights, "slacks": sol.slacks, "objective": sol.objective,
           "budget_used": sol.budget_used, "theta": sol.theta}, args.out)
    return EXIT_OK


def cmd_sample_states(args) -> int:
    from .sampling import ExplicitEnv, sample_baseline_states, sample_occupancy_exact, save_samples

    if args.env == "tetris":
        from .tetris import BASELINE_WEIGHTS, TetrisEnv

        samples = sample_baseline_states(TetrisEnv(args.discount), BASELINE_WEIGHTS, args.S, args.burn_in,
                                         args.stride, args.seed)
    else:
        from .mdp import greedy_policy, load_mdp, optimal_values

        if not args.mdp:
            raise ValueError("--mdp is required for explicit models")
        model = load_mdp(args.mdp)
        policy = greedy_policy(optimal_values(model), model)
        nu = _nu(args, model.n_states)
        if args.exact:
            samples = sample_occupancy_exact(model, policy, nu, args.S, args.seed)
        else:
            samples = sample_baseline_states(ExplicitEnv(model, nu), policy, args.S, args.burn_in, args.stride,
                                             args.seed)
    save_samples(samples, args.out)
    print(f"wrote {samples.S} states to {args.out}")
    return EXIT_OK


def cmd_eval_policy(args) -> int:
    from .harness import apply_thread_limit, eval_policy
    from .tetris import BASELINE_WEIGHTS

    apply_thread_limit()
    if args.weights == "baseline":
        policy = BASELINE_WEIGHTS
    elif args.weights == "random":
        policy = "random"
    else:
        policy = np.asarray(_load_matrix(args.weights), dtype=float).ravel()
    res = eval_policy(policy, args.games, args.seed, args.discount, scores_path=args.scores)
    _emit(res.summary(), args.out)
    return EXIT_OK


def _config(args):
    from .harness import ExperimentConfig

    cfg = ExperimentConfig.from_toml(args.config) if args.config else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in ("S", "eval_games", "output_dir") if getattr(args, k, None) is not None}
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    if overrides:
        data = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
        data.update(overrides)
        cfg = ExperimentConfig.from_dict(data)
    return cfg


def cmd_tetris_experiment(args) -> int:
    from .harness import run_tetris_pipeline

    summary = run_tetris_pipeline(_config(args))
    print(f"ALP mean {summary['alp_mean']:.1f}  best SALP theta {summary['best_salp_theta']} "
          f"mean {summary['best_salp_mean']:.1f}")
    failed = [e for e in summary["per_seed"] if e["status"] != "ok" or e.get("failed_thetas")]
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_bounds_report(args) -> int:
    from .harness import format_report_table, run_bounds_pipeline

    cfg = _config(args)
    reports, code = run_bounds_pipeline(cfg)
    print(format_report_table(reports))
    print(f"{sum(r.passed for r in reports)}/{len(reports)} checks passed; "
          f"JSON in {Path(cfg.output_dir) / 'bounds_report.json'}")
    return code


def cmd_sample_curve(args) -> int:
    from .harness import run_sample_complexity_curve

    res = run_sample_complexity_curve(_config(args))
    for row in res["rows"]:
        print(f"S={row['S']:>6}  median gap {row['median_gap']:.3e}  median error {row['median_error']:.4f}")
    print(f"exhaustive gap {res['exhaustive_gap']:.2e}; formula S for eps={res['epsilon']}, "
          f"delta={res['delta']}: {res['formula_S']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="salp", description="Smoothed approximate linear programming toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp, basis=True):
        sp.add_argument("--mdp", required=True, help="JSON model file")
        sp.add_argument("--nu", help="state-relevance weights (csv/json/npy); uniform by default")
        if basis:
            sp.add_argument("--basis", help="basis matrix (csv/json/npy); random by default")
            sp.add_argument("--K", type=int, default=6, help="random basis size incl. the constant column")
            sp.add_argument("--basis-seed", type=int, default=0)
        sp.add_argument("--out", help="write JSON here instead of stdout")

    sp = sub.add_parser("solve-exact", help="optimal values and policy of an explicit model")
    model_args(sp, basis=False)
    sp.add_argument("--lp", action="store_true", help="use the exact LP instead of value iteration")
    sp.set_defaults(func=cmd_solve_exact)

    sp = sub.add_parser("solve-alp", help="approximate LP weights")
    model_args(sp)
    sp.set_defaults(func=cmd_solve_alp)

    sp = sub.add_parser("solve-salp", help="smoothed approximate LP weights")
    model_args(sp)
    sp.add_argument("--theta", type=float, help="violation budget; omit for the penalty form")
    sp.add_argument("--pi", default="optimal", help="'optimal', 'uniform' or a weights file")
    sp.set_defaults(func=cmd_solve_salp)

    sp = sub.add_parser("sample-states", help="draw a state sample and write NDJSON")
    sp.add_argument("--env", choices=["tetris", "explicit-mdp"], default="tetris")
    sp.add_argument("--mdp")
    sp.add_argument("--nu")
    sp.add_argument("--exact", action="store_true", help="i.i.d. occupancy draws (explicit models)")
    sp.add_argument("-S", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--burn-in", type=int, default=50)
    sp.add_argument("--stride", type=int, default=20)
    sp.add_argument("--discount", type=float, default=0.9)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample_states)

    sp = sub.add_parser("eval-policy", help="mean lines cleared over common piece sequences")
    sp.add_argument("--weights", default="baseline", help="'baseline', 'random' or a 22-entry weights file")
    sp.add_argument("--games", type=int, default=500)
    sp.add_argument("--seed", type=int, default=20240101)
    sp.add_argument("--discount", type=float, default=0.9)
    sp.add_argument("--scores", help="write per-game scores here")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval_policy)

    for name, func, help_ in (("tetris-experiment", cmd_tetris_experiment, "sample, theta sweep, evaluate"),
                              ("bounds-report", cmd_bounds_report, "certify the error bounds on random models"),
                              ("sample-curve", cmd_sample_curve, "sampled-program convergence in S")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("-S", type=int)
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--eval-games", type=int)
        sp.add_argument("--output-dir")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    from .lp import LpError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LpError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
