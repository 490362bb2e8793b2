"""Experiment pipelines: Tetris line search, bound certification sweeps and
sample-size curves, plus Monte Carlo policy evaluation with common random
numbers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import bounds
from .formulations import (CSV_COLUMNS, DEFAULT_THETA_SCHEDULE, BasisSet, ExplicitConstraints, build_sampled_salp,
                           solve_alp, solve_salp, solve_salp_penalty, theta_line_search)
from .lp import LpError
from .mdp import MdpModel, dumps_mdp, greedy_policy, loads_mdp, load_mdp, occupancy, optimal_values, random_mdp
from .sampling import episode_key, estimate_B, sample_baseline_states, sample_occupancy_exact, sample_size_bound
from .structured import DEFAULT_BOX, solve_salp_structured

log = logging.getLogger(__name__)

DIGEST_PIECES = 256


def apply_thread_limit() -> int:
    """Cap numba's worker threads at SALP_THREADS (if set); returns the count in use."""
    import numba

    limit = os.environ.get("SALP_THREADS")
    n = numba.config.NUMBA_NUM_THREADS
    if limit:
        n = max(1, min(int(limit), n))
        numba.set_num_threads(n)
    return numba.get_num_threads()


# -- configuration -----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    env: str = "tetris"  # "tetris" | "explicit-mdp"
    mdp_path: str | None = None
    S: int = 5000
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    theta_schedule: list = field(default_factory=lambda: list(DEFAULT_THETA_SCHEDULE))
    eval_games: int = 500
    eval_seed: int = 20240101
    baseline: str | list = "default"
    discount: float = 0.9
    burn_in: int = 50
    stride: int = 20
    max_steps: int = 10_000_000
    box: float = DEFAULT_BOX
    tol: float = 1e-8
    max_iter: int = 500
    output_dir: str = "results"
    # bound sweeps
    n_instances: int = 50
    n_states: int = 30
    n_actions: int = 4
    discounts: list = field(default_factory=lambda: [0.8, 0.95])
    K: int = 6
    bound_thetas: list = field(default_factory=lambda: [0.0, 0.001, 0.01, 0.05, 0.2, 1.0])
    include_identity: bool = True
    # sample-size curves
    curve_states: int = 200
    curve_actions: int = 4
    curve_discount: float = 0.9
    curve_K: int = 6
    curve_sizes: list = field(default_factory=lambda: [100, 1000, 10000])
    curve_seeds: int = 10
    curve_epsilon: float = 0.1
    curve_delta: float = 0.1
    instance_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.env not in ("tetris", "explicit-mdp"):
            raise ValueError(f"unknown env {self.env!r}")
        if self.env == "explicit-mdp" and not self.mdp_path:
            raise ValueError("explicit-mdp env needs mdp_path")
        for name in ("S", "eval_games", "burn_in", "stride", "max_steps", "max_iter", "n_instances", "n_states",
                     "n_actions", "K", "curve_states", "curve_actions", "curve_K", "curve_seeds"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.seeds:
            raise ValueError("need at least one seed")
        sched = [float(t) for t in self.theta_schedule]
        if not sched or sched[0] != 0.0 or any(b <= a for a, b in zip(sched, sched[1:])):
            raise ValueError("theta schedule must start at 0 and be strictly increasing")
        if any(s < 1 for s in self.curve_sizes):
            raise ValueError("curve sizes must be positive")
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data.get("experiment", data))

    def baseline_weights(self) -> np.ndarray:
        from .tetris import BASELINE_WEIGHTS, N_FEATURES

        if isinstance(self.baseline, str):
            if self.baseline != "default":
                raise ValueError(f"unknown baseline {self.baseline!r}")
            return BASELINE_WEIGHTS.copy()
        w = np.asarray(self.baseline, dtype=float)
        if w.shape != (N_FEATURES,):
            raise ValueError(f"baseline weights need {N_FEATURES} entries")
        return w


# -- output helpers -------------------------------------------------------------------

def load_schema(name: str) -> dict:
    return json.loads(resources.files("salp").joinpath("schemas").joinpath(f"{name}.json").read_text())


def validate_output(obj, schema_name: str) -> None:
    import jsonschema

    jsonschema.validate(obj, load_schema(schema_name))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(obj, path, schema_name: str | None = None) -> None:
    obj = json.loads(json.dumps(obj, default=_json_default))
    if schema_name:
        validate_output(obj, schema_name)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(rows, columns, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


# -- policy evaluation ------------------------------------------------------------------

@dataclass
class EvaluationResult:
    policy_id: str
    mean: float
    stderr: float
    games: int
    seed: int
    scores: np.ndarray = field(repr=False)
    piece_digests: list = field(default_factory=list, repr=False)
    scores_path: str | None = None

    def summary(self) -> dict:
        return {"policy_id": self.policy_id, "mean": self.mean, "stderr": self.stderr, "games": self.games,
                "seed": self.seed, "scores_path": self.scores_path}


def game_keys(master_seed: int, games: int) -> np.ndarray:
    """Per-game piece-stream keys, a function of (master_seed, game index) only."""
    return np.array([episode_key(master_seed, g) for g in range(games)], dtype=np.uint64)


def piece_digest(key) -> str:
    from .tetris import piece_stream

    return hashlib.sha256(piece_stream(int(key), DIGEST_PIECES).astype(np.int8).tobytes()).hexdigest()[:16]


def _policy_id(policy) -> str:
    if isinstance(policy, str):
        return policy
    if callable(policy):
        return getattr(policy, "__name__", "callback")
    return "w:" + hashlib.sha256(np.asarray(policy, dtype=float).tobytes()).hexdigest()[:12]


def eval_policy(policy, games: int, master_seed: int, discount: float = 0.9, max_steps: int = 10_000_000,
                scores_path=None, policy_id: str | None = None) -> EvaluationResult:
    """Mean lines over ``games`` games whose piece sequences depend only on (master_seed, game)."""
    from .tetris import engine, play_episode

    if games < 1:
        raise ValueError("games must be positive")
    keys = game_keys(master_seed, games)
    if isinstance(policy, (str,)) or callable(policy):
        scores = np.array([play_episode(policy, int(k), max_steps, discount).lines for k in keys], dtype=float)
    else:
        r = np.asarray(policy, dtype=float)
        lines, _, _ = engine.play_greedy_many(r, float(discount), keys, int(max_steps))
        scores = lines.astype(float)
    mean = float(scores.mean())
    se = float(scores.std(ddof=1) / math.sqrt(games)) if games > 1 else 0.0
    if scores_path is not None:
        Path(scores_path).parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(scores_path, scores, fmt="%d")
    return EvaluationResult(policy_id or _policy_id(policy), mean, se, games, int(master_seed), scores,
                            [piece_digest(k) for k in keys], None if scores_path is None else str(scores_path))


# -- Tetris pipeline ----------------------------------------------------------------------

def run_tetris_pipeline(config: ExperimentConfig, out_dir=None) -> dict:
    """Sample, warm-started theta sweep, Monte Carlo evaluation and best-theta selection per seed."""
    from .tetris import TetrisConstraints, TetrisEnv

    if config.env != "tetris":
        raise ValueError("the line-search pipeline runs on the Tetris env")
    apply_thread_limit()
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    env = TetrisEnv(config.discount, config.max_steps)
    gen = TetrisConstraints(config.discount)
    baseline = config.baseline_weights()
    base_eval = eval_policy(baseline, config.eval_games, config.eval_seed, config.discount, config.max_steps,
                            policy_id="baseline")
    schedule = [float(t) for t in config.theta_schedule]
    per_seed = []
    table = {t: [] for t in schedule}
    for seed in config.seeds:
        entry = {"seed": int(seed), "status": "ok", "error": ""}
        try:
            samples = sample_baseline_states(env, baseline, config.S, config.burn_in, config.stride, seed)
            lp = build_sampled_salp(samples.states, gen, theta=0.0, discount=config.discount, box=config.box)

            def evaluate(r):
                res = eval_policy(r, config.eval_games, config.eval_seed, config.discount, config.max_steps)
                return res.mean, res.stderr

            best_theta, best_sol, rows = theta_line_search(lp, schedule, evaluate, tol=config.tol)
        except (LpError, RuntimeError, ValueError) as exc:
            log.error("seed %s failed: %s", seed, exc)
            entry.update(status="failed", error=str(exc))
            per_seed.append(entry)
            for t in schedule:
                table[t].append(math.nan)
            continue
        row_dicts = [asdict(r) for r in rows]
        write_csv(row_dicts, CSV_COLUMNS, out / f"line_search_seed{seed}.csv")
        for r in rows:
            table[r.theta].append(r.mean_score)
        entry.update(failed_thetas=[r.theta for r in rows if r.error], best_theta=best_theta,
                     weights=None if best_sol is None else best_sol.weights.tolist(),
                     distinct_states=int(lp.S), rows=row_dicts)
        per_seed.append(entry)
    fig2 = []
    for t in schedule:
        vals = np.array(table[t], dtype=float)
        ok = vals[~np.isnan(vals)]
        fig2.append({"theta": t, "S": int(config.S), "mean_score": float(ok.mean()) if ok.size else math.nan,
                     "n_seeds": int(ok.size), **{f"seed{s}": float(v) for s, v in zip(config.seeds, vals)}})
    write_csv(fig2, ["theta", "S", "mean_score", "n_seeds"] + [f"seed{s}" for s in config.seeds],
              out / "fig2_table.csv")
    summary = _tetris_summary(config, fig2, base_eval, per_seed, time.perf_counter() - t_start)
    write_json(summary, out / "summary.json", "tetris_summary")
    return summary


def _tetris_summary(config, fig2, base_eval, per_seed, wall) -> dict:
    scores = [row["mean_score"] for row in fig2]
    valid = [(i, s) for i, s in enumerate(scores) if not math.isnan(s)]
    alp = scores[0]
    pos = [(i, s) for i, s in valid if i > 0]
    best_i, best = max(pos, key=lambda p: p[1]) if pos else (None, math.nan)
    peak_i = max(valid, key=lambda p: p[1])[0] if valid else None
    rise_fall = (peak_i is not None and 0 < peak_i < len(scores) - 1
                 and not math.isnan(scores[-1]) and scores[-1] < scores[peak_i])
    return {
        "S": int(config.S),
        "seeds": [int(s) for s in config.seeds],
        "eval_games": int(config.eval_games),
        "baseline_mean": base_eval.mean,
        "baseline_stderr": base_eval.stderr,
        "alp_mean": alp,
        "best_salp_theta": None if best_i is None else fig2[best_i]["theta"],
        "best_salp_mean": best,
        "ratio_best_to_alp": best / alp if alp and not math.isnan(alp) and alp > 0 else None,
        "rises_then_falls": bool(rise_fall),
        "curve": [{"theta": r["theta"], "mean_score": r["mean_score"]} for r in fig2],
        "per_seed": [{k: v for k, v in e.items() if k != "rows"} for e in per_seed],
        "full_scale_reference": {"alp_best": 897, "salp_best": 10775},
        "wall_time_s": wall,
    }


# -- bound sweeps ----------------------------------------------------------------------------

def random_basis(n_states: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Constant column plus K-1 standard normal columns."""
    return np.column_stack([np.ones(n_states), rng.standard_normal((n_states, K - 1))])


def bound_instances(config: ExperimentConfig):
    """Yield (label, model, Phi, nu) for the sweep, reproducible from config.instance_seed."""
    for i in range(config.n_instances):
        rng = np.random.default_rng([config.instance_seed, i])
        alpha = float(config.discounts[i % len(config.discounts)])
        model = random_mdp(config.n_states, config.n_actions, alpha, rng)
        Phi = random_basis(config.n_states, config.K, rng)
        yield f"random-{i}", model, Phi, np.full(config.n_states, 1.0 / config.n_states)
    if config.include_identity:
        rng = np.random.default_rng([config.instance_seed, 10**6])
        model = random_mdp(config.n_states, config.n_actions, float(config.discounts[0]), rng)
        yield "identity", model, np.eye(config.n_states), np.full(config.n_states, 1.0 / config.n_states)


def certify_instance(model: MdpModel, Phi, nu, thetas, label: str = "") -> list[bounds.BoundReport]:
    """All bound checks on one instance."""
    reports: list[bounds.BoundReport] = []
    basis = BasisSet.from_matrix(Phi)
    J_star = optimal_values(model)
    pi = occupancy(model, greedy_policy(J_star, model), nu)
    for theta in thetas:
        reports.append(bounds.check_theorem1(model, Phi, nu, theta))
        sol = solve_salp(model, basis, nu, pi, theta)
        reports.append(bounds.check_lemma2(model, Phi @ sol.weights, sol.slacks, J_star))
    reports.extend(lemma1_reports(model, Phi, nu, thetas))
    reports.append(bounds.check_theorem2(model, Phi, nu))
    pen = solve_salp_penalty(model, basis, nu, pi)
    reports.append(bounds.check_lemma2(model, Phi @ pen.weights, pen.slacks, J_star))
    reports.append(bounds.check_theorem3(model, Phi @ pen.weights, nu, J_star))
    reports.append(bounds.check_theorem3(model, Phi @ solve_alp(model, basis, nu), nu, J_star))
    for r in reports:
        r.details["instance"] = label
    return reports


def lemma1_reports(model: MdpModel, Phi, nu, thetas) -> list[bounds.BoundReport]:
    """ell(r*, .) decreasing and convex on the grid, the sup-norm bound, and the right derivative."""
    J_star = optimal_values(model)
    pi = occupancy(model, greedy_policy(J_star, model), nu)
    r_star, _ = bounds.best_uniform_weights(model, Phi, J_star)
    J = Phi @ r_star
    grid = sorted(set(float(t) for t in thetas))
    vals = [bounds.ell(J, t, model, pi)[0] for t in grid]
    dg = bounds.digest(model.transitions, model.costs, J, grid)
    out = []
    inc = max((b - a for a, b in zip(vals, vals[1:])), default=0.0)
    out.append(bounds.BoundReport("lemma1-decreasing", inc, 0.0, 1e-9, dg))
    worst = 0.0
    for i in range(len(grid) - 2):
        t0, t2 = grid[i], grid[i + 2]
        mid = 0.5 * (t0 + t2)
        worst = max(worst, bounds.ell(J, mid, model, pi)[0] - 0.5 * (vals[i] + vals[i + 2]))
    out.append(bounds.BoundReport("lemma1-convex", worst, 0.0, 1e-9, dg))
    rhs = (1 + model.discount) / (1 - model.discount) * float(np.max(np.abs(J_star - J)))
    out.append(bounds.BoundReport("lemma1-supnorm", max(vals), rhs, bounds.default_tolerance(rhs), dg))
    _, deriv = bounds.u_salp_curve(model, Phi, nu, [])
    rel = abs(deriv["finite_difference"] - deriv["analytic"]) / abs(deriv["analytic"])
    out.append(bounds.BoundReport("lemma1-derivative", rel, 1e-5, 0.0, dg,
                                  {k: deriv[k] for k in ("analytic", "finite_difference", "delta")}))
    return out


def relevance_update(model: MdpModel, Phi, eta, theta: float, nu=None) -> tuple[np.ndarray, np.ndarray]:
    """One step of nu <- (1 - alpha) eta^T (I - alpha P_mu)^{-1} with mu greedy for the SALP fit at nu.

    Returns (weights, updated nu).  Iterating this is a heuristic with no
    convergence guarantee.
    """
    eta = np.asarray(eta, dtype=float)
    nu = eta if nu is None else np.asarray(nu, dtype=float)
    basis = BasisSet.from_matrix(Phi)
    pi = occupancy(model, greedy_policy(optimal_values(model), model), nu)
    r = solve_salp(model, basis, nu, pi, theta).weights
    return r, occupancy(model, greedy_policy(np.asarray(Phi) @ r, model), eta)


def save_replay(path, label, model: MdpModel, Phi, nu, thetas) -> None:
    write_json({"label": label, "mdp": json.loads(dumps_mdp(model)), "basis": np.asarray(Phi).tolist(),
                "nu": np.asarray(nu).tolist(), "thetas": list(thetas)}, path)


def replay_instance(path) -> list[bounds.BoundReport]:
    data = json.loads(Path(path).read_text())
    model = loads_mdp(json.dumps(data["mdp"]))
    return certify_instance(model, np.array(data["basis"]), np.array(data["nu"]), data["thetas"], data["label"])


def run_bounds_pipeline(config: ExperimentConfig, out_dir=None) -> tuple[list[bounds.BoundReport], int]:
    """Certify every bound on the configured instances; returns (reports, exit code)."""
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports: list[bounds.BoundReport] = []
    failed = []
    for label, model, Phi, nu in bound_instances(config):
        inst = certify_instance(model, Phi, nu, config.bound_thetas, label)
        reports.extend(inst)
        if not all(r.passed for r in inst):
            failed.append(label)
            save_replay(out / f"replay_{label}.json", label, model, Phi, nu, config.bound_thetas)
    write_json([r.as_dict() for r in reports], out / "bounds_report.json", "bound_reports")
    return reports, (2 if failed else 0)


def format_report_table(reports) -> str:
    lines = [f"{'instance':<12} {'check':<20} {'lhs':>14} {'rhs':>14} {'slack':>12}  ok"]
    for r in reports:
        lines.append(f"{r.details.get('instance', ''):<12} {r.name:<20} {r.lhs:>14.6g} {r.rhs:>14.6g} "
                     f"{r.slack:>12.3g}  {'yes' if r.passed else 'NO'}")
    return "\n".join(lines)


# -- sample-size curve ------------------------------------------------------------------------

def run_sample_complexity_curve(config: ExperimentConfig, out_dir=None) -> dict:
    """Sampled penalty-form SALP vs the full program as S grows."""
    out = Path(out_dir or config.output_dir)
    rng = np.random.default_rng([config.instance_seed, 7])
    if config.env == "explicit-mdp":
        model = load_mdp(config.mdp_path)
    else:
        model = random_mdp(config.curve_states, config.curve_actions, config.curve_discount, rng)
    n = model.n_states
    Phi = random_basis(n, config.curve_K, rng)
    basis = BasisSet.from_matrix(Phi)
    gen = ExplicitConstraints(model, basis)
    nu = np.full(n, 1.0 / n)
    J_star = optimal_values(model)
    mu_star = greedy_policy(J_star, model)
    pi = occupancy(model, mu_star, nu)
    full = solve_salp_penalty(model, basis, nu, pi)
    box = 2.0 * float(np.max(np.abs(full.weights))) + 1.0
    c_nu = Phi.T @ nu
    full_err = bounds.weighted_norm_1_nu(J_star - Phi @ full.weights, nu)

    rows = []
    for S in config.curve_sizes:
        gaps, errs = [], []
        for seed in range(config.curve_seeds):
            samples = sample_occupancy_exact(model, mu_star, nu, int(S), seed=seed)
            lp = build_sampled_salp(samples.states, gen, mode="penalty", objective_weights=c_nu, box=box)
            sol, _ = solve_salp_structured(lp, tol=config.tol, max_iter=config.max_iter)
            gaps.append(abs(sol.objective - full.objective))
            errs.append(bounds.weighted_norm_1_nu(J_star - Phi @ sol.weights, nu))
        rows.append({"S": int(S), "median_gap": float(np.median(gaps)), "max_gap": float(np.max(gaps)),
                     "median_error": float(np.median(errs)), "gaps": gaps, "errors": errs})
    medians = [r["median_gap"] for r in rows]
    monotone = all(b < a for a, b in zip(medians, medians[1:]))

    # every state once with uniform nu = pi reproduces the full program
    uniform = np.full(n, 1.0 / n)
    full_u = solve_salp_penalty(model, basis, uniform, uniform)
    lp_u = build_sampled_salp(np.arange(n), gen, mode="penalty", box=None)
    sol_u, _ = solve_salp_structured(lp_u, tol=1e-10)
    exhaustive_gap = abs(sol_u.objective - full_u.objective) / (1.0 + abs(full_u.objective))

    B = estimate_B(np.full(config.curve_K, -box), np.full(config.curve_K, box), np.arange(n), gen)
    try:
        formula = sample_size_bound(B, config.curve_K, config.curve_epsilon, config.curve_delta)
    except ValueError:
        formula = None
    result = {"n_states": n, "K": config.curve_K, "discount": model.discount, "box": box,
              "full_objective": full.objective, "full_error": full_err, "rows": rows,
              "median_gap_decreasing": monotone, "exhaustive_gap": exhaustive_gap,
              "B": B, "epsilon": config.curve_epsilon, "delta": config.curve_delta, "formula_S": formula}
    write_csv(rows, ["S", "median_gap", "max_gap", "median_error"], out / "sample_curve.csv")
    write_json(result, out / "sample_curve.json", "sample_curve")
    return result
