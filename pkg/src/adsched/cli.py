"""Command-line entry point.

Settings are resolved in this order, later wins: built-in defaults, the
``--config`` document (JSON or YAML), then explicit command-line flags.

Exit codes: 0 success, 1 computation failure, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from . import experiments as E
from .em_fit import CountSeries, pseudo_residuals, quantize, select_model, simulate_series, write_series_csv
from .hmm_core import FilterDegeneracyError, HmmModel
from .linear_policy import InfeasiblePolicyError, LinearThresholdPolicy
from .sim_eval import (
    GridDPPolicy,
    LinearPolicy,
    PeriodicPolicy,
    RandomPolicy,
    compare,
    detect_change,
    simulate_switch_series,
    write_trace,
)
from .simplex_grid import BeliefGrid
from .spsa_opt import SpsaConfig, optimize
from .stopping_problem import (
    DEFAULT_RESOLUTION,
    DPTooLargeError,
    MAX_DP_STATES,
    StopProblem,
    check_assumptions,
    value_iteration,
)

logger = logging.getLogger("adsched")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments, unreadable files or inconsistent configuration."""


@dataclass
class RunConfig:
    experiment: Optional[str] = None
    model: Optional[dict] = None
    model_file: Optional[str] = None
    fit: Optional[dict] = None
    reward: Optional[list] = None
    alpha: Optional[list] = None
    L: Optional[int] = None
    rho: float = 0.9
    grid: dict = field(default_factory=dict)
    spsa: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    output_dir: str = "."

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise UsageError(f"{path}: cannot parse config: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: config must be a mapping")
        return cls.from_dict(doc)

    def validate(self) -> None:
        sources = [k for k in ("experiment", "model", "model_file", "fit") if getattr(self, k) is not None]
        if len(sources) > 1:
            raise UsageError(f"config names several model sources: {sources}")
        if self.model_file is not None and not Path(self.model_file).is_file():
            raise UsageError(f"model file not found: {self.model_file}")
        if self.fit is not None and not Path(self.fit.get("input", "")).is_file():
            raise UsageError(f"fit input not found: {self.fit.get('input')}")
        if self.reward is not None and self.alpha is not None:
            raise UsageError("give either reward or alpha, not both")


# model and problem assembly


def _load_model(cfg: RunConfig) -> HmmModel:
    if cfg.model_file is not None:
        path = Path(cfg.model_file)
        if not path.is_file():
            raise UsageError(f"model file not found: {path}")
        try:
            return HmmModel.load(path)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"{path}: invalid model document: {exc}") from None
    if cfg.model is not None:
        try:
            return HmmModel.from_dict(cfg.model)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"invalid inline model: {exc}") from None
    if cfg.fit is not None:
        series = _read_series(cfg.fit["input"])
        S_range = cfg.fit.get("S_range", [1, 2, 3, 4, 5, 6])
        return select_model(series, S_range, seed=cfg.sim.get("seed", 0)).best.model
    if cfg.experiment is not None:
        return _experiment(cfg.experiment).build_model()
    raise UsageError("no model given: use --experiment, --model or a config with a model section")


def _experiment(name: str) -> E.Experiment:
    try:
        return E.get(name)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


def _build_problem(cfg: RunConfig) -> StopProblem:
    model = _load_model(cfg)
    exp = E.get(cfg.experiment) if cfg.experiment else None
    L = cfg.L or (exp.L if exp else 1)
    if cfg.reward is not None:
        r = np.asarray(cfg.reward, dtype=float)
    elif exp is not None:
        r = exp.reward_vector(np.asarray(cfg.alpha, dtype=float) if cfg.alpha is not None else 1.0)
    elif model.is_poisson:
        alpha = np.asarray(cfg.alpha, dtype=float) if cfg.alpha is not None else 1.0
        r = alpha * model.emission.g
    else:
        raise UsageError("categorical models need an explicit --reward vector")
    if r.shape[-1] != model.S:
        raise UsageError(f"reward has {r.shape[-1]} entries but the model has {model.S} states")
    try:
        return StopProblem(model, r, int(L), float(cfg.rho))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read_series(path) -> CountSeries:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    try:
        return CountSeries.from_csv(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read_symbols(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"observation file not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if rows and rows[0] and not rows[0][-1].strip().lstrip("-").isdigit():
        rows = rows[1:]
    try:
        symbols = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if len(symbols) == 0:
        raise UsageError(f"{path}: observation series is empty")
    return symbols


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _grid_for(problem: StopProblem, cfg: RunConfig) -> BeliefGrid:
    M = cfg.grid.get("M") or DEFAULT_RESOLUTION.get(problem.S, 20)
    return BeliefGrid(int(M), problem.S)


def _solve(problem: StopProblem, cfg: RunConfig, force: bool):
    try:
        return value_iteration(problem, _grid_for(problem, cfg), tol=cfg.grid.get("tol", 1e-6), force=force)
    except DPTooLargeError as exc:
        raise UsageError(f"{exc} (pass --force to solve anyway)") from None


def _spsa_config(cfg: RunConfig, seed: int, threads: int) -> SpsaConfig:
    doc = dict(cfg.spsa)
    doc.setdefault("seed", seed)
    doc.setdefault("threads", threads)
    try:
        return SpsaConfig(**doc)
    except TypeError as exc:
        raise UsageError(f"invalid spsa section: {exc}") from None


def _load_policy(path, problem: StopProblem) -> LinearThresholdPolicy:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"policy file not found: {path}")
    try:
        policy = LinearThresholdPolicy.load(path)
    except InfeasiblePolicyError:
        raise
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: invalid policy document: {exc}") from None
    if policy.S != problem.S or policy.L != problem.L:
        raise UsageError(
            f"{path}: policy dimension mismatch: policy has S={policy.S}, L={policy.L} "
            f"but the problem has S={problem.S}, L={problem.L}"
        )
    return policy


def _print_assumptions(problem: StopProblem) -> None:
    for line in check_assumptions(problem).lines():
        print(line)


# commands


def cmd_fit(args, cfg: RunConfig) -> int:
    series = _read_series(args.input)
    out = _out_dir(cfg)
    S_range = range(args.s_min, args.s_max + 1)
    kind = args.kind
    data = series
    n_symbols = None
    if kind == "categorical":
        data = CountSeries(quantize(series, args.levels))
        n_symbols = args.levels
    S_range = [S for S in S_range if S < len(series)]
    if not S_range:
        raise UsageError("series too short for the requested state range")
    sel = select_model(data, S_range, seed=args.seed, restarts=args.restarts, kind=kind, n_symbols=n_symbols)
    sel.best.model.save(out / "model.json")
    sel.scores_to_csv(out / "scores.csv")
    pseudo_residuals(sel.best.model, data).to_csv(out / "qq.csv")
    flag = " (rank deficient)" if sel.best.rank_deficient else ""
    print(f"selected S={sel.best.S} by BIC{flag}; loglik={sel.best.loglik:.6f}")
    return EXIT_OK


def cmd_solve(args, cfg: RunConfig) -> int:
    problem = _build_problem(cfg)
    _print_assumptions(problem)
    if problem.S > MAX_DP_STATES and not args.force:
        raise UsageError(
            f"S={problem.S}: grid value iteration is impractical beyond {MAX_DP_STATES} states; "
            "use the optimize command or pass --force"
        )
    sol = _solve(problem, cfg, args.force)
    out = _out_dir(cfg)
    sol.to_csv(out / "solution.csv")
    paths = sol.stop_sets_to_csv(out)
    sizes = ", ".join(f"l={l}: {int(m.sum())}" for l, m in sorted(sol.stop_sets.items()))
    print(f"value iteration: {sol.iterations} sweeps, residual {sol.residual:.3g}, converged={sol.converged}")
    print(f"stop-set sizes: {sizes}")
    print(f"wrote {out / 'solution.csv'} and {len(paths)} stop-set files")
    return EXIT_OK if sol.converged else EXIT_FAIL


def cmd_optimize(args, cfg: RunConfig) -> int:
    problem = _build_problem(cfg)
    _print_assumptions(problem)
    config = _spsa_config(cfg, args.seed, args.threads)
    phi0 = None
    if args.warm_start:
        warm = _load_policy(args.warm_start, problem)
        if warm.phi is None:
            raise UsageError(f"{args.warm_start}: warm start needs the phi parameters")
        phi0 = warm.phi
    trace = optimize(problem, config, phi0)
    out = _out_dir(cfg)
    trace.best_policy.save(out / "policy.json")
    trace.to_csv(out / "trace.csv")
    print(f"best J={trace.best_J:.6f} over {config.restarts} restarts; wrote {out / 'policy.json'}")
    return EXIT_OK


def _comparison_policies(args, problem: StopProblem, cfg: RunConfig, N: int, seed: int):
    policies, names = [], []
    for k, path in enumerate(args.policy or []):
        policies.append(LinearPolicy(_load_policy(path, problem)))
        names.append("LinearThreshold" if len(args.policy) == 1 else f"LinearThreshold_{Path(path).stem}")
    if args.dp:
        policies.append(GridDPPolicy(_solve(problem, cfg, args.force)))
        names.append("GridDP")
    policies += [PeriodicPolicy(N, problem.L), RandomPolicy(N, problem.L, seed)]
    names += ["Periodic", "Random"]
    return policies, names


def cmd_compare(args, cfg: RunConfig) -> int:
    problem = _build_problem(cfg)
    N = int(cfg.sim.get("N", 200))
    batch = int(cfg.sim.get("batch", 10_000))
    seed = args.seed
    if N < problem.L:
        raise UsageError(f"horizon N={N} is shorter than L={problem.L}")
    policies, names = _comparison_policies(args, problem, cfg, N, seed)
    report = compare(problem, policies, N, batch, seed, names)
    out = _out_dir(cfg)
    report.to_csv(out / "comparison.csv")
    report.bars_to_csv(out / "bars.csv", reference="Periodic")
    for s in report.scores:
        print(f"{s.name:>24s}  mean {s.mean:12.6f}  stderr {s.stderr:.6f}  vs Periodic {report.ratio(s.name, 'Periodic'):.4f}")
    return EXIT_OK


def _write_beliefs(path, result, observations) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "observation"] + [f"pi_{i + 1}" for i in range(result.beliefs.shape[1])])
        for t, (y, pi) in enumerate(zip(observations, result.beliefs)):
            w.writerow([t, int(y)] + [repr(float(v)) for v in pi])


def cmd_detect(args, cfg: RunConfig) -> int:
    if args.model:
        cfg = replace(cfg, model_file=args.model, experiment=None)
    elif all(getattr(cfg, k) is None for k in ("experiment", "model", "model_file", "fit")):
        cfg = replace(cfg, experiment="buzz-change")
    model = _load_model(cfg)
    if model.S != 2:
        raise UsageError(f"change detection needs a 2-state model, got S={model.S}")
    obs = _read_symbols(args.observations)
    reward = cfg.reward if cfg.reward is not None else list(E.BUZZ_R)
    if len(reward) != 2:
        raise UsageError("reward must have two entries")
    try:
        result = detect_change(model, reward, obs, cfg.rho)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(cfg)
    _write_beliefs(out / "beliefs.csv", result, obs)
    print(f"detection: {result.stop_time if result.detected else 'none'}")
    return EXIT_OK


def _run_experiment(args, cfg: RunConfig) -> int:
    exp = _experiment(args.name)
    cfg = replace(cfg, experiment=exp.name, model=None, model_file=None, fit=None)
    out = _out_dir(cfg)
    seed = args.seed
    if exp.name == "buzz-change":
        model = exp.build_model()
        obs, switch = simulate_switch_series(model, int(cfg.sim.get("N", 60)), seed)
        with open(out / "observations.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "symbol"])
            w.writerows([t, int(y)] for t, y in enumerate(obs))
        result = detect_change(model, exp.reward_vector(), obs, cfg.rho)
        _write_beliefs(out / "beliefs.csv", result, obs)
        print(f"switch at t={switch}; detection: {result.stop_time if result.detected else 'none'}")
        return EXIT_OK
    problem = _build_problem(cfg)
    _print_assumptions(problem)
    N = int(cfg.sim.get("N", 200))
    batch = int(cfg.sim.get("batch", 10_000))
    policies, names = [], []
    if problem.S <= MAX_DP_STATES or args.force:
        sol = _solve(problem, cfg, args.force)
        sol.to_csv(out / "solution.csv")
        sol.stop_sets_to_csv(out)
        policies.append(GridDPPolicy(sol))
        names.append("GridDP")
        write_trace(out / "trace_rollout.csv", problem.model, policies[0], problem, N, seed)
    else:
        trace = optimize(problem, _spsa_config(cfg, seed, args.threads))
        trace.best_policy.save(out / "policy.json")
        trace.to_csv(out / "trace.csv")
        policies.append(LinearPolicy(trace.best_policy))
        names.append("LinearThreshold")
    policies += [PeriodicPolicy(N, problem.L), RandomPolicy(N, problem.L, seed)]
    names += ["Periodic", "Random"]
    report = compare(problem, policies, N, batch, seed, names)
    report.to_csv(out / "comparison.csv")
    report.bars_to_csv(out / "bars.csv", reference="Periodic")
    for s in report.scores:
        print(f"{s.name:>16s}  mean {s.mean:12.6f}  stderr {s.stderr:.6f}  vs Periodic {report.ratio(s.name, 'Periodic'):.4f}")
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    model = _load_model(cfg)
    if not model.is_poisson:
        raise UsageError("the series simulator needs a Poisson model")
    out = _out_dir(cfg)
    write_series_csv(simulate_series(model, args.length, args.seed), out / args.output)
    print(f"wrote {out / args.output}")
    return EXIT_OK


# argument parsing


def _add_problem_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--experiment", choices=sorted(E.EXPERIMENTS), help="built-in parameter set")
    src.add_argument("--model", dest="model_file", help="model JSON document")
    p.add_argument("--L", type=int, help="number of stops")
    p.add_argument("--rho", type=float, help="discount factor")
    p.add_argument("--reward", type=float, nargs="+", help="per-state stop reward")
    p.add_argument("--alpha", type=float, nargs="+", help="reward multiplier on the Poisson means")
    p.add_argument("--M", type=int, help="grid resolution")
    p.add_argument("--N", type=int, help="rollout horizon")
    p.add_argument("--batch", type=int, help="Monte-Carlo batch size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adsched", description="Ad scheduling on live streams as a multiple-stopping POMDP.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="master seed (default: config sim.seed, else 0)")
    parser.add_argument("--out-dir", default=None)
    parser.add_argument("--config", default=None, help="JSON or YAML run configuration")
    parser.add_argument("--force", action="store_true", help="allow grid DP beyond four states")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit HMMs to a viewer-count CSV and select S by BIC")
    p.add_argument("input")
    p.add_argument("--s-min", type=int, default=1)
    p.add_argument("--s-max", type=int, default=6)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--kind", choices=["poisson", "categorical"], default="poisson")
    p.add_argument("--levels", type=int, default=3, help="quantization levels for categorical fits")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("solve", help="grid value iteration and stopping sets")
    _add_problem_args(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("optimize", help="SPSA search over linear threshold policies")
    _add_problem_args(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--warm-start", help="policy JSON with phi parameters")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("compare", help="paired comparison against Periodic and Random")
    _add_problem_args(p)
    p.add_argument("--policy", action="append", help="linear policy JSON (repeatable)")
    p.add_argument("--dp", action="store_true", help="include the grid DP policy")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("detect", help="single-stop change detection on a symbol series")
    p.add_argument("--model", help="2-state model JSON (default: built-in buzz-change model)")
    p.add_argument("--observations", required=True, help="CSV of 0-based symbols")
    p.add_argument("--reward", type=float, nargs=2)
    p.add_argument("--rho", type=float)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("experiment", help="run a built-in experiment end to end")
    p.add_argument("name", choices=sorted(E.EXPERIMENTS))
    p.add_argument("--rho", type=float)
    p.add_argument("--N", type=int)
    p.add_argument("--batch", type=int)
    p.set_defaults(func=_run_experiment)

    p = sub.add_parser("simulate", help="write a viewer-count series drawn from a model")
    _add_problem_args(p)
    p.add_argument("--length", type=int, default=10_000)
    p.add_argument("--output", default="series.csv")
    p.set_defaults(func=cmd_simulate)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    updates = {}
    if getattr(args, "experiment", None):
        updates.update(experiment=args.experiment, model=None, model_file=None, fit=None)
    if getattr(args, "model_file", None):
        updates.update(model_file=args.model_file, experiment=None, model=None, fit=None)
    for key in ("L", "rho", "reward", "alpha"):
        val = getattr(args, key, None)
        if val is not None:
            updates[key] = val
    if args.out_dir is not None:
        updates["output_dir"] = args.out_dir
    grid = dict(cfg.grid)
    if getattr(args, "M", None):
        grid["M"] = args.M
    sim = dict(cfg.sim)
    for key in ("N", "batch"):
        val = getattr(args, key, None)
        if val is not None:
            sim[key] = val
    if args.seed is not None:
        sim["seed"] = args.seed
    sim.setdefault("seed", 0)
    args.seed = int(sim["seed"])
    spsa = dict(cfg.spsa)
    for key in ("iterations", "restarts"):
        val = getattr(args, key, None)
        if val is not None and args.command == "optimize":
            spsa[key] = val
    if "N" in sim:
        spsa.setdefault("N", sim["N"])
    cfg = replace(cfg, grid=grid, sim=sim, spsa=spsa, **updates)
    if updates.get("reward") is not None:
        cfg = replace(cfg, alpha=None)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasiblePolicyError as exc:
        print(f"error: rejected policy: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FilterDegeneracyError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: computation failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
