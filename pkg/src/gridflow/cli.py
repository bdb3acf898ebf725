"""Command-line entry point: ``gridflow {train,eval,pf,dcopf,oracle,perturb}``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import SECTIONS, RunConfig
from .dc_opf import DC_EVAL_MODES, dc_cost, solve_dcopf
from .environment import GridEnv
from .evaluation import (
    ROLLOUT_COST_MODES, EvalReport, InsufficientFeasible, acopf_reference, bundled_suite_path,
    evaluate_policy, load_suite, reports_to_csv, run_suite, summarize,
)
from .gnn import load_policy
from .grid_model import (
    PERTURBATIONS, NetworkCase, ParseError, ValidationError, bundled_case_path, dumps_case, load_case,
    perturb,
)
from .power_flow import CHECKS, check_feasibility, solve_pf
from .ppo import train

log = logging.getLogger("gridflow")

# help strings; defaults are appended automatically
HELP = {
    "gamma": "discount factor",
    "lam": "GAE lambda",
    "epsilon": "PPO clip range",
    "k1": "value-loss coefficient",
    "k2": "entropy coefficient",
    "minibatch": "minibatch size (paper: 25)",
    "epochs": "passes over each episode (paper: 3)",
    "lr": "Adam learning rate (paper: 0.003)",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "adam_eps": "Adam epsilon",
    "episodes": "training episodes (paper: 500)",
    "horizon": "steps per training episode T (paper: 125)",
    "normalize_advantages": "normalise advantages per episode",
    "checkpoint_every": "write a checkpoint every C episodes (0 = off)",
    "select_every": "score the policy for best-checkpoint selection every C episodes (0 = off)",
    "select_rollouts": "rollouts per selection score",
    "select_horizon": "steps per selection rollout",
    "record_wall_time": "fill the wall_ms metric column (breaks byte-identical reruns)",
    "portions": "generator range portions N (paper: 50)",
    "cte1": "reward when the chosen generator is already at pmax (paper: -1)",
    "cte2": "reward when the power flow fails the penalty checks (paper: -2)",
    "init_fraction": "reset dispatch = pmin + f*(pmax-pmin) (paper: raise by 20%%)",
    "infeasible_policy": "state after a penalised action",
    "include_slack_cost": "include the slack unit in the episode cost",
    "penalty_checks": "comma list of checks whose failure gives cte2",
    "feasibility_checks": "comma list of checks defining a feasible state",
    "enforce_q_limits": "switch PV buses to PQ at reactive limits",
    "d": "node representation size (paper: 16)",
    "k": "message-passing iterations (paper: 4)",
    "hidden": "hidden width of every MLP",
    "shared_message_passing": "actor and critic share one message-passing stack",
    "rollouts": "evaluation rollouts per case (paper: 100)",
    "eval_horizon": "steps per evaluation rollout (paper: 125)",
    "segments": "DC-OPF piecewise cost segments",
    "dc_eval": "how the DC-OPF dispatch is priced",
    "rollout_cost": "per-rollout score: cheapest feasible state or last feasible state",
    "reference_starts": "multi-start count of the reference oracle",
}
CHOICES = {"infeasible_policy": ("rollback", "absorb"), "dc_eval": DC_EVAL_MODES,
           "rollout_cost": ROLLOUT_COST_MODES}
SUBCOMMAND_SECTIONS = {
    "train": ("ppo", "env", "gnn"),
    "eval": ("env", "eval"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _checks(text: str) -> tuple:
    names = tuple(c for c in text.split(",") if c)
    bad = set(names) - set(CHECKS)
    if bad:
        raise argparse.ArgumentTypeError(f"unknown checks {sorted(bad)}; choose from {CHECKS}")
    return names


def _add_section_flags(p: argparse.ArgumentParser, section: str):
    cls = SECTIONS[section]
    group = p.add_argument_group(f"{section} settings")
    for f in dataclasses.fields(cls):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        text = f"{HELP.get(f.name, f.name)} (default: {','.join(default) if isinstance(default, tuple) else default})"
        kw = dict(dest=f.name, default=None, help=text)
        if isinstance(default, bool):
            group.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif isinstance(default, tuple):
            group.add_argument(flag, type=_checks, metavar="CHECKS", **kw)
        elif f.name in CHOICES:
            group.add_argument(flag, choices=CHOICES[f.name], **kw)
        else:
            group.add_argument(flag, type=type(default), **kw)


def _common(p: argparse.ArgumentParser, out_required: bool = False):
    p.add_argument("--case", default=None, help="case JSON path or bundled case name (default: ieee30)")
    p.add_argument("--config", default=None, help="JSON config or run_manifest.json; flags override it")
    p.add_argument("--out", default=None, required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="root seed (default: $GRIDFLOW_SEED or 0)")
    p.add_argument("--workers", type=int, default=None, help="evaluation worker processes (default: 1)")
    p.add_argument("--trace", action="store_true", help="write per-step JSON lines to <out>/trace.jsonl")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridflow", description="GNN + PPO incremental dispatch for AC power grids.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a policy with PPO")
    _common(p, out_required=True)
    for sec in SUBCOMMAND_SECTIONS["train"]:
        _add_section_flags(p, sec)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a suite of perturbed cases")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON written by train")
    p.add_argument("--suite", default=None,
                   help="suite JSON path or bundled name (table1, table2, table3); omitted = base case only")
    for sec in SUBCOMMAND_SECTIONS["eval"]:
        _add_section_flags(p, sec)

    p = sub.add_parser("pf", help="run one AC power flow and print the solution")
    _common(p)
    p.add_argument("--dispatch", default="reset",
                   help="'reset', a JSON list of MW per dispatchable unit, {generator id: MW}, or a file")
    p.add_argument("--checks", type=_checks, default=CHECKS, help=f"feasibility checks (default: {','.join(CHECKS)})")
    p.add_argument("--enforce-q-limits", action="store_true", help="switch PV buses to PQ at reactive limits")

    p = sub.add_parser("dcopf", help="solve the DC-OPF baseline")
    _common(p)
    p.add_argument("--segments", type=int, default=None, help="piecewise cost segments (default: 20)")
    p.add_argument("--dc-eval", dest="dc_eval", default=None, choices=DC_EVAL_MODES,
                   help="pricing of the dispatch (default: ac)")

    p = sub.add_parser("oracle", help="multi-start coordinate-descent reference cost")
    _common(p)
    p.add_argument("--starts", type=int, default=None, help="random starts (default: 20)")
    p.add_argument("--checks", type=_checks, default=None,
                   help="feasibility checks (default: diverged,voltage,slack_p)")

    p = sub.add_parser("perturb", help="write a perturbed copy of a case")
    _common(p)
    p.add_argument("--family", required=True, choices=sorted(PERTURBATIONS))
    p.add_argument("--params", required=True, help='JSON object, e.g. \'{"lower": 0.1, "upper": 0.1}\'')
    return parser


# ------------------------------------------------------------------ helpers


def resolve_case_path(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = bundled_case_path(name)
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"case {name!r} is neither a file nor a bundled case")


def resolve_suite(name: str) -> list:
    path = Path(name)
    if not path.exists():
        path = bundled_suite_path(name)
    if not path.exists():
        raise FileNotFoundError(f"suite {name!r} is neither a file nor a bundled suite")
    return load_suite(path)


def parse_dispatch(text: str, case: NetworkCase) -> np.ndarray:
    if text == "reset":
        return GridEnv(case).reset().dispatch
    raw = json.loads(Path(text).read_text()) if Path(text).exists() else json.loads(text)
    gens = case.dispatchable
    if isinstance(raw, dict):
        by_id = {str(k): float(v) for k, v in raw.items()}
        missing = [g.id for g in gens if str(g.id) not in by_id]
        if missing:
            raise ValueError(f"dispatch misses generators {missing}")
        return np.array([by_id[str(g.id)] for g in gens])
    values = np.asarray(raw, dtype=float).reshape(-1)
    if values.size != len(gens):
        raise ValueError(f"dispatch needs {len(gens)} values, got {values.size}")
    return values


def _versions() -> dict:
    try:
        from importlib.metadata import version
        pkg = version("artifact")
    except Exception:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "gridflow": pkg}


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": cfg.to_dict(), "seed": cfg.seed, "versions": _versions(),
           **(extra or {})}
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _emit(obj, out: Path | None, name: str):
    text = json.dumps(obj, indent=1)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


# --------------------------------------------------------------- commands


def cmd_train(args, cfg: RunConfig, case: NetworkCase) -> int:
    out = Path(cfg.out)
    write_manifest(out, "train", cfg)
    trace = (out / "trace.jsonl").open("w") if args.trace else None

    def progress(row):
        log.info("episode %d reward %.5f final cost %.2f", row["episode"], row["mean_reward"], row["final_cost"])

    def on_step(episode, info):
        trace.write(json.dumps({"episode": episode, **dataclasses.asdict(info)}) + "\n")

    try:
        result = train(case, cfg.ppo, cfg.gnn, cfg.env, out_dir=out, progress=progress,
                       on_step=on_step if trace else None)
    finally:
        if trace:
            trace.close()
    print(json.dumps({"out": str(out), "episodes": cfg.ppo.episodes, "best_score": result.best_score,
                      "checkpoints": [str(p) for p in result.checkpoints]}, indent=1))
    return 0


def cmd_eval(args, cfg: RunConfig, case: NetworkCase) -> int:
    params = load_policy(args.checkpoint)
    ev = cfg.eval
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        write_manifest(out, "eval", cfg, {"checkpoint": str(args.checkpoint)})
    if cfg.suite:
        reports = run_suite(params, case, resolve_suite(cfg.suite), seed=cfg.seed, rollouts=ev.rollouts,
                            T=ev.eval_horizon, env_cfg=cfg.env, dc_eval=ev.dc_eval, segments=ev.segments,
                            reference_starts=ev.reference_starts, cost_mode=ev.rollout_cost,
                            workers=cfg.workers)
    else:
        dc = solve_dcopf(case, ev.segments)
        extra = [dc.p[case.arrays.dispatchable]] if dc.status == "optimal" else []
        ref = acopf_reference(case, starts=ev.reference_starts, seed=cfg.seed,
                              checks=cfg.env.feasibility_checks, extra_starts=extra)
        roll = evaluate_policy(params, case, ev.rollouts, ev.eval_horizon, seed=(cfg.seed, 0), env_cfg=cfg.env,
                               cost_mode=ev.rollout_cost, workers=cfg.workers, trace=args.trace)
        try:
            rep = summarize(roll.costs, roll.flags, ref.cost, "base")
        except InsufficientFeasible:
            rep = EvalReport("base", n_rollouts=ev.rollouts, convergence_ratio=float(roll.flags.mean()),
                             reference_cost=ref.cost, status="non_converged")
        rep.dcopf_cost = dc_cost(case, dc, ev.dc_eval)
        rep.dcopf_deviation_pct = 100.0 * (rep.dcopf_cost - ref.cost) / ref.cost
        if np.isfinite(rep.drl_deviation_pct) and rep.drl_deviation_pct != 0:
            rep.ratio = rep.dcopf_deviation_pct / rep.drl_deviation_pct
        reports = [rep]
        if args.trace and out is not None:
            with (out / "trace.jsonl").open("w") as fh:
                for i, infos in enumerate(roll.traces):
                    for info in infos:
                        fh.write(json.dumps({"rollout": i, **dataclasses.asdict(info)}) + "\n")
    text = reports_to_csv(reports)
    print(text, end="")
    if out is not None:
        (out / "report.csv").write_text(text)
    return 0


def cmd_pf(args, cfg: RunConfig, case: NetworkCase) -> int:
    dispatch = parse_dispatch(args.dispatch, case)
    sol = solve_pf(case, dispatch, enforce_q_limits=args.enforce_q_limits)
    report = check_feasibility(sol, case, args.checks)
    doc = {**sol.to_dict(), "feasible": report.feasible, "violations": list(report.violations),
           "cost": case.total_cost(sol.gen_p) if sol.converged else None}
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        write_manifest(out, "pf", cfg, {"dispatch": args.dispatch})
    _emit(doc, out, "pf.json")
    return 0 if sol.converged else 2


def cmd_dcopf(args, cfg: RunConfig, case: NetworkCase) -> int:
    segments = args.segments if args.segments is not None else cfg.eval.segments
    mode = args.dc_eval or cfg.eval.dc_eval
    sol = solve_dcopf(case, segments)
    doc = {**sol.to_dict(), "segments": segments, "dc_eval": mode, "cost": dc_cost(case, sol, mode)}
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        write_manifest(out, "dcopf", cfg)
    _emit(doc, out, "dcopf.json")
    return 0 if sol.status == "optimal" else 2


def cmd_oracle(args, cfg: RunConfig, case: NetworkCase) -> int:
    starts = args.starts if args.starts is not None else cfg.eval.reference_starts
    checks = args.checks or cfg.env.feasibility_checks
    dc = solve_dcopf(case, cfg.eval.segments)
    extra = [dc.p[case.arrays.dispatchable]] if dc.status == "optimal" else []
    ref = acopf_reference(case, starts=starts, seed=cfg.seed, checks=checks, extra_starts=extra)
    doc = {"cost": ref.cost, "dispatch": ref.dispatch.tolist(), "starts": ref.starts,
           "feasible_starts": ref.feasible_starts, "pf_solves": ref.pf_solves, "checks": list(checks)}
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        write_manifest(out, "oracle", cfg)
    _emit(doc, out, "oracle.json")
    return 0


def cmd_perturb(args, cfg: RunConfig, case: NetworkCase) -> int:
    params = json.loads(args.params)
    if not isinstance(params, dict):
        raise ValueError("--params must be a JSON object")
    new = perturb(case, args.family, params, cfg.seed)
    text = dumps_case(new)
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        write_manifest(out, "perturb", cfg, {"family": args.family, "params": params})
        (out / "case.json").write_text(text)
    print(text)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "pf": cmd_pf, "dcopf": cmd_dcopf,
            "oracle": cmd_oracle, "perturb": cmd_perturb}


def _overrides(args, command: str) -> dict:
    flat = {"case": args.case, "out": args.out, "seed": args.seed, "workers": args.workers,
            "suite": getattr(args, "suite", None)}
    for sec in SUBCOMMAND_SECTIONS.get(command, ()):
        for f in dataclasses.fields(SECTIONS[sec]):
            if f.name != "seed":
                flat[f.name] = getattr(args, f.name, None)
    return flat


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_mod.resolve(args.config, _overrides(args, args.command))
        case_path = resolve_case_path(cfg.case)
        case = load_case(case_path)
        if cfg.out is None and args.command == "train":
            raise ValueError("train needs --out")
    except (ParseError, ValidationError, ValueError, TypeError, FileNotFoundError, KeyError) as exc:
        print(f"gridflow: error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args, cfg, case)
    except (ValueError, FileNotFoundError) as exc:  # includes ParseError, ValidationError
        print(f"gridflow: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"gridflow: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
