"""Evaluation protocol: perturbed cases, policy rollouts, cost deviation vs a reference.

The reference minimum cost comes from a multi-start coordinate descent over
dispatchable set points; each coordinate is line-searched with a coarse grid
followed by golden-section refinement, with every candidate priced through a
full AC power flow (infeasible points cost +inf).
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dc_opf import dc_cost, solve_dcopf
from .environment import EnvConfig, GridEnv
from .gnn import PolicyParams
from .grid_model import NetworkCase, perturb
from .power_flow import build_admittance, check_feasibility, solve_pf
from .ppo import STREAM_EVAL, collect_episode

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5) - 1) / 2
ROLLOUT_COST_MODES = ("best", "last")
REPORT_COLUMNS = [
    "test_name", "drl_deviation_pct", "dcopf_deviation_pct", "ratio", "convergence_ratio",
    "n_rollouts", "best10_mean_cost", "reference_cost", "dcopf_cost", "status",
]


class InsufficientFeasible(RuntimeError):
    pass


class NoFeasiblePoint(RuntimeError):
    pass


@dataclass
class RolloutSet:
    costs: np.ndarray  # per-rollout cost (nan when no feasible state was reached)
    flags: np.ndarray  # per-rollout feasibility flag
    final_costs: np.ndarray
    reset_cost: float
    traces: list | None = None  # per-rollout StepInfo lists, when requested


@dataclass
class EvalReport:
    test_name: str
    drl_deviation_pct: float = float("nan")
    dcopf_deviation_pct: float = float("nan")
    ratio: float = float("nan")
    convergence_ratio: float = float("nan")
    n_rollouts: int = 0
    best10_mean_cost: float = float("nan")
    reference_cost: float = float("nan")
    dcopf_cost: float = float("nan")
    status: str = "ok"

    def row(self) -> dict:
        return dataclasses.asdict(self)


def _seed_key(seed) -> tuple:
    return tuple(int(s) for s in (seed if isinstance(seed, (tuple, list)) else (seed,)))


def _rollout(env: GridEnv, params, T: int, key: tuple, i: int, greedy: bool, cost_mode: str,
             logits_fn=None, trace: bool = False):
    rng = np.random.default_rng(key + (STREAM_EVAL, i))
    traj = collect_episode(env, params, T, rng, greedy=greedy, logits_fn=logits_fn, with_values=False)
    states = traj.env_states
    feasible = [s.cost for s in states if s.feasible]
    if cost_mode == "best":
        cost, flag = (min(feasible) if feasible else float("nan")), bool(feasible)
    else:
        cost, flag = (feasible[-1] if feasible else float("nan")), bool(states[-1].feasible)
    return cost, flag, states[-1].cost, states[0].cost, (traj.infos if trace else None)


def _rollout_job(args):
    case, env_cfg, *rest = args
    return _rollout(GridEnv(case, env_cfg), *rest)


def evaluate_policy(params: PolicyParams | None, case: NetworkCase, rollouts: int = 100, T: int = 125,
                    seed=0, env_cfg: EnvConfig = EnvConfig(), greedy: bool = False,
                    cost_mode: str = "best", logits_fn: Callable | None = None,
                    workers: int = 1, trace: bool = False) -> RolloutSet:
    """Run ``rollouts`` sampled episodes of ``T`` steps.

    ``cost_mode="best"`` scores a rollout by its cheapest feasible state and
    flags it feasible if any visited state was; ``"last"`` scores the last
    feasible state and flags the final state.  Each rollout draws from its own
    seeded stream, so results do not depend on ``workers``.
    """
    if cost_mode not in ROLLOUT_COST_MODES:
        raise ValueError(f"unknown rollout cost mode {cost_mode!r}")
    key = _seed_key(seed)
    if workers > 1 and logits_fn is None and rollouts > 1:
        from concurrent.futures import ProcessPoolExecutor
        jobs = [(case, env_cfg, params, T, key, i, greedy, cost_mode, None, trace) for i in range(rollouts)]
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_rollout_job, jobs, chunksize=max(1, rollouts // (4 * workers))))
    else:
        env = GridEnv(case, env_cfg)
        results = [_rollout(env, params, T, key, i, greedy, cost_mode, logits_fn, trace)
                   for i in range(rollouts)]
    costs, flags, finals, resets, traces = zip(*results) if results else ((),) * 5
    return RolloutSet(np.array(costs, dtype=float), np.array(flags, dtype=bool), np.array(finals, dtype=float),
                      resets[0] if resets else float("nan"), list(traces) if trace else None)


def summarize(costs, flags, reference_cost: float, test_name: str = "") -> EvalReport:
    costs = np.asarray(costs, dtype=float)
    flags = np.asarray(flags, dtype=bool)
    if costs.size < 10:
        raise ValueError("summarize needs at least 10 rollouts")
    ok = flags & np.isfinite(costs)
    report = EvalReport(test_name=test_name, n_rollouts=int(costs.size),
                        convergence_ratio=float(flags.mean()), reference_cost=float(reference_cost))
    if ok.sum() < 10:
        raise InsufficientFeasible(f"only {int(ok.sum())} feasible rollouts")
    best10 = float(np.sort(costs[ok])[:10].mean())
    report.best10_mean_cost = best10
    report.drl_deviation_pct = deviation_pct(best10, reference_cost)
    return report


def deviation_pct(cost: float, reference_cost: float) -> float:
    return 100.0 * (cost - reference_cost) / reference_cost


# ------------------------------------------------------------- reference


@dataclass
class ReferenceResult:
    cost: float
    dispatch: np.ndarray
    starts: int
    feasible_starts: int
    pf_solves: int


class _Pricer:
    def __init__(self, case: NetworkCase, checks):
        self.case = case
        self.checks = checks
        self.Y = build_admittance(case)
        self.solves = 0

    def __call__(self, d) -> float:
        self.solves += 1
        sol = solve_pf(self.case, d, Y=self.Y)
        if not check_feasibility(sol, self.case, self.checks).feasible:
            return math.inf
        return self.case.total_cost(sol.gen_p)


def _golden(f, a: float, b: float, iters: int):
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def coordinate_descent(price: Callable, x0, lo, hi, tol: float = 1e-4, grid: int = 11,
                       golden_iters: int = 24, max_sweeps: int = 60):
    """Minimise ``price`` one coordinate at a time until no coordinate gains more than ``tol``."""
    x = np.array(x0, dtype=float)
    fx = price(x)
    span = hi - lo
    for sweep in range(max_sweeps):
        improved = False
        # full-range grid on the first sweep, then a shrinking window
        half = span if sweep == 0 or not np.isfinite(fx) else np.maximum(span * 0.5 ** min(sweep, 6), 1e-9)
        for g in range(len(x)):
            if span[g] <= 0:
                continue
            a = max(lo[g], x[g] - half[g])
            b = min(hi[g], x[g] + half[g])

            def f(v, g=g):
                y = x.copy()
                y[g] = v
                return price(y)
            pts = np.linspace(a, b, grid)
            vals = np.array([f(v) for v in pts])
            i = int(np.argmin(vals))
            if not np.isfinite(vals[i]):
                continue
            left, right = pts[max(i - 1, 0)], pts[min(i + 1, grid - 1)]
            v, fv = _golden(f, left, right, golden_iters)
            if vals[i] < fv:
                v, fv = pts[i], vals[i]
            if fv < fx - tol or (not np.isfinite(fx) and np.isfinite(fv)):
                x[g], fx = v, fv
                improved = True
            elif fv < fx:
                x[g], fx = v, fv
        if not improved:
            break
    return x, fx


def acopf_reference(case: NetworkCase, starts: int = 20, seed: int = 0,
                    checks=EnvConfig().feasibility_checks, tol: float = 1e-4,
                    extra_starts=(), **cd_kwargs) -> ReferenceResult:
    gens = case.dispatchable
    lo = np.array([g.pmin for g in gens], dtype=float)
    hi = np.array([g.pmax for g in gens], dtype=float)
    price = _Pricer(case, checks)
    rng = np.random.default_rng(seed)
    inits = [np.asarray(s, dtype=float) for s in extra_starts]
    inits += [lo + rng.random(len(lo)) * (hi - lo) for _ in range(starts)]
    best_x, best_f, n_ok = None, math.inf, 0
    if len(lo) == 0:
        f = price(np.zeros(0))
        if not np.isfinite(f):
            raise NoFeasiblePoint("the only operating point is infeasible")
        return ReferenceResult(f, np.zeros(0), 1, 1, price.solves)
    for x0 in inits:
        x, fx = coordinate_descent(price, x0, lo, hi, tol=tol, **cd_kwargs)
        if np.isfinite(fx):
            n_ok += 1
            if fx < best_f:
                best_x, best_f = x, fx
    if best_x is None:
        raise NoFeasiblePoint("no start reached a feasible operating point")
    return ReferenceResult(float(best_f), best_x, len(inits), n_ok, price.solves)


# ----------------------------------------------------------------- suites


def load_suite(path) -> list:
    suite = json.loads(Path(path).read_text())
    if not isinstance(suite, list):
        raise ValueError("suite must be a JSON list")
    for row in suite:
        for key in ("name", "family", "params", "seed"):
            if key not in row:
                raise ValueError(f"suite row missing {key!r}: {row}")
    return suite


def bundled_suite_path(name: str) -> Path:
    return Path(__file__).parent / "data" / f"{name}.suite.json"


def run_suite(params: PolicyParams, base_case: NetworkCase, suite: list, seed: int = 0,
              rollouts: int = 100, T: int = 125, env_cfg: EnvConfig = EnvConfig(),
              dc_eval: str = "ac", segments: int = 20, reference_starts: int = 20,
              cost_mode: str = "best", logits_fn: Callable | None = None,
              workers: int = 1) -> list[EvalReport]:
    reports = []
    for k, row in enumerate(suite):
        name = row["name"]
        try:
            case = perturb(base_case, row["family"], row["params"], row["seed"])
        except Exception as exc:  # recorded per row, the suite goes on
            log.warning("row %s: perturbation failed: %s", name, exc)
            reports.append(EvalReport(name, status=f"perturbation_failed: {exc}"))
            continue
        try:
            dc = solve_dcopf(case, segments)
            dc_c = dc_cost(case, dc, dc_eval)
            extra = [dc.p[case.arrays.dispatchable]] if dc.status == "optimal" else []
            ref = acopf_reference(case, starts=reference_starts, seed=row["seed"],
                                  checks=env_cfg.feasibility_checks, extra_starts=extra)
        except NoFeasiblePoint as exc:
            reports.append(EvalReport(name, status=f"no_reference: {exc}"))
            continue
        roll = evaluate_policy(params, case, rollouts=rollouts, T=T, seed=(seed, k),
                               env_cfg=env_cfg, cost_mode=cost_mode, logits_fn=logits_fn,
                               workers=workers)
        try:
            rep = summarize(roll.costs, roll.flags, ref.cost, name)
        except InsufficientFeasible:
            rep = EvalReport(name, n_rollouts=rollouts, convergence_ratio=float(roll.flags.mean()),
                             reference_cost=ref.cost, status="non_converged")
        rep.dcopf_cost = dc_c
        rep.dcopf_deviation_pct = deviation_pct(dc_c, ref.cost)
        if np.isfinite(rep.drl_deviation_pct):
            rep.ratio = (rep.dcopf_deviation_pct / rep.drl_deviation_pct
                         if rep.drl_deviation_pct != 0 else math.inf)
        reports.append(rep)
        log.info("%s: drl %.3f%% dcopf %.3f%% conv %.2f", name, rep.drl_deviation_pct,
                 rep.dcopf_deviation_pct, rep.convergence_ratio)
    return reports


def reports_to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()
