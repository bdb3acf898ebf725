"""Incremental dispatch MDP.

Each step raises one dispatchable generator by ``(pmax - pmin) / portions``
and re-solves the AC power flow; the slack unit picks up the difference, so
raising a cheap unit lowers total cost by displacing slack output.

Reward, per step:
  * generator already at pmax: ``cte1``, state unchanged;
  * power flow fails the penalty checks: ``cte2``, state rolled back
    (or advanced, with ``infeasible_policy="absorb"``);
  * otherwise: scaled cost before minus scaled cost after.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .gnn import GraphState
from .grid_model import NetworkCase
from .power_flow import (
    PfSolution, build_admittance, check_feasibility, solve_pf,
)

# constraint set that decides whether an operating point counts as feasible
DEFAULT_FEASIBILITY_CHECKS = ("diverged", "voltage", "slack_p")
# constraint set whose violation triggers the cte2 penalty
DEFAULT_PENALTY_CHECKS = ("diverged",)


class InitInfeasible(RuntimeError):
    pass


class DegenerateRange(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    portions: int = 50
    cte1: float = -1.0
    cte2: float = -2.0
    init_fraction: float = 0.2
    infeasible_policy: str = "rollback"
    include_slack_cost: bool = True
    penalty_checks: tuple = DEFAULT_PENALTY_CHECKS
    feasibility_checks: tuple = DEFAULT_FEASIBILITY_CHECKS
    enforce_q_limits: bool = False

    def __post_init__(self):
        if not self.cte2 <= self.cte1 < 0:
            raise ValueError("reward constants need cte2 <= cte1 < 0")
        if self.infeasible_policy not in ("rollback", "absorb"):
            raise ValueError(f"unknown infeasible policy {self.infeasible_policy!r}")
        if self.portions < 1:
            raise ValueError("portions must be >= 1")
        object.__setattr__(self, "penalty_checks", tuple(self.penalty_checks))
        object.__setattr__(self, "feasibility_checks", tuple(self.feasibility_checks))


@dataclass(frozen=True, eq=False)
class EnvState:
    dispatch: np.ndarray  # MW per dispatchable generator
    graph: GraphState
    feasible: bool
    cost: float
    t: int
    solution: PfSolution

    def equals(self, other: "EnvState") -> bool:
        return (
            np.array_equal(self.dispatch, other.dispatch)
            and self.graph.equals(other.graph)
            and self.feasible == other.feasible
            and self.cost == other.cost
        )


@dataclass(frozen=True)
class StepInfo:
    t: int
    action: int
    reward: float
    branch: str  # "at_max" | "infeasible" | "improve"
    cost: float
    feasible: bool
    max_mismatch: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def feature_bounds(case: NetworkCase) -> dict:
    """Per-case min-max ranges used to scale node and edge features."""
    a = case.arrays
    base = case.base_mva
    n = a.n_bus
    p_lo, p_hi = -a.p_load.copy(), -a.p_load.copy()
    q_lo, q_hi = -a.q_load.copy(), -a.q_load.copy()
    for g, gen in enumerate(case.generators):
        i = a.gen_bus[g]
        p_lo[i] += gen.pmin / base
        p_hi[i] += gen.pmax / base
        q_lo[i] += max(gen.qmin, -1e3) / base
        q_hi[i] += min(gen.qmax, 1e3) / base
    return {
        "v": (a.vmin, a.vmax),
        "theta": (np.full(n, -np.pi / 2), np.full(n, np.pi / 2)),
        "p": (p_lo.min(), p_hi.max()),
        "q": (q_lo.min(), q_hi.max()),
        "r": (a.r.min(), a.r.max()) if len(a.r) else (0.0, 0.0),
        "x": (a.x.min(), a.x.max()) if len(a.x) else (0.0, 0.0),
    }


def _minmax(x, lo, hi):
    span = np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)
    out = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def build_graph_state(sol: PfSolution, case: NetworkCase, bounds: dict | None = None) -> GraphState:
    """Scaled [V, theta, P, Q] per bus (net injections) and [R, X] per branch."""
    a = case.arrays
    b = bounds or feature_bounds(case)
    nodes = np.column_stack([
        _minmax(sol.v, *b["v"]),
        _minmax(sol.theta, *b["theta"]),
        _minmax(sol.p_net, *b["p"]),
        _minmax(sol.q_net, *b["q"]),
    ])
    edges = np.column_stack([_minmax(a.r, *b["r"]), _minmax(a.x, *b["x"])])
    return GraphState(
        node_features=nodes,
        edge_features=edges.reshape(-1, 2),
        senders=a.f.copy(),
        receivers=a.t.copy(),
        generator_nodes=a.gen_bus[a.dispatchable].copy(),
    )


class GridEnv:
    """Holds the per-case constants; ``reset`` and ``step`` return new states."""

    def __init__(self, case: NetworkCase, config: EnvConfig = EnvConfig()):
        self.case = case
        self.config = config
        self.Y = build_admittance(case)
        gens = case.dispatchable
        self.pmin = np.array([g.pmin for g in gens], dtype=float)
        self.pmax = np.array([g.pmax for g in gens], dtype=float)
        self.portion = (self.pmax - self.pmin) / config.portions
        self.bounds = feature_bounds(case)
        self.pf_solves = 0

    @property
    def n_actions(self) -> int:
        return len(self.pmin)

    # -------------------------------------------------------------- costs
    def cost_of(self, sol: PfSolution, dispatch) -> float:
        case = self.case
        total = sum(g.cost(p) for g, p in zip(case.dispatchable, dispatch))
        if self.config.include_slack_cost:
            total += case.slack_generator.cost(sol.slack_p * case.base_mva)
        return float(total)

    @cached_property
    def cost_range(self) -> tuple[float, float]:
        gens = list(self.case.dispatchable)
        if self.config.include_slack_cost:
            gens.append(self.case.slack_generator)
        lo = sum(g.cost(g.pmin) for g in gens)
        hi = sum(g.cost(g.pmax) for g in gens)
        return float(lo), float(hi)

    def scaled_cost(self, cost: float) -> float:
        lo, hi = self.cost_range
        if hi == lo:
            raise DegenerateRange("cost range is empty (all generators pinned)")
        return (cost - lo) / (hi - lo)

    # ------------------------------------------------------------ dynamics
    def _solve(self, dispatch):
        self.pf_solves += 1
        return solve_pf(self.case, dispatch, Y=self.Y, enforce_q_limits=self.config.enforce_q_limits)

    def _state(self, dispatch, sol, t, graph=None) -> EnvState:
        feasible = check_feasibility(sol, self.case, self.config.feasibility_checks).feasible
        if graph is None:
            graph = build_graph_state(sol, self.case, self.bounds)
        cost = self.cost_of(sol, dispatch) if sol.converged else float("nan")
        return EnvState(dispatch=dispatch, graph=graph, feasible=feasible, cost=cost, t=t, solution=sol)

    def reset(self) -> EnvState:
        f = self.config.init_fraction
        dispatch = self.pmin + f * (self.pmax - self.pmin)
        sol = self._solve(dispatch)
        if not sol.converged:
            raise InitInfeasible("initial power flow does not converge")
        return self._state(dispatch, sol, 0)

    def step(self, s: EnvState, a: int) -> tuple[EnvState, float, StepInfo]:
        cfg = self.config
        if not 0 <= a < self.n_actions:
            raise IndexError(f"generator index {a} out of range 0..{self.n_actions - 1}")
        if s.dispatch[a] >= self.pmax[a]:
            nxt = dataclasses.replace(s, t=s.t + 1)
            info = StepInfo(s.t, a, cfg.cte1, "at_max", s.cost, s.feasible, s.solution.max_mismatch)
            return nxt, cfg.cte1, info

        dispatch = s.dispatch.copy()
        dispatch[a] = dispatch[a] + self.portion[a]
        # repeated float adds can land a hair under pmax; snap so the unit reads as full
        if dispatch[a] >= self.pmax[a] - 1e-9 * (self.pmax[a] - self.pmin[a]):
            dispatch[a] = self.pmax[a]
        sol = self._solve(dispatch)
        if not check_feasibility(sol, self.case, cfg.penalty_checks).feasible:
            if cfg.infeasible_policy == "rollback":
                nxt = dataclasses.replace(s, t=s.t + 1)
            else:
                graph = build_graph_state(sol, self.case, self.bounds) if sol.converged else s.graph
                nxt = dataclasses.replace(self._state(dispatch, sol, s.t + 1, graph), feasible=False)
            info = StepInfo(s.t, a, cfg.cte2, "infeasible", nxt.cost, False, sol.max_mismatch)
            return nxt, cfg.cte2, info

        nxt = self._state(dispatch, sol, s.t + 1)
        if np.isfinite(s.cost):
            reward = self.scaled_cost(s.cost) - self.scaled_cost(nxt.cost)
        else:
            reward = 0.0
        info = StepInfo(s.t, a, reward, "improve", nxt.cost, nxt.feasible, sol.max_mismatch)
        return nxt, reward, info


def scaled_cost(cost: float, case: NetworkCase, config: EnvConfig = EnvConfig()) -> float:
    return GridEnv(case, config).scaled_cost(cost)
