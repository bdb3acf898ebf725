"""Linearised (DC) optimal power flow baseline.

Quadratic costs are replaced by ``segments`` equal-width chords over
[pmin, pmax]; because the costs are convex the LP fills cheaper segments
first.  Angles are split into positive and negative parts for the simplex.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_model import NetworkCase
from .power_flow import solve_pf
from .simplex import linprog

DC_EVAL_MODES = ("lp", "quad", "ac")


@dataclass(frozen=True)
class DispatchSolution:
    p: np.ndarray  # MW per generator, slack unit included
    theta: np.ndarray  # rad per bus
    objective: float  # $/h, piecewise-linear cost
    status: str

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "p": None if self.p is None else self.p.tolist(),
            "theta": None if self.theta is None else self.theta.tolist(),
        }


def susceptance_matrix(case: NetworkCase) -> np.ndarray:
    a = case.arrays
    b = 1.0 / a.x
    B = np.zeros((a.n_bus, a.n_bus))
    np.add.at(B, (a.f, a.t), -b)
    np.add.at(B, (a.t, a.f), -b)
    np.add.at(B, (a.f, a.f), b)
    np.add.at(B, (a.t, a.t), b)
    return B


def piecewise_segments(gen, segments: int) -> tuple[float, np.ndarray]:
    """Segment width (MW) and per-segment slope ($/MWh) of a generator's cost chords."""
    width = (gen.pmax - gen.pmin) / segments
    if width == 0:
        return 0.0, np.zeros(segments)
    knots = gen.pmin + width * np.arange(segments + 1)
    costs = np.array([gen.cost(p) for p in knots])
    return width, np.diff(costs) / width


def piecewise_cost(case: NetworkCase, p_mw, segments: int) -> float:
    """Cost of ``p_mw`` under the same chord approximation the LP uses."""
    total = 0.0
    for g, p in zip(case.generators, p_mw):
        width, slopes = piecewise_segments(g, segments)
        total += g.cost(g.pmin)
        if width > 0:
            fill = np.clip((p - g.pmin) - width * np.arange(segments), 0.0, width)
            total += float(slopes @ fill)
    return total


def solve_dcopf(case: NetworkCase, segments: int = 20) -> DispatchSolution:
    if segments < 1:
        raise ValueError("segments must be >= 1")
    a = case.arrays
    base = case.base_mva
    G, n = len(case.generators), a.n_bus
    non_slack = [i for i in range(n) if i != a.slack]
    nS, nT = G * segments, len(non_slack)
    nv = nS + 2 * nT

    c = np.zeros(nv)
    widths = np.zeros(G)
    const = 0.0
    for g, gen in enumerate(case.generators):
        widths[g], slopes = piecewise_segments(gen, segments)
        c[g * segments:(g + 1) * segments] = slopes
        const += gen.cost(gen.pmin)

    B = susceptance_matrix(case)
    col_of = {bus: nS + k for k, bus in enumerate(non_slack)}
    pmin_bus = np.zeros(n)
    for g, gen in enumerate(case.generators):
        pmin_bus[a.gen_bus[g]] += gen.pmin / base

    A_eq, b_eq = [], []
    for i in non_slack:
        row = np.zeros(nv)
        for g in range(G):
            if a.gen_bus[g] == i:
                row[g * segments:(g + 1) * segments] = 1.0 / base
        for j in non_slack:
            row[col_of[j]] -= B[i, j]
            row[col_of[j] + nT] += B[i, j]
        A_eq.append(row)
        b_eq.append(a.p_load[i] - pmin_bus[i])
    row = np.zeros(nv)
    row[:nS] = 1.0
    A_eq.append(row)
    b_eq.append(a.p_load.sum() * base - sum(gen.pmin for gen in case.generators))

    A_ub, b_ub = [], []
    for g in range(G):
        for k in range(segments):
            row = np.zeros(nv)
            row[g * segments + k] = 1.0
            A_ub.append(row)
            b_ub.append(widths[g])
    for br_k, (f, t) in enumerate(zip(a.f, a.t)):
        if not np.isfinite(a.rating[br_k]):
            continue
        row = np.zeros(nv)
        if f in col_of:
            row[col_of[f]] += 1.0 / a.x[br_k]
            row[col_of[f] + nT] -= 1.0 / a.x[br_k]
        if t in col_of:
            row[col_of[t]] -= 1.0 / a.x[br_k]
            row[col_of[t] + nT] += 1.0 / a.x[br_k]
        A_ub.extend([row, -row])
        b_ub.extend([a.rating[br_k], a.rating[br_k]])

    res = linprog(c, np.array(A_ub).reshape(-1, nv), np.array(b_ub),
                  np.array(A_eq).reshape(-1, nv), np.array(b_eq))
    if res.status != "optimal":
        return DispatchSolution(p=None, theta=None, objective=float("nan"), status="infeasible")
    x = res.x
    p = np.array([gen.pmin + x[g * segments:(g + 1) * segments].sum()
                  for g, gen in enumerate(case.generators)])
    p = np.clip(p, [g.pmin for g in case.generators], [g.pmax for g in case.generators])
    theta = np.zeros(n)
    for i in non_slack:
        theta[i] = x[col_of[i]] - x[col_of[i] + nT]
    return DispatchSolution(p=p, theta=theta, objective=res.objective + const, status="optimal")


def dc_flows(case: NetworkCase, sol: DispatchSolution) -> np.ndarray:
    """Branch MW flows from the from-bus to the to-bus."""
    a = case.arrays
    return (sol.theta[a.f] - sol.theta[a.t]) / a.x * case.base_mva


def dc_cost(case: NetworkCase, sol: DispatchSolution, mode: str = "ac") -> float:
    """Cost of a DC-OPF dispatch: LP objective, true quadratic, or quadratic after an AC power flow."""
    if mode not in DC_EVAL_MODES:
        raise ValueError(f"unknown dc-eval mode {mode!r}")
    if sol.status != "optimal":
        return float("nan")
    if mode == "lp":
        return sol.objective
    if mode == "quad":
        return case.total_cost(sol.p)
    pf = solve_pf(case, sol.p[case.arrays.dispatchable])
    if not pf.converged:
        return float("nan")
    return case.total_cost(pf.gen_p)
