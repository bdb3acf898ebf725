"""Newton-Raphson AC power flow on a dense bus admittance matrix.

Sign convention for the admittance matrix: for a branch of series impedance
z = r + jx between buses i and j, ``Y[i, j] = -1/z`` and the diagonal holds
the sum of the series admittances incident to the bus.  A 2-bus line with
r=0, x=0.1 therefore has ``Y[0, 1] = -1/(0.1j) = +10j`` and ``Y[0, 0] = -10j``.

The slack unit absorbs whatever active and reactive power the scheduled
injections leave unbalanced.  This is what gives dispatch decisions a cost
signal: raising a cheap generator displaces (expensive) slack output.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid_model import NetworkCase

log = logging.getLogger(__name__)

TOLERANCE = 1e-8
MAX_ITERATIONS = 30
CHECKS = ("diverged", "voltage", "slack_p", "rating")


@dataclass(frozen=True)
class PfSolution:
    v: np.ndarray
    theta: np.ndarray
    p_net: np.ndarray  # p.u. injection per bus, computed from the solved state
    q_net: np.ndarray
    slack_p: float  # p.u. output of the slack generator
    slack_q: float
    converged: bool
    iterations: int
    max_mismatch: float
    gen_p: np.ndarray = field(default=None)  # MW per generator (slack included)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "max_mismatch": self.max_mismatch,
            "v": self.v.tolist(),
            "theta": self.theta.tolist(),
            "p_net": self.p_net.tolist(),
            "q_net": self.q_net.tolist(),
            "slack_p": self.slack_p,
            "slack_q": self.slack_q,
            "gen_p": None if self.gen_p is None else self.gen_p.tolist(),
        }


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    violations: tuple[str, ...] = ()


def build_admittance(case: NetworkCase) -> np.ndarray:
    a = case.arrays
    y = 1.0 / (a.r + 1j * a.x)
    n = a.n_bus
    Y = np.zeros((n, n), dtype=complex)
    np.add.at(Y, (a.f, a.t), -y)
    np.add.at(Y, (a.t, a.f), -y)
    np.add.at(Y, (a.f, a.f), y)
    np.add.at(Y, (a.t, a.t), y)
    return Y


def full_dispatch(case: NetworkCase, dispatch, clamp: bool = True) -> np.ndarray:
    """Per-generator MW vector with the slack unit at 0 (it is solved for)."""
    d = np.asarray(dispatch, dtype=float).reshape(-1)
    gens = case.dispatchable
    if d.shape[0] != len(gens):
        raise ValueError(f"dispatch has {d.shape[0]} entries, case has {len(gens)} dispatchable generators")
    if clamp:
        lo = np.array([g.pmin for g in gens])
        hi = np.array([g.pmax for g in gens])
        if np.any(d < lo - 1e-12) or np.any(d > hi + 1e-12):
            log.warning("dispatch outside generator limits, clamping")
        d = np.clip(d, lo, hi)
    p = np.zeros(len(case.generators))
    p[case.arrays.dispatchable] = d
    return p


def power_injections(Y: np.ndarray, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    V = v * np.exp(1j * theta)
    return V * np.conj(Y @ V)


def _jacobian(Y, V, pvpq, pq):
    # dS/dVa and dS/dVm in polar form (standard complex-matrix derivation)
    Ibus = Y @ V
    diagV = np.diag(V)
    diagI = np.diag(Ibus)
    diagVn = np.diag(V / np.abs(V))
    dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
    dS_dVm = diagV @ np.conj(Y @ diagVn) + np.conj(diagI) @ diagVn
    J11 = dS_dVa[np.ix_(pvpq, pvpq)].real
    J12 = dS_dVm[np.ix_(pvpq, pq)].real
    J21 = dS_dVa[np.ix_(pq, pvpq)].imag
    J22 = dS_dVm[np.ix_(pq, pq)].imag
    return np.block([[J11, J12], [J21, J22]])


def newton_raphson(Y, v0, theta0, p_spec, q_spec, slack, pv, pq,
                   tol=TOLERANCE, max_iter=MAX_ITERATIONS):
    """Solve the polar mismatch equations. Returns (v, theta, converged, iterations, mismatch)."""
    pvpq = np.sort(np.concatenate([pv, pq])).astype(int)
    pq = np.asarray(pq, dtype=int)
    v = v0.astype(float).copy()
    theta = theta0.astype(float).copy()
    npvpq = len(pvpq)

    def mismatch(v, theta):
        s = power_injections(Y, v, theta)
        return np.concatenate([s.real[pvpq] - p_spec[pvpq], s.imag[pq] - q_spec[pq]])

    f = mismatch(v, theta)
    err = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    while err >= tol:
        if it >= max_iter or not np.isfinite(err):
            return v, theta, False, it, err
        V = v * np.exp(1j * theta)
        J = _jacobian(Y, V, pvpq, pq)
        try:
            dx = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            return v, theta, False, it, err
        theta[pvpq] += dx[:npvpq]
        v[pq] += dx[npvpq:]
        it += 1
        f = mismatch(v, theta)
        err = float(np.max(np.abs(f)))
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            return v, theta, False, it, float("inf")
    return v, theta, True, it, err


def solve_pf(case: NetworkCase, dispatch, *, tol: float = TOLERANCE,
             max_iter: int = MAX_ITERATIONS, enforce_q_limits: bool = False,
             Y: np.ndarray | None = None) -> PfSolution:
    """AC power flow for MW ``dispatch`` over ``case.dispatchable`` generators.

    Divergence and singular Jacobians are reported as ``converged=False``.
    """
    a = case.arrays
    base = case.base_mva
    if Y is None:
        Y = build_admittance(case)
    gen_p = full_dispatch(case, dispatch)
    p_gen_bus = np.zeros(a.n_bus)
    np.add.at(p_gen_bus, a.gen_bus, gen_p / base)
    p_spec = p_gen_bus - a.p_load
    q_spec = -a.q_load.copy()
    pv, pq = a.pv.copy(), a.pq.copy()
    v0 = np.ones(a.n_bus)
    v0[a.slack] = a.v_set[a.slack]
    v0[pv] = a.v_set[pv]
    theta0 = np.zeros(a.n_bus)

    v, theta, ok, it, err = newton_raphson(Y, v0, theta0, p_spec, q_spec, a.slack, pv, pq, tol, max_iter)
    if ok and enforce_q_limits:
        v, theta, ok, it, err, q_spec, pv, pq = _enforce_q_limits(
            case, Y, v, theta, p_spec, q_spec, pv, pq, it, tol, max_iter)

    s = power_injections(Y, v, theta)
    if not ok:
        s = np.full(a.n_bus, np.nan + 1j * np.nan) if not np.all(np.isfinite(s)) else s
    # the slack unit takes the slack bus residual net of any co-located fixed generators
    slack_s = s[a.slack] + (a.p_load[a.slack] + 1j * a.q_load[a.slack]) - p_gen_bus[a.slack]
    gen_p = gen_p.copy()
    gen_p[a.slack_gen] = slack_s.real * base
    return PfSolution(
        v=v, theta=theta, p_net=s.real, q_net=s.imag,
        slack_p=float(slack_s.real), slack_q=float(slack_s.imag),
        converged=bool(ok), iterations=it, max_mismatch=err, gen_p=gen_p,
    )


def _enforce_q_limits(case, Y, v, theta, p_spec, q_spec, pv, pq, it, tol, max_iter):
    """Switch PV buses whose generators violate Q limits to PQ at the limit."""
    a = case.arrays
    base = case.base_mva
    q_spec = q_spec.copy()
    ok, err = True, 0.0
    for _ in range(len(pv) + 1):
        s = power_injections(Y, v, theta)
        switched = []
        for bus in pv:
            gens = [g for g in case.generators if a.bus_index[g.bus] == bus]
            qmin = sum(g.qmin for g in gens) / base
            qmax = sum(g.qmax for g in gens) / base
            q_gen = s.imag[bus] + a.q_load[bus]
            if q_gen > qmax + tol or q_gen < qmin - tol:
                q_spec[bus] = (qmax if q_gen > qmax else qmin) - a.q_load[bus]
                switched.append(bus)
        if not switched:
            break
        pv = np.array([b for b in pv if b not in switched], dtype=int)
        pq = np.sort(np.concatenate([pq, switched])).astype(int)
        v, theta, ok, n_it, err = newton_raphson(Y, v, theta, p_spec, q_spec, a.slack, pv, pq, tol, max_iter)
        it += n_it
        if not ok:
            break
    return v, theta, ok, it, err, q_spec, pv, pq


def branch_flows(case: NetworkCase, sol: PfSolution) -> tuple[np.ndarray, np.ndarray]:
    """Complex p.u. power entering each branch at its from and to ends."""
    a = case.arrays
    V = sol.v * np.exp(1j * sol.theta)
    y = 1.0 / (a.r + 1j * a.x)
    i_ft = (V[a.f] - V[a.t]) * y
    return V[a.f] * np.conj(i_ft), V[a.t] * np.conj(-i_ft)


def losses(case: NetworkCase, sol: PfSolution) -> float:
    """Active losses (p.u.) as the sum of I^2 r over branches."""
    a = case.arrays
    V = sol.v * np.exp(1j * sol.theta)
    i_ft = (V[a.f] - V[a.t]) / (a.r + 1j * a.x)
    return float(np.sum(np.abs(i_ft) ** 2 * a.r))


def check_feasibility(sol: PfSolution, case: NetworkCase, checks=CHECKS,
                      v_tol: float = 1e-6) -> FeasibilityReport:
    checks = set(checks)
    unknown = checks - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown feasibility checks {sorted(unknown)}")
    if not sol.converged:
        # nothing else is meaningful without a solved state
        return FeasibilityReport(False, ("diverged",)) if "diverged" in checks else FeasibilityReport(True)
    a = case.arrays
    out = []
    if "voltage" in checks:
        for i, b in enumerate(case.buses):
            if sol.v[i] < b.vmin - v_tol or sol.v[i] > b.vmax + v_tol:
                out.append(f"voltage: bus {b.id} V={sol.v[i]:.4f} outside [{b.vmin}, {b.vmax}]")
    if "slack_p" in checks:
        g = case.slack_generator
        p = sol.slack_p * case.base_mva
        if p < g.pmin - 1e-6 or p > g.pmax + 1e-6:
            out.append(f"slack_p: generator {g.id} P={p:.3f} MW outside [{g.pmin}, {g.pmax}]")
    if "rating" in checks and np.any(np.isfinite(a.rating)):
        s_f, s_t = branch_flows(case, sol)
        flow = np.maximum(np.abs(s_f), np.abs(s_t))
        for k in np.nonzero(flow > a.rating + 1e-9)[0]:
            br = case.branches[k]
            out.append(f"rating: branch {br.id} S={flow[k] * case.base_mva:.3f} MVA > {br.rating}")
    return FeasibilityReport(not out, tuple(out))
