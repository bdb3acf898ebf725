"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary block at
the end of the pytest output lists every criterion.  Criterion 7 trains on
IEEE-30 and takes several minutes on one core.
"""
import dataclasses
import time

import numpy as np
import pytest

from acceptance_log import record
from gridflow import nn
from gridflow.cli import main as cli_main
from gridflow.dc_opf import solve_dcopf
from gridflow.environment import GridEnv
from gridflow.evaluation import bundled_suite_path, evaluate_policy, load_suite, run_suite
from gridflow.gnn import GnnConfig, GraphState, init_params, policy_logits, state_value
from gridflow.grid_model import load_bundled, remove_branches, remove_loads
from gridflow.power_flow import losses, solve_pf
from gridflow.ppo import PpoConfig, collect_episode, gae_advantages, ppo_loss, stream_rng, train
from oracles import gae_double_sum, ppo_loss_script
from test_dc_opf import random_feasible_costs
from test_power_flow import gs_solution


def test_criterion_1_ac_power_flow():
    t0 = time.perf_counter()
    worst = 0.0
    for name in ("toy2", "toy3", "toy4"):
        case = load_bundled(name)
        dispatch = [0.5 * (g.pmin + g.pmax) for g in case.dispatchable]
        sol = solve_pf(case, dispatch)
        v, th = gs_solution(case, dispatch)
        worst = max(worst, np.abs(sol.v - v).max(), np.abs(sol.theta - th).max())
    ieee = load_bundled("ieee30")
    base = solve_pf(ieee, GridEnv(ieee).reset().dispatch)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and base.converged and base.iterations <= 10 and base.max_mismatch < 1e-8 and elapsed < 1.0
    record(1, ok, f"max |NR-GS| {worst:.1e} p.u.; IEEE-30 {base.iterations} iters, "
                  f"mismatch {base.max_mismatch:.1e}; {elapsed:.2f}s")
    assert ok


def test_criterion_2_power_balance():
    case = load_bundled("ieee30")
    rng = np.random.default_rng(2024)
    lo = np.array([g.pmin for g in case.dispatchable])
    hi = np.array([g.pmax for g in case.dispatchable])
    worst, converged = 0.0, 0
    for _ in range(200):
        sol = solve_pf(case, lo + rng.random(len(lo)) * (hi - lo))
        if not sol.converged:
            continue
        converged += 1
        gap = sol.gen_p.sum() / case.base_mva - case.arrays.p_load.sum() - losses(case, sol)
        worst = max(worst, abs(gap))
    ok = converged > 0 and worst < 1e-7
    record(2, ok, f"{converged}/200 converged, max |gen - load - losses| {worst:.1e} p.u.")
    assert ok


def test_criterion_3_dc_opf():
    t0 = time.perf_counter()
    toy = solve_dcopf(load_bundled("dc_toy"))
    toy_ok = toy.status == "optimal" and abs(toy.objective - 1600.0) < 1e-9 and np.allclose(toy.p, [100, 20])
    ieee = load_bundled("ieee30")
    sol = solve_dcopf(ieee, 20)
    sampled = random_feasible_costs(ieee, 10_000, 20, seed=7)
    elapsed = time.perf_counter() - t0
    ok = toy_ok and sol.objective <= sampled.min() + 1e-9 and elapsed < 5.0
    record(3, ok, f"toy {toy.objective:.6f} (hand 1600); IEEE-30 LP {sol.objective:.3f} "
                  f"<= best sampled {sampled.min():.3f}; {elapsed:.2f}s")
    assert ok


def random_six_node_graph(seed):
    rng = np.random.default_rng(seed)
    s = [0, 0, 1, 2, 3, 1, 4]
    r = [1, 2, 3, 4, 5, 5, 5]
    return GraphState(rng.uniform(0, 1, (6, 4)), rng.uniform(0, 1, (len(s), 2)), np.array(s), np.array(r),
                      np.array([0, 2, 5]))


def test_criterion_4_gradient_integrity():
    t0 = time.perf_counter()
    g = random_six_node_graph(42)
    params = init_params(GnnConfig(zero_heads=False), 42)  # zeroed heads leave only the output layer with a gradient
    named = params.named_parameters()
    actor = nn.finite_diff_check(named, lambda: policy_logits(params, g).log_softmax()[2], samples=150, seed=1)
    critic = nn.finite_diff_check(named, lambda: state_value(params, g), samples=150, seed=2)
    elapsed = time.perf_counter() - t0
    ok = max(actor, critic) < 1e-4 and elapsed < 10.0
    record(4, ok, f"max rel err actor {actor:.1e}, critic {critic:.1e}; {elapsed:.1f}s")
    assert ok


def test_criterion_5_gae_and_clip_oracles():
    rng = np.random.default_rng(5)
    worst_gae = 0.0
    for T in (1, 4, 17, 60):
        r, v = rng.normal(size=T), rng.normal(size=T)
        last = float(rng.normal())
        adv, _ = gae_advantages(r, v, last, 0.99, 0.95, normalize=False)
        worst_gae = max(worst_gae, np.abs(adv - gae_double_sum(r, v, last, 0.99, 0.95)).max())
    fixed, _ = gae_advantages([1.0, 0.0, -1.0, 2.0], [0.5, 0.2, -0.1, 0.3], 0.4, 0.9, 0.8, normalize=False)
    worst_gae = max(worst_gae, np.abs(fixed - [0.91349888, 0.324304, 0.8532, 2.06]).max())

    case = load_bundled("toy4")
    params = init_params(GnnConfig(zero_heads=False), 9)
    traj = collect_episode(GridEnv(case), params, 8, stream_rng(1, 1))
    old = traj.log_probs + rng.normal(scale=0.3, size=8)
    adv, ret = rng.normal(size=8), rng.normal(size=8)
    cfg = PpoConfig(horizon=8, minibatch=8)
    loss, _ = ppo_loss(params, traj.states, traj.actions, old, adv, ret, cfg)
    with nn.no_grad():
        lps = [policy_logits(params, s).log_softmax().data for s in traj.states]
        vals = [state_value(params, s).item() for s in traj.states]
    ref = ppo_loss_script(lps, old, traj.actions, adv, vals, ret, cfg.epsilon, cfg.k1, cfg.k2)[0]
    loss_err = abs(loss.item() - ref)
    ok = worst_gae < 1e-10 and loss_err < 1e-10
    record(5, ok, f"GAE max err {worst_gae:.1e}; PPO loss err {loss_err:.1e}")
    assert ok


def test_criterion_6_bandit():
    t0 = time.perf_counter()
    case = load_bundled("bandit")
    env = GridEnv(case)
    s0 = env.reset()
    # the cost-optimal unit is the one whose raise lowers the cost most from reset
    gains = [env.step(s0, a)[1] for a in range(env.n_actions)]
    best = int(np.argmax(gains))
    cfg = PpoConfig(episodes=200, horizon=10, minibatch=10, select_every=0, checkpoint_every=0)
    res = train(case, cfg)
    with nn.no_grad():
        p = np.exp(policy_logits(res.params, s0.graph).log_softmax().data)
    elapsed = time.perf_counter() - t0
    ok = p[best] >= 0.9 and elapsed < 120
    record(6, ok, f"p(cost-optimal unit {best}) = {p[best]:.3f} after 200 episodes; {elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def scaled_run(tmp_path_factory):
    case = load_bundled("ieee30")
    t0 = time.perf_counter()
    res = train(case, PpoConfig(episodes=150, horizon=60), out_dir=tmp_path_factory.mktemp("c7"))
    return res, time.perf_counter() - t0


def test_criterion_7_scaled_reproduction(scaled_run):
    res, train_s = scaled_run
    t0 = time.perf_counter()
    case = load_bundled("ieee30")
    rows = {r["name"]: r for r in load_suite(bundled_suite_path("table1")) + load_suite(bundled_suite_path("table3"))}
    suite = [rows["load_inf0.1_sup0.1"], rows["edge_1"]]
    params = res.best_params or res.params
    reports = run_suite(params, case, suite, seed=0, rollouts=100, T=125)
    elapsed = train_s + time.perf_counter() - t0
    parts, ok = [], elapsed <= 1800
    for rep in reports:
        a = rep.convergence_ratio >= 0.9
        b = rep.drl_deviation_pct <= 5.0
        c = rep.drl_deviation_pct <= 3 * rep.dcopf_deviation_pct
        ok = ok and a and b and c and rep.status == "ok"
        parts.append(f"{rep.test_name}: conv {rep.convergence_ratio:.2f}{'' if a else '!'} "
                     f"dev {rep.drl_deviation_pct:.3f}%{'' if b else '!'} "
                     f"vs 3xDC {3 * rep.dcopf_deviation_pct:.3f}%{'' if c else '!'}")
    record(7, ok, "; ".join(parts) + f"; {elapsed / 60:.1f} min")
    assert ok


def test_criterion_8_generalisation(scaled_run):
    res, _ = scaled_run
    case = load_bundled("ieee30")
    fewer_loads = remove_loads(case, 1, seed=0)
    fewer_branches = remove_branches(case, 1, seed=0)
    shapes = []
    for c in (fewer_loads, fewer_branches):
        roll = evaluate_policy(res.params, c, rollouts=3, T=10, seed=0)
        assert roll.costs.shape == (3,)
        shapes.append(f"{len(c.loads)} loads/{len(c.branches)} branches ok")
    ok = len(fewer_loads.loads) == 19 and len(fewer_branches.branches) == 39
    record(8, ok, "; ".join(shapes))
    assert ok


def test_criterion_9_determinism(tmp_path, capsys):
    tiny = ["--case", "ieee30", "--episodes", "4", "--horizon", "8", "--minibatch", "8",
            "--checkpoint-every", "2", "--select-every", "2", "--select-rollouts", "10", "--seed", "11"]
    assert cli_main(["train", *tiny, "--out", str(tmp_path / "seed")]) == 0
    manifest = tmp_path / "seed" / "run_manifest.json"
    for run in ("a", "b"):
        assert cli_main(["train", "--config", str(manifest), "--out", str(tmp_path / run), "--workers", "1"]) == 0
    capsys.readouterr()
    a, b = tmp_path / "a", tmp_path / "b"
    same_csv = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    names = sorted(p.name for p in (a / "checkpoints").iterdir())
    same_ckpt = names == sorted(p.name for p in (b / "checkpoints").iterdir()) and all(
        (a / "checkpoints" / n).read_bytes() == (b / "checkpoints" / n).read_bytes() for n in names)
    ok = same_csv and same_ckpt
    record(9, ok, f"metrics.csv identical: {same_csv}; {len(names)} checkpoints identical: {same_ckpt}")
    assert ok
