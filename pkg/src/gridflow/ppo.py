"""PPO with GAE for the dispatch environment.

The optimiser minimises ``-L_clip + k1 * L_value - k2 * L_entropy``, i.e.
the negation of the maximised PPO objective.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .environment import EnvConfig, GridEnv, StepInfo
from .gnn import GnnConfig, GraphState, PolicyParams, init_params, policy_logits, sample_action, state_value
from .grid_model import NetworkCase
from .nn import AdamState, Tensor, concat, minimum

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "episode", "mean_reward", "final_cost", "feasible_fraction",
    "l_clip", "l_value", "l_entropy", "wall_ms",
]

# random streams derived from the root seed: default_rng((seed, STREAM, counter))
STREAM_INIT, STREAM_EPISODE, STREAM_SHUFFLE, STREAM_SELECT, STREAM_EVAL = range(5)


def stream_rng(seed: int, stream: int, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng((int(seed), stream, counter))


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    epsilon: float = 0.2
    k1: float = 0.5
    k2: float = 0.01
    minibatch: int = 25
    epochs: int = 3
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    episodes: int = 500
    horizon: int = 125
    seed: int = 0
    normalize_advantages: bool = True
    checkpoint_every: int = 25
    select_every: int = 25
    select_rollouts: int = 20
    select_horizon: int = 125  # score on the evaluation horizon, not the (possibly shorter) training one
    record_wall_time: bool = False

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 1 <= self.minibatch <= self.horizon:
            raise ValueError("need 1 <= minibatch <= horizon")
        if self.select_every and self.select_rollouts < 10:
            raise ValueError("checkpoint selection scores the best 10 rollouts; need select_rollouts >= 10")


@dataclass
class Trajectory:
    states: list  # GraphState s_t
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    next_states: list
    last_value: float  # critic value of s_T, used to bootstrap the truncated horizon
    infos: list = field(default_factory=list)
    env_states: list = field(default_factory=list)  # s_0 .. s_T

    def __len__(self):
        return len(self.actions)


def collect_episode(env: GridEnv, params: PolicyParams, horizon: int, rng, greedy: bool = False,
                    logits_fn: Callable[[GraphState], np.ndarray] | None = None,
                    with_values: bool = True) -> Trajectory:
    """Roll out ``horizon`` steps from ``env.reset()`` under the actor."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    s = env.reset()
    states, nexts, acts, rews, logps, vals, infos, env_states = [], [], [], [], [], [], [], [s]
    with nn.no_grad():
        for _ in range(horizon):
            logits = logits_fn(s.graph) if logits_fn else policy_logits(params, s.graph).data
            a, lp = sample_action(logits, rng, greedy=greedy)
            v = state_value(params, s.graph).item() if with_values else 0.0
            nxt, r, info = env.step(s, a)
            states.append(s.graph)
            nexts.append(nxt.graph)
            acts.append(a)
            rews.append(r)
            logps.append(lp)
            vals.append(v)
            infos.append(info)
            env_states.append(nxt)
            s = nxt
        last = state_value(params, s.graph).item() if with_values else 0.0
    return Trajectory(states, np.array(acts, dtype=int), np.array(rews, dtype=float),
                      np.array(logps), np.array(vals), nexts, last, infos, env_states)


def gae_advantages(rewards, values, last_value, gamma: float, lam: float,
                   normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Backward GAE recursion. Returns (advantages, returns); returns use the raw advantages."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = len(rewards)
    v_next = np.append(values[1:], last_value)
    delta = rewards + gamma * v_next - values
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    returns = adv + values
    if normalize and T > 1:
        std = adv.std()
        adv = (adv - adv.mean()) / (std if std > 0 else 1.0)
    return adv, returns


def ppo_loss(params: PolicyParams, states, actions, old_log_probs, advantages, returns,
             cfg: PpoConfig) -> tuple[Tensor, dict]:
    """Clipped-surrogate PPO loss to minimise over one minibatch."""
    surrogate, sq_err, entropy = [], [], []
    eps = cfg.epsilon
    for g, a, old_lp, adv, ret in zip(states, actions, old_log_probs, advantages, returns):
        logp = policy_logits(params, g).log_softmax()
        ratio = (logp[int(a)] - float(old_lp)).exp()
        surrogate.append(minimum(ratio * float(adv), ratio.clip(1 - eps, 1 + eps) * float(adv)))
        v = state_value(params, g)
        sq_err.append((v - float(ret)).square())
        entropy.append(-(logp.exp() * logp).sum())
    l_clip = concat([s.reshape(1) for s in surrogate]).mean()
    l_value = concat([s.reshape(1) for s in sq_err]).mean()
    l_entropy = concat([s.reshape(1) for s in entropy]).mean()
    loss = -l_clip + cfg.k1 * l_value - cfg.k2 * l_entropy
    return loss, {"l_clip": l_clip.item(), "l_value": l_value.item(), "l_entropy": l_entropy.item()}


@dataclass
class TrainResult:
    params: PolicyParams
    best_params: PolicyParams | None
    metrics: list
    best_score: float = float("inf")
    checkpoints: list = field(default_factory=list)

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _snapshot(params: PolicyParams) -> dict:
    return {k: t.data.copy() for k, t in params.named_parameters().items()}


def checkpoint_meta(params: PolicyParams, episode: int, extra: dict | None = None) -> dict:
    return {"gnn": asdict(params.config), "episode": episode, **(extra or {})}


def train(case: NetworkCase, cfg: PpoConfig = PpoConfig(), gnn_cfg: GnnConfig = GnnConfig(),
          env_cfg: EnvConfig = EnvConfig(), out_dir: str | Path | None = None,
          progress: Callable[[dict], None] | None = None,
          on_step: Callable[[int, StepInfo], None] | None = None) -> TrainResult:
    """Alternate one collected episode with ``epochs`` passes of minibatch Adam updates."""
    from .evaluation import evaluate_policy, summarize, InsufficientFeasible

    env = GridEnv(case, env_cfg)
    params = init_params(gnn_cfg, stream_rng(cfg.seed, STREAM_INIT))
    named = params.named_parameters()
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE)
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(params=params, best_params=None, metrics=[])

    def save(name, arrays, episode, extra=None):
        if ckpt_dir is None:
            return
        tensors = {k: Tensor(v) for k, v in arrays.items()}
        path = ckpt_dir / name
        nn.save_checkpoint(path, tensors, checkpoint_meta(params, episode, extra))
        result.checkpoints.append(path)

    save("ep_0000.json", _snapshot(params), 0)
    best_arrays = None

    for episode in range(1, cfg.episodes + 1):
        t0 = time.perf_counter()
        traj = collect_episode(env, params, cfg.horizon, stream_rng(cfg.seed, STREAM_EPISODE, episode))
        if on_step:
            for info in traj.infos:
                on_step(episode, info)
        adv, ret = gae_advantages(traj.rewards, traj.values, traj.last_value, cfg.gamma, cfg.lam,
                                  cfg.normalize_advantages)
        parts_log = []
        T = len(traj)
        for _ in range(cfg.epochs):
            perm = shuffle_rng.permutation(T)
            for start in range(0, T, cfg.minibatch):
                mb = perm[start:start + cfg.minibatch]
                loss, parts = ppo_loss(params, [traj.states[i] for i in mb], traj.actions[mb],
                                       traj.log_probs[mb], adv[mb], ret[mb], cfg)
                grads = nn.gradients(loss, named)
                nn.adam_step(named, grads, adam)
                parts_log.append(parts)

        final = traj.env_states[-1]
        row = {
            "episode": episode,
            "mean_reward": float(traj.rewards.mean()),
            "final_cost": float(final.cost),
            "feasible_fraction": float(np.mean([s.feasible for s in traj.env_states[1:]])),
            "l_clip": float(np.mean([p["l_clip"] for p in parts_log])),
            "l_value": float(np.mean([p["l_value"] for p in parts_log])),
            "l_entropy": float(np.mean([p["l_entropy"] for p in parts_log])),
            "wall_ms": round((time.perf_counter() - t0) * 1000) if cfg.record_wall_time else 0,
        }
        result.metrics.append(row)
        if progress:
            progress(row)

        if cfg.checkpoint_every and episode % cfg.checkpoint_every == 0:
            save(f"ep_{episode:04d}.json", _snapshot(params), episode)
        if cfg.select_every and (episode % cfg.select_every == 0 or episode == cfg.episodes):
            roll = evaluate_policy(params, case, rollouts=cfg.select_rollouts, T=cfg.select_horizon,
                                   seed=(cfg.seed, STREAM_SELECT, episode), env_cfg=env_cfg)
            try:
                score = summarize(roll.costs, roll.flags, reference_cost=1.0).best10_mean_cost
            except InsufficientFeasible:
                score = float("inf")
            # an unscoreable policy never becomes "best"; with no finite score best_params stays None
            if np.isfinite(score) and score < result.best_score:
                result.best_score = score
                best_arrays = _snapshot(params)
                save("best.json", best_arrays, episode, {"select_score": score})
            log.info("episode %d select score %.4f (best %.4f)", episode, score, result.best_score)

    if cfg.episodes > 0:
        save("final.json", _snapshot(params), cfg.episodes)
    if best_arrays is not None:
        best = init_params(gnn_cfg, 0)
        result.best_params = best.load_arrays(best_arrays)
    if out is not None:
        (out / "metrics.csv").write_text(result.metrics_csv())
    return result
