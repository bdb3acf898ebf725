"""Message-passing GNN actor and critic over the grid graph.

Each message iteration sends, along every branch in both directions,
``m = message_mlp([h_receiver, h_sender, e])``.  A node aggregates its
incoming messages as ``[min, max, mean]`` (zeros when it has no neighbours)
and updates ``h = update_mlp([h, aggregate])``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import nn
from .nn import Mlp, Tensor, concat, masked_reduce

N_NODE_FEATURES = 4
N_EDGE_FEATURES = 2


@dataclass(frozen=True)
class GnnConfig:
    d: int = 16
    k: int = 4
    hidden: int = 32
    shared_message_passing: bool = False
    # He-style scale with zero biases; gain 1 with uniform biases collapses the
    # node embeddings to a constant after k rounds of 5-layer relu updates
    init_gain: float = 6 ** 0.5
    zero_bias: bool = True
    # zero output layer on both readouts: uniform first policy, V = 0, so an
    # untrained critic does not swamp the small per-step rewards
    zero_heads: bool = True


@dataclass(frozen=True, eq=False)
class GraphState:
    node_features: np.ndarray  # (n, 4) scaled [V, theta, P, Q]
    edge_features: np.ndarray  # (m, 2) scaled [R, X]
    senders: np.ndarray  # (m,) branch from-bus index
    receivers: np.ndarray  # (m,) branch to-bus index
    generator_nodes: np.ndarray  # bus index of each dispatchable generator

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @cached_property
    def neighbourhood(self):
        """Directed message list and padded per-node slots sorted by sender id.

        Returns ``(src, dst, edge, slots, mask)``: message ``j`` goes from
        ``src[j]`` to ``dst[j]`` with edge features ``edge[j]``; ``slots[v]``
        lists the messages arriving at ``v``.
        """
        src = np.concatenate([self.senders, self.receivers]).astype(int)
        dst = np.concatenate([self.receivers, self.senders]).astype(int)
        edge = np.concatenate([np.arange(len(self.senders))] * 2).astype(int)
        order = np.lexsort((edge, src, dst))
        src, dst, edge = src[order], dst[order], edge[order]
        n = self.n_nodes
        deg = np.bincount(dst, minlength=n)
        width = max(int(deg.max()) if deg.size else 0, 1)
        slots = np.zeros((n, width), dtype=int)
        mask = np.zeros((n, width), dtype=bool)
        start = np.concatenate([[0], np.cumsum(deg)[:-1]])
        for v in range(n):
            slots[v, : deg[v]] = np.arange(start[v], start[v] + deg[v])
            mask[v, : deg[v]] = True
        return src, dst, edge, slots, mask

    def equals(self, other: "GraphState") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("node_features", "edge_features", "senders", "receivers", "generator_nodes")
        )


@dataclass
class MessagePassing:
    message: Mlp
    update: Mlp


@dataclass
class PolicyParams:
    actor_gnn: MessagePassing
    critic_gnn: MessagePassing
    actor_readout: Mlp
    critic_readout: Mlp
    config: GnnConfig = field(default_factory=GnnConfig)

    def named_parameters(self) -> dict:
        out = {}
        for prefix, gnn in (("actor", self.actor_gnn), ("critic", self.critic_gnn)):
            if prefix == "critic" and self.config.shared_message_passing:
                continue
            out.update(gnn.message.named_parameters(f"{prefix}.message"))
            out.update(gnn.update.named_parameters(f"{prefix}.update"))
        out.update(self.actor_readout.named_parameters("actor.readout"))
        out.update(self.critic_readout.named_parameters("critic.readout"))
        return out

    def load_arrays(self, arrays: dict) -> "PolicyParams":
        params = self.named_parameters()
        if set(arrays) != set(params):
            raise ValueError("checkpoint parameter names do not match the network layout")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise nn.ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)
        return self


def init_params(cfg: GnnConfig = GnnConfig(), seed=0) -> PolicyParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, h = cfg.d, cfg.hidden
    kw = dict(gain=cfg.init_gain, zero_bias=cfg.zero_bias)

    def stack(prefix):
        return MessagePassing(
            message=Mlp.init([2 * d + N_EDGE_FEATURES, h, d], rng, name=f"{prefix}.message", **kw),
            update=Mlp.init([d + 3 * d, h, h, d], rng, name=f"{prefix}.update", **kw),
        )

    actor = stack("actor")
    critic = actor if cfg.shared_message_passing else stack("critic")
    actor_head = Mlp.init([d, h, h, 1], rng, name="actor.readout", **kw)
    critic_head = Mlp.init([3 * d, h, h, 1], rng, name="critic.readout", **kw)
    if cfg.zero_heads:
        for head in (actor_head, critic_head):
            head.weights[-1].data[:] = 0.0
    return PolicyParams(
        actor_gnn=actor,
        critic_gnn=critic,
        actor_readout=actor_head,
        critic_readout=critic_head,
        config=cfg,
    )


def init_embeddings(g: GraphState, d: int = 16) -> Tensor:
    x = np.asarray(g.node_features, dtype=float)
    if x.shape[1] > d:
        raise nn.ShapeError(f"{x.shape[1]} node features do not fit in d={d}")
    h = np.zeros((x.shape[0], d))
    h[:, : x.shape[1]] = x
    return Tensor(h)


def message_pass(h: Tensor, g: GraphState, gnn: MessagePassing, k: int) -> Tensor:
    src, dst, edge, slots, mask = g.neighbourhood
    e = Tensor(g.edge_features[edge]) if len(edge) else None
    for _ in range(k):
        if len(src):
            m = gnn.message(concat([h[dst], h[src], e], axis=-1))
            incoming = m[slots]
            agg = concat([masked_reduce(incoming, mask, "min"),
                          masked_reduce(incoming, mask, "max"),
                          masked_reduce(incoming, mask, "mean")], axis=-1)
        else:
            agg = Tensor(np.zeros((g.n_nodes, 3 * h.shape[1])))
        h = gnn.update(concat([h, agg], axis=-1))
    return h


def actor_logits(h: Tensor, g: GraphState, params: PolicyParams) -> Tensor:
    if len(g.generator_nodes) == 0:
        raise ValueError("graph has no dispatchable generators")
    return params.actor_readout(h[np.asarray(g.generator_nodes, dtype=int)]).reshape(-1)


def critic_value(h: Tensor, params: PolicyParams) -> Tensor:
    pooled = concat([h.sum(axis=0), h.min(axis=0), h.max(axis=0)], axis=-1)
    return params.critic_readout(pooled).reshape(())


def policy_logits(params: PolicyParams, g: GraphState) -> Tensor:
    cfg = params.config
    h = message_pass(init_embeddings(g, cfg.d), g, params.actor_gnn, cfg.k)
    return actor_logits(h, g, params)


def state_value(params: PolicyParams, g: GraphState) -> Tensor:
    cfg = params.config
    h = message_pass(init_embeddings(g, cfg.d), g, params.critic_gnn, cfg.k)
    return critic_value(h, params)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def sample_action(logits, rng, greedy: bool = False) -> tuple[int, float]:
    """Draw a generator index from softmax(logits); returns (index, log-prob)."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise nn.NonFiniteError("non-finite logits")
    logp = log_softmax_np(logits)
    if greedy:
        a = int(np.argmax(logits))
    else:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        a = int(rng.choice(len(logits), p=np.exp(logp)))
    return a, float(logp[a])


def load_policy(path) -> PolicyParams:
    """Rebuild a PolicyParams from a checkpoint written by training."""
    arrays, meta = nn.load_checkpoint(path)
    cfg = GnnConfig(**meta.get("gnn", {}))
    return init_params(cfg, 0).load_arrays(arrays)
