"""Grid data model, JSON case ingestion and random perturbations.

Generator and load quantities are stored in the units of the case file
(MW / MVAr, $/h cost coefficients in MW).  Everything numerical downstream
works in per-unit; ``NetworkCase.arrays`` exposes the per-unit view once.
"""
from __future__ import annotations

import dataclasses
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Any, Iterable

import numpy as np

BUS_KINDS = ("slack", "pv", "pq")
BRANCH_REMOVAL_TRIES = 1000


class ParseError(ValueError):
    """The case source is not well-formed JSON of the expected shape."""


class ValidationError(ValueError):
    """A case invariant is violated; ``path`` points at the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DisconnectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    vmin: float
    vmax: float
    v_set: float = 1.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    rating: float | None = None  # MVA


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    pmin: float
    pmax: float
    qmin: float = -1e9
    qmax: float = 1e9
    cost_c2: float = 0.0
    cost_c1: float = 0.0
    cost_c0: float = 0.0
    v_set: float = 1.0

    def cost(self, p_mw):
        return self.cost_c2 * p_mw * p_mw + self.cost_c1 * p_mw + self.cost_c0


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p: float
    q: float = 0.0


@dataclass(frozen=True)
class CaseArrays:
    """Per-unit, index-based view of a case (bus ids mapped to 0..n-1)."""

    n_bus: int
    bus_index: dict
    slack: int
    pv: np.ndarray
    pq: np.ndarray
    v_set: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    f: np.ndarray
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    rating: np.ndarray  # p.u., inf where absent
    gen_bus: np.ndarray
    p_load: np.ndarray  # p.u. per bus
    q_load: np.ndarray
    slack_gen: int
    dispatchable: np.ndarray  # generator positions, excluding the slack unit


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    slack_bus: int
    description: str = field(default="", compare=False)

    def __post_init__(self):
        for name in ("buses", "branches", "generators", "loads"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @cached_property
    def arrays(self) -> CaseArrays:
        idx = {b.id: i for i, b in enumerate(self.buses)}
        n = len(self.buses)
        kinds = [b.kind for b in self.buses]
        slack = idx[self.slack_bus]
        p_load = np.zeros(n)
        q_load = np.zeros(n)
        for ld in self.loads:
            p_load[idx[ld.bus]] += ld.p / self.base_mva
            q_load[idx[ld.bus]] += ld.q / self.base_mva
        slack_gen = min(
            (g for g, gen in enumerate(self.generators) if gen.bus == self.slack_bus),
            key=lambda g: self.generators[g].id,
        )
        return CaseArrays(
            n_bus=n,
            bus_index=idx,
            slack=slack,
            pv=np.array([i for i, k in enumerate(kinds) if k == "pv"], dtype=int),
            pq=np.array([i for i, k in enumerate(kinds) if k == "pq"], dtype=int),
            v_set=np.array([b.v_set for b in self.buses], dtype=float),
            vmin=np.array([b.vmin for b in self.buses], dtype=float),
            vmax=np.array([b.vmax for b in self.buses], dtype=float),
            f=np.array([idx[br.from_bus] for br in self.branches], dtype=int),
            t=np.array([idx[br.to_bus] for br in self.branches], dtype=int),
            r=np.array([br.r for br in self.branches], dtype=float),
            x=np.array([br.x for br in self.branches], dtype=float),
            rating=np.array(
                [np.inf if br.rating is None else br.rating / self.base_mva for br in self.branches]
            ),
            gen_bus=np.array([idx[g.bus] for g in self.generators], dtype=int),
            p_load=p_load,
            q_load=q_load,
            slack_gen=slack_gen,
            dispatchable=np.array(
                [g for g in range(len(self.generators)) if g != slack_gen], dtype=int
            ),
        )

    @property
    def dispatchable(self) -> list[Generator]:
        return [self.generators[g] for g in self.arrays.dispatchable]

    @property
    def slack_generator(self) -> Generator:
        return self.generators[self.arrays.slack_gen]

    def total_cost(self, p_mw: Iterable[float]) -> float:
        """Quadratic cost of a full per-generator MW vector (slack included)."""
        return float(sum(g.cost(p) for g, p in zip(self.generators, p_mw)))


# ---------------------------------------------------------------- validation


def validate(case: NetworkCase) -> NetworkCase:
    ids = [b.id for b in case.buses]
    if not ids:
        raise ValidationError("buses", "case has no buses")
    if len(set(ids)) != len(ids):
        raise ValidationError("buses", "duplicate bus ids")
    known = set(ids)
    if case.base_mva <= 0:
        raise ValidationError("base_mva", "must be positive")
    for i, b in enumerate(case.buses):
        p = f"buses[{i}](id={b.id})"
        if b.kind not in BUS_KINDS:
            raise ValidationError(f"{p}.kind", f"unknown bus kind {b.kind!r}")
        if not 0 < b.vmin < b.vmax:
            raise ValidationError(f"{p}.vmin", "need 0 < vmin < vmax")
        if b.kind != "pq" and not b.vmin <= b.v_set <= b.vmax:
            raise ValidationError(f"{p}.v_set", "set point outside [vmin, vmax]")
    slack_kinds = [b.id for b in case.buses if b.kind == "slack"]
    if slack_kinds != [case.slack_bus]:
        raise ValidationError("slack_bus", "exactly one slack bus, matching slack_bus, is required")
    for i, br in enumerate(case.branches):
        p = f"branches[{i}](id={br.id})"
        for end in ("from_bus", "to_bus"):
            if getattr(br, end) not in known:
                raise ValidationError(f"{p}.{end}", f"unknown bus {getattr(br, end)}")
        if br.from_bus == br.to_bus:
            raise ValidationError(p, "self loop")
        if br.r < 0:
            raise ValidationError(f"{p}.r", "negative resistance")
        if not br.x > 0:
            raise ValidationError(f"{p}.x", "reactance must be positive")
        if br.rating is not None and br.rating <= 0:
            raise ValidationError(f"{p}.rating", "rating must be positive")
    gen_buses = set()
    for i, g in enumerate(case.generators):
        p = f"generators[{i}](id={g.id})"
        if g.bus not in known:
            raise ValidationError(f"{p}.bus", f"unknown bus {g.bus}")
        if g.pmin > g.pmax:
            raise ValidationError(f"{p}.pmin", "pmin > pmax")
        if g.qmin > g.qmax:
            raise ValidationError(f"{p}.qmin", "qmin > qmax")
        if g.cost_c2 < 0:
            raise ValidationError(f"{p}.cost_c2", "negative quadratic cost")
        gen_buses.add(g.bus)
    if case.slack_bus not in gen_buses:
        raise ValidationError("slack_bus", "slack bus hosts no generator")
    for b in case.buses:
        if b.kind == "pv" and b.id not in gen_buses:
            raise ValidationError(f"buses(id={b.id}).kind", "pv bus without a generator")
    for i, ld in enumerate(case.loads):
        p = f"loads[{i}](id={ld.id})"
        if ld.bus not in known:
            raise ValidationError(f"{p}.bus", f"unknown bus {ld.bus}")
        if ld.p < 0:
            raise ValidationError(f"{p}.p", "negative load")
    if not is_connected(case):
        raise ValidationError("branches", "network is not connected")
    return case


def is_connected(case: NetworkCase) -> bool:
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    start = case.buses[0].id
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == len(adj)


# ------------------------------------------------------------------- file I/O


def _build(cls, raw: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    missing = [f.name for f in dataclasses.fields(cls)
               if f.name not in raw and f.default is dataclasses.MISSING]
    if missing:
        raise ParseError(f"{path}: missing field(s) {missing}")
    unknown = set(raw) - names
    if unknown:
        raise ParseError(f"{path}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**{k: (v if v is None or k == "kind" else _number(k, v)) for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _number(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"field {name!r} must be numeric, got {v!r}")
    return v


def case_from_dict(raw: Any) -> NetworkCase:
    if not isinstance(raw, dict):
        raise ParseError("top level must be a JSON object")
    for key in ("base_mva", "buses", "branches", "generators", "loads", "slack_bus"):
        if key not in raw:
            raise ParseError(f"missing top-level key {key!r}")
    lists = {}
    for key, cls in (("buses", Bus), ("branches", Branch), ("generators", Generator), ("loads", Load)):
        if not isinstance(raw[key], list):
            raise ParseError(f"{key} must be a list")
        items = []
        for i, item in enumerate(raw[key]):
            if not isinstance(item, dict):
                raise ParseError(f"{key}[{i}] must be an object")
            items.append(_build(cls, item, f"{key}[{i}]"))
        lists[key] = tuple(items)
    case = NetworkCase(
        base_mva=float(raw["base_mva"]),
        slack_bus=raw["slack_bus"],
        description=raw.get("description", ""),
        **lists,
    )
    return validate(case)


def load_case(source: str | Path | bytes | IO) -> NetworkCase:
    """Parse a JSON case from a path, raw bytes/str, or an open stream."""
    if isinstance(source, str) and not source.strip():
        raise ParseError("empty case source")
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = Path(source).read_text()
    elif isinstance(source, (bytes, bytearray)):
        text = source.decode()
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode()
    if not text.strip():
        raise ParseError("empty case source")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from exc
    return case_from_dict(raw)


def case_to_dict(case: NetworkCase) -> dict:
    out: dict[str, Any] = {}
    if case.description:
        out["description"] = case.description
    out["base_mva"] = case.base_mva
    out["slack_bus"] = case.slack_bus
    for key in ("buses", "branches", "generators", "loads"):
        out[key] = [dataclasses.asdict(item) for item in getattr(case, key)]
    return out


def dumps_case(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=1)


def save_case(case: NetworkCase, path: str | Path) -> None:
    Path(path).write_text(dumps_case(case))


def bundled_case_path(name: str = "ieee30") -> Path:
    return Path(__file__).parent / "data" / f"{name}.case.json"


def load_bundled(name: str = "ieee30") -> NetworkCase:
    return load_case(bundled_case_path(name))


# -------------------------------------------------------------- perturbations


def scale_loads(case: NetworkCase, lower: float, upper: float, seed: int) -> NetworkCase:
    """Multiply every load (P and Q alike) by a draw from U[1 - lower, 1 + upper]."""
    if not (0 <= lower < 1 and upper >= 0):
        raise ValueError("need 0 <= lower < 1 and upper >= 0")
    rng = np.random.default_rng(seed)
    factors = rng.uniform(1.0 - lower, 1.0 + upper, size=len(case.loads))
    loads = tuple(
        dataclasses.replace(ld, p=ld.p * float(k), q=ld.q * float(k))
        for ld, k in zip(case.loads, factors)
    )
    return dataclasses.replace(case, loads=loads)


def remove_loads(case: NetworkCase, n: int, seed: int) -> NetworkCase:
    if not 0 <= n <= len(case.loads):
        raise ValueError(f"cannot remove {n} of {len(case.loads)} loads")
    rng = np.random.default_rng(seed)
    drop = set(rng.choice(len(case.loads), size=n, replace=False).tolist())
    loads = tuple(ld for i, ld in enumerate(case.loads) if i not in drop)
    return validate(dataclasses.replace(case, loads=loads))


def remove_branches(case: NetworkCase, n: int, seed: int) -> NetworkCase:
    """Delete ``n`` random branches, rejection-sampling until the grid stays connected.

    If rejection sampling runs out of tries, non-bridge branches are removed one
    by one instead, so this only fails when no connected result exists.
    """
    if not 0 <= n <= len(case.branches):
        raise ValueError(f"cannot remove {n} of {len(case.branches)} branches")
    if n == 0:
        return case
    rng = np.random.default_rng(seed)
    for _ in range(BRANCH_REMOVAL_TRIES):
        drop = set(rng.choice(len(case.branches), size=n, replace=False).tolist())
        trial = dataclasses.replace(
            case, branches=tuple(br for i, br in enumerate(case.branches) if i not in drop)
        )
        if is_connected(trial):
            return trial
    # near-tree targets are rare under rejection; fall back to cutting non-bridges one at a time
    trial = case
    for _ in range(n):
        keep = [i for i in range(len(trial.branches)) if is_connected(
            dataclasses.replace(trial, branches=trial.branches[:i] + trial.branches[i + 1:]))]
        if not keep:
            raise DisconnectionError(f"cannot remove {n} branches and keep the network connected")
        i = int(rng.choice(keep))
        trial = dataclasses.replace(trial, branches=trial.branches[:i] + trial.branches[i + 1:])
    return trial


PERTURBATIONS = {
    "scale_loads": scale_loads,
    "remove_loads": remove_loads,
    "remove_branches": remove_branches,
}


def perturb(case: NetworkCase, family: str, params: dict, seed: int) -> NetworkCase:
    try:
        fn = PERTURBATIONS[family]
    except KeyError:
        raise ValueError(f"unknown perturbation family {family!r}") from None
    return fn(case, seed=seed, **params)
