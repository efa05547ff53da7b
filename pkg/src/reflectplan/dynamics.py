"""The Semi-Sim environment.

Per step the environment

1. clips the intervention against capacity, bans, halts, export quotas and
   available inventory (shipments only draw on start-of-step stock, so goods
   bought this step can be shipped next step),
2. couples flows so an edge shipment is both the supplier's ``ship`` and the
   customer's ``buy``,
3. applies the inventory/cash transition to every node,
4. propagates risk over the graph, then adds exogenous risk (shock exposure,
   stockouts, idle nodes, delayed sanction enforcement),
5. scores the transition and emits a partially observed observation.

Randomness enters only through the ``rng`` passed to :func:`env_step`: it
draws the *next* step's demand and the observation noise. The reward of a
step is therefore a deterministic function of (state, action).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import (
    EpisodeTerminated,
    NegativeQuantity,
    ParamOutOfRange,
    UnknownNode,
    UnknownTarget,
)
from .network import (
    NodeSpec,
    NodeState,
    Role,
    SupplyNetwork,
    edge_id,
    init_states,
    load_json_resource,
)


class ShockKind(str, Enum):
    EXPORT_BAN = "ExportBan"
    MATERIAL_SHORTAGE = "MaterialShortage"
    SANCTION = "Sanction"
    TARIFF = "Tariff"


SHOCK_KINDS = tuple(ShockKind)


@dataclass(frozen=True)
class Shock:
    kind: ShockKind
    targets: tuple[str, ...]
    magnitude: float
    onset: int
    duration: int
    narrative: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", ShockKind(self.kind))
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.onset < 1:
            raise ValueError("shock onset must be >= 1")
        if self.duration < 1:
            raise ValueError("shock duration must be >= 1")
        if self.magnitude < 0:
            raise ValueError("shock magnitude must be >= 0")

    @property
    def end(self) -> int:
        """First step at which the shock is no longer active."""
        return self.onset + self.duration

    def active_at(self, t: int) -> bool:
        return self.onset <= t < self.end

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "targets": list(self.targets),
            "magnitude": self.magnitude,
            "onset": self.onset,
            "duration": self.duration,
            "narrative": self.narrative,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Shock":
        return cls(
            kind=ShockKind(d["kind"]),
            targets=tuple(d["targets"]),
            magnitude=float(d.get("magnitude", 0.0)),
            onset=int(d["onset"]),
            duration=int(d["duration"]),
            narrative=str(d.get("narrative", "")),
        )


def load_shock_schedule(ref="shocks-default") -> list[Shock]:
    """Load a JSON array of shock records (bundled name or file path)."""
    data = load_json_resource(ref)
    if isinstance(data, dict):
        data = data["shocks"]
    return [Shock.from_dict(d) for d in data]


@dataclass
class Intervention:
    """A structured supply-chain intervention.

    ``q_buy`` maps edge ids to the quantity the customer orders on that edge;
    ``q_ship`` optionally caps what the supplier is willing to release.
    ``produce`` holds production requests for source nodes.
    """

    q_buy: dict[str, float] = field(default_factory=dict)
    q_ship: dict[str, float] = field(default_factory=dict)
    produce: dict[str, float] = field(default_factory=dict)
    halts: frozenset[str] = frozenset()
    export_params: dict | None = None
    free_text: str | None = None
    template: str | None = None

    def __post_init__(self):
        self.halts = frozenset(self.halts)
        for name in ("q_buy", "q_ship", "produce"):
            for key, q in getattr(self, name).items():
                if not q >= 0:
                    raise NegativeQuantity(f"{name}[{key!r}] = {q} is negative")

    def to_dict(self) -> dict:
        return {
            "template": self.template,
            "q_buy": dict(sorted(self.q_buy.items())),
            "q_ship": dict(sorted(self.q_ship.items())),
            "produce": dict(sorted(self.produce.items())),
            "halts": sorted(self.halts),
            "export_params": self.export_params,
            "free_text": self.free_text,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Intervention":
        return cls(
            q_buy={k: float(v) for k, v in d.get("q_buy", {}).items()},
            q_ship={k: float(v) for k, v in d.get("q_ship", {}).items()},
            produce={k: float(v) for k, v in d.get("produce", {}).items()},
            halts=frozenset(d.get("halts", ())),
            export_params=d.get("export_params"),
            free_text=d.get("free_text"),
            template=d.get("template"),
        )


@dataclass
class ExecFeedback:
    flows: dict[str, float]
    production: dict[str, float]
    sales: dict[str, float]
    unmet: dict[str, float]
    clipped: dict[str, float]
    buy: dict[str, float]
    ship: dict[str, float]
    violations: dict[str, bool]
    rent: dict[str, float]
    enforcement: dict[str, float]
    reward: float = 0.0
    collapse: bool = False

    @property
    def violation_count(self) -> int:
        return sum(1 for v in self.violations.values() if v)

    @property
    def rent_total(self) -> float:
        return float(sum(self.rent.values()))

    def throughput(self, node: str) -> float:
        return self.buy[node] + self.ship[node]

    def to_dict(self) -> dict:
        return {
            "flows": self.flows,
            "production": self.production,
            "sales": self.sales,
            "unmet": self.unmet,
            "clipped": self.clipped,
            "buy": self.buy,
            "ship": self.ship,
            "violations": self.violations,
            "rent": self.rent,
            "enforcement": self.enforcement,
            "reward": self.reward,
            "collapse": self.collapse,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExecFeedback":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Constraints:
    """The constraint set implied by the currently active shocks."""

    edge_cap: Mapping[str, float] = field(default_factory=dict)  # fraction of supplier capacity
    capacity_mult: Mapping[str, float] = field(default_factory=dict)
    sanctioned: frozenset[str] = frozenset()
    tariff: Mapping[str, float] = field(default_factory=dict)
    frozen: frozenset[str] = frozenset()  # nodes under an enforcement trade freeze

    def to_dict(self) -> dict:
        return {
            "edge_cap": dict(sorted(self.edge_cap.items())),
            "capacity_mult": dict(sorted(self.capacity_mult.items())),
            "sanctioned": sorted(self.sanctioned),
            "tariff": dict(sorted(self.tariff.items())),
            "frozen": sorted(self.frozen),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Constraints":
        return cls(
            edge_cap=dict(d.get("edge_cap", {})),
            capacity_mult=dict(d.get("capacity_mult", {})),
            sanctioned=frozenset(d.get("sanctioned", ())),
            tariff=dict(d.get("tariff", {})),
            frozen=frozenset(d.get("frozen", ())),
        )


@dataclass(frozen=True)
class Observation:
    t: int
    t_max: int
    nodes: Mapping[str, Mapping[str, float]]
    demand: Mapping[str, float]
    last_flows: Mapping[str, float]
    last_production: Mapping[str, float]
    shocks: tuple[Shock, ...]
    constraints: Constraints
    observer_tier: str = Role.MIDSTREAM.value

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "t_max": self.t_max,
            "nodes": {k: dict(v) for k, v in self.nodes.items()},
            "demand": dict(self.demand),
            "last_flows": dict(self.last_flows),
            "last_production": dict(self.last_production),
            "shocks": [s.to_dict() for s in self.shocks],
            "constraints": self.constraints.to_dict(),
            "observer_tier": self.observer_tier,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Observation":
        return cls(
            t=int(d["t"]),
            t_max=int(d["t_max"]),
            nodes={k: dict(v) for k, v in d["nodes"].items()},
            demand=dict(d["demand"]),
            last_flows=dict(d["last_flows"]),
            last_production=dict(d["last_production"]),
            shocks=tuple(Shock.from_dict(s) for s in d["shocks"]),
            constraints=Constraints.from_dict(d["constraints"]),
            observer_tier=d.get("observer_tier", Role.MIDSTREAM.value),
        )


def observation_features(obs: Observation, net: SupplyNetwork) -> np.ndarray:
    """Flatten an observation into a fixed-length numeric vector.

    Layout: per node (I/capacity, C/10000, Omega/100, R/100); per sink
    demand/capacity; per edge last flow/supplier capacity; one-hot of active
    shock kinds; t/t_max.
    """
    out: list[float] = []
    for n in net.nodes:
        s = obs.nodes[n.id]
        out += [s["inventory"] / n.capacity, s["cash"] / 10000.0, s["compliance"] / 100.0, s["risk"] / 100.0]
    for sink in net.sinks:
        out.append(obs.demand.get(sink, 0.0) / net.node(sink).capacity)
    for e in net.edges:
        out.append(obs.last_flows.get(e.id, 0.0) / net.node(e.source).capacity)
    kinds = {s.kind for s in obs.shocks}
    out += [1.0 if k in kinds else 0.0 for k in SHOCK_KINDS]
    out.append(obs.t / obs.t_max)
    return np.asarray(out, dtype=float)


def feature_dim(net: SupplyNetwork) -> int:
    return 4 * len(net.nodes) + len(net.sinks) + len(net.edges) + len(SHOCK_KINDS) + 1


@dataclass(frozen=True)
class RewardWeights:
    cash: float = 0.5
    risk: float = 0.3
    violation: float = 0.4
    operability: float = 0.2


@dataclass(frozen=True)
class EnvConfig:
    gamma: float = 0.1
    tau: float = 20.0
    t_max: int = 30
    demand_mean: float = 20.0
    demand_phi: float = 0.6
    demand_std: float = 3.0
    obs_noise: float = 0.1
    observer_tier: str = Role.MIDSTREAM.value
    rent_rate: float = 0.15
    compliance_penalty: float = 25.0
    compliance_recovery: float = 2.0
    collapse_level: float = 95.0
    collapse_steps: int = 3
    reward_weights: RewardWeights = RewardWeights()
    cash_scale: float = 700.0
    risk_scale: float = 10.0
    risk_capacity_drag: float = 0.5
    stockout_risk: float = 10.0
    idle_risk: float = 4.0
    shock_risk: Mapping[str, float] = field(
        default_factory=lambda: {"ExportBan": 2.0, "MaterialShortage": 3.0, "Sanction": 4.0, "Tariff": 1.0}
    )
    enforcement_lag: int = 3
    enforcement_risk: float = 35.0
    enforcement_fine: float = 10.0
    enforcement_freeze: int = 3
    feature_mean: float = -0.21
    feature_dim: int = 8
    feature_std: float = 0.1

    def __post_init__(self):
        checks = [
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (0.0 <= self.tau <= 100.0, "tau must lie in [0, 100]"),
            (self.t_max >= 1, "t_max must be >= 1"),
            (self.demand_mean >= 0 and self.demand_std >= 0, "demand mean and std must be >= 0"),
            (self.obs_noise >= 0, "obs_noise must be >= 0"),
            (self.cash_scale > 0 and self.risk_scale > 0, "reward scales must be > 0"),
            (self.enforcement_lag >= 1 and self.collapse_steps >= 1, "lags must be >= 1"),
            (self.observer_tier in {r.value for r in Role}, f"unknown observer tier {self.observer_tier!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["reward_weights"] = vars(self.reward_weights).copy()
        d["shock_risk"] = dict(self.shock_risk)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnvConfig":
        d = dict(d)
        if "reward_weights" in d and not isinstance(d["reward_weights"], RewardWeights):
            d["reward_weights"] = RewardWeights(**d["reward_weights"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# transition pieces


def step_inventory_cash(
    state: NodeState,
    buy: float,
    ship: float,
    prices: NodeSpec,
    violate: bool,
    rent: float,
    cost_multiplier: float = 1.0,
    compliance_penalty: float = 25.0,
    compliance_recovery: float = 2.0,
) -> NodeState:
    """Inventory/cash transition for one node.

    I' = I + buy - ship
    C' = C + p_sale*ship - p_cost*buy + [violate]*rent

    ``cost_multiplier`` scales p_cost (tariffs). Compliance drops sharply on a
    violation and recovers slowly otherwise.
    """
    if buy < 0 or ship < 0:
        raise NegativeQuantity(f"buy={buy}, ship={ship} must be non-negative")
    inventory = state.inventory + buy - ship
    cash = state.cash + prices.p_sale * ship - prices.p_cost * cost_multiplier * buy
    if violate:
        cash += rent
        compliance = state.compliance - compliance_penalty
    else:
        compliance = state.compliance + compliance_recovery
    return replace(
        state,
        inventory=inventory,
        cash=cash,
        compliance=min(100.0, max(0.0, compliance)),
    )


def propagate_risk(
    net: SupplyNetwork, risks: Mapping[str, float], gamma: float, tau: float
) -> dict[str, float]:
    """One step of threshold risk contagion over the supply graph.

    Each node keeps (1 - gamma) of its own risk and receives
    w_ji * max(0, R_j - tau) from every predecessor j; results are clamped
    to [0, 100].
    """
    if not (0.0 <= gamma <= 1.0):
        raise ParamOutOfRange(f"gamma={gamma} outside [0, 1]")
    if not tau >= 0:
        raise ParamOutOfRange(f"tau={tau} must be >= 0")
    out = {}
    for node in net.node_ids:
        internal = (1.0 - gamma) * risks[node]
        external = 0.0
        for j, w in net.predecessors(node):
            external += w * max(0.0, risks[j] - tau)
        out[node] = min(100.0, max(0.0, internal + external))
    return out


def compute_exec_reward(
    before: Mapping[str, NodeState],
    after: Mapping[str, NodeState],
    feedback: ExecFeedback,
    weights: RewardWeights = RewardWeights(),
    cash_scale: float = 700.0,
    risk_scale: float = 10.0,
) -> float:
    """Step reward in [-1, 1].

    r = clamp(w_c*dC/cash_scale - w_r*dR/risk_scale - w_v*viol + w_o*op, -1, 1)

    where dC is the change in network cash, dR the change in mean risk,
    ``viol`` the share of nodes flagged for a violation and ``op`` the share
    of nodes with positive throughput.
    """
    n = len(after)
    d_cash = sum(after[k].cash for k in after) - sum(before[k].cash for k in before)
    d_risk = (sum(after[k].risk for k in after) - sum(before[k].risk for k in before)) / n
    viol = feedback.violation_count / n
    op = sum(1 for k in after if feedback.throughput(k) > 0) / n
    r = (
        weights.cash * d_cash / cash_scale
        - weights.risk * d_risk / risk_scale
        - weights.violation * viol
        + weights.operability * op
    )
    return float(min(1.0, max(-1.0, r)))


def nominal_plan(net: SupplyNetwork, demand: Mapping[str, float]) -> tuple[dict[str, float], dict[str, float]]:
    """Route sink demand up the graph, splitting by dependency weight.

    Returns (edge flows, source production) for a steady pass-through plan.
    """
    need = {n: 0.0 for n in net.node_ids}
    for sink in net.sinks:
        need[sink] = float(demand.get(sink, 0.0))
    flows: dict[str, float] = {}
    for node in reversed(topological_order(net)):
        preds = net.predecessors(node)
        if not preds:
            continue
        wsum = sum(w for _, w in preds)
        for j, w in preds:
            share = w / wsum if wsum > 0 else 1.0 / len(preds)
            q = need[node] * share
            flows[edge_id(j, node)] = q
            need[j] += q
    production = {s: need[s] for s in net.sources}
    return flows, production


def topological_order(net: SupplyNetwork) -> list[str]:
    indeg = {n: len(net.predecessors(n)) for n in net.node_ids}
    ready = sorted(n for n, d in indeg.items() if d == 0)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m, _ in net.successors(n):
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
                ready.sort()
    if len(order) != len(indeg):
        # cyclic graphs keep network order for the remainder
        order += [n for n in net.node_ids if n not in order]
    return order


# ---------------------------------------------------------------------------
# environment state


class SemiSimEnv:
    """Mutable per-episode environment state. The network is shared."""

    def __init__(
        self,
        net: SupplyNetwork,
        config: EnvConfig,
        states: Mapping[str, NodeState],
        demand: Mapping[str, float],
        schedule: Iterable[Shock] = (),
    ):
        self.net = net
        self.config = config
        self.t = 1
        self.states = dict(states)
        self.demand = dict(demand)
        self.schedule = sorted(schedule, key=lambda s: (s.onset, s.kind.value, s.targets))
        for s in self.schedule:
            _resolve_targets(net, s)
        self.active: list[Shock] = []
        self.enforcement: list[tuple[int, str, float, float]] = []
        self.frozen: dict[str, int] = {}
        self.collapse_streak = 0
        self.collapsed = False
        self.terminal = False
        flows, prod = nominal_plan(net, self.demand)
        self.last_flows = flows
        self.last_production = prod
        self._refresh_shocks()

    @classmethod
    def reset(
        cls,
        net: SupplyNetwork,
        config: EnvConfig = EnvConfig(),
        schedule: Iterable[Shock] = (),
        seed: int = 0,
        rng: np.random.Generator | None = None,
    ) -> tuple["SemiSimEnv", Observation]:
        states = init_states(net, seed, config.feature_mean, config.feature_dim, config.feature_std)
        rng = rng if rng is not None else np.random.default_rng([seed, 1])
        demand = {
            s: max(0.0, config.demand_mean + config.demand_std * rng.standard_normal())
            for s in net.sinks
        }
        env = cls(net, config, states, demand, schedule)
        return env, env.observe(rng)

    # -- shocks -------------------------------------------------------------

    def _refresh_shocks(self) -> None:
        self.active = [s for s in self.active if s.active_at(self.t)]
        for s in self.schedule:
            if s.onset == self.t:
                apply_shock(self, s)

    def constraints(self) -> Constraints:
        edge_cap: dict[str, float] = {}
        cap_mult: dict[str, float] = {}
        sanctioned: set[str] = set()
        tariff: dict[str, float] = {}
        for s in self.active:
            targets = _resolve_targets(self.net, s)
            if s.kind == ShockKind.EXPORT_BAN:
                for e in targets:
                    edge_cap[e] = min(edge_cap.get(e, math.inf), s.magnitude)
            elif s.kind == ShockKind.MATERIAL_SHORTAGE:
                for n in targets:
                    cap_mult[n] = cap_mult.get(n, 1.0) * s.magnitude
            elif s.kind == ShockKind.SANCTION:
                sanctioned.update(targets)
            elif s.kind == ShockKind.TARIFF:
                for e in targets:
                    tariff[e] = tariff.get(e, 1.0) * s.magnitude
        frozen = frozenset(n for n, until in self.frozen.items() if until >= self.t)
        return Constraints(edge_cap, cap_mult, frozenset(sanctioned), tariff, frozen)

    def exposure(self) -> dict[str, float]:
        """Per-step exogenous risk each node takes from active shocks."""
        out = {n: 0.0 for n in self.net.node_ids}
        for s in self.active:
            amount = float(self.config.shock_risk.get(s.kind.value, 0.0))
            for n in _exposed_nodes(self.net, s):
                out[n] += amount
        return out

    # -- observation --------------------------------------------------------

    def observe(self, rng: np.random.Generator) -> Observation:
        cfg = self.config
        noise = rng.standard_normal((len(self.net.nodes), 4))
        nodes = {}
        for row, spec in zip(noise, self.net.nodes):
            s = self.states[spec.id]
            vals = {"inventory": s.inventory, "cash": s.cash, "compliance": s.compliance, "risk": s.risk}
            if spec.role.value != cfg.observer_tier and cfg.obs_noise > 0:
                vals = {k: v * math.exp(cfg.obs_noise * z) for (k, v), z in zip(vals.items(), row)}
            nodes[spec.id] = vals
        return Observation(
            t=self.t,
            t_max=cfg.t_max,
            nodes=nodes,
            demand=dict(self.demand),
            last_flows=dict(self.last_flows),
            last_production=dict(self.last_production),
            shocks=tuple(self.active),
            constraints=self.constraints(),
            observer_tier=cfg.observer_tier,
        )

    # -- copying and hashing -------------------------------------------------

    def clone(self, keep_schedule: bool = True) -> "SemiSimEnv":
        other = object.__new__(SemiSimEnv)
        other.net = self.net
        other.config = self.config
        other.t = self.t
        other.states = dict(self.states)
        other.demand = dict(self.demand)
        other.schedule = list(self.schedule) if keep_schedule else [
            s for s in self.schedule if s.onset <= self.t
        ]
        other.active = list(self.active)
        other.enforcement = list(self.enforcement)
        other.frozen = dict(self.frozen)
        other.collapse_streak = self.collapse_streak
        other.collapsed = self.collapsed
        other.terminal = self.terminal
        other.last_flows = dict(self.last_flows)
        other.last_production = dict(self.last_production)
        return other

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "states": {k: v.to_dict() for k, v in self.states.items()},
            "demand": self.demand,
            "schedule": [s.to_dict() for s in self.schedule],
            "active": [s.to_dict() for s in self.active],
            "enforcement": [list(e) for e in self.enforcement],
            "frozen": dict(sorted(self.frozen.items())),
            "collapse_streak": self.collapse_streak,
            "collapsed": self.collapsed,
            "terminal": self.terminal,
            "last_flows": self.last_flows,
            "last_production": self.last_production,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def step(self, action: Intervention, rng: np.random.Generator) -> tuple[Observation, ExecFeedback]:
        obs, fb, _ = env_step(self, action, rng)
        return obs, fb


def _resolve_targets(net: SupplyNetwork, shock: Shock) -> list[str]:
    """Edge ids for edge-level shocks, node ids for node-level shocks."""
    out: list[str] = []
    if shock.kind in (ShockKind.EXPORT_BAN, ShockKind.TARIFF):
        for t in shock.targets:
            if net.has_edge(t):
                out.append(t)
            elif net.has_node(t):
                out += [e.id for e in net.out_edges(t)]
            else:
                raise UnknownTarget(f"{shock.kind.value} targets unknown edge or node {t!r}")
    else:
        for t in shock.targets:
            if not net.has_node(t):
                raise UnknownTarget(f"{shock.kind.value} targets unknown node {t!r}")
            out.append(t)
    return out


def _exposed_nodes(net: SupplyNetwork, shock: Shock) -> list[str]:
    targets = _resolve_targets(net, shock)
    if shock.kind in (ShockKind.EXPORT_BAN, ShockKind.TARIFF):
        return sorted({net.edge(e).target for e in targets})
    return targets


def apply_shock(env: SemiSimEnv, shock: Shock) -> SemiSimEnv:
    """Activate ``shock`` on ``env``; it deactivates at onset + duration."""
    if shock.onset != env.t:
        raise ValueError(f"shock onset {shock.onset} does not match current step {env.t}")
    _resolve_targets(env.net, shock)
    if shock not in env.active:
        env.active.append(shock)
    return env


def hold_policy(obs_or_env) -> Intervention:
    """Repeat the last realized quantities."""
    return Intervention(
        q_buy=dict(obs_or_env.last_flows),
        produce=dict(obs_or_env.last_production),
        template="hold",
    )


def export_quota_nodes(net: SupplyNetwork, cons: Constraints) -> set[str]:
    """Exporters whose shipments an export-parameter setting throttles."""
    nodes = {net.edge(e).source for e in cons.edge_cap}
    nodes |= {net.edge(e).source for e in cons.tariff}
    for n in cons.sanctioned:
        nodes |= {j for j, _ in net.predecessors(n)}
    return nodes


def env_step(
    env: SemiSimEnv, action: Intervention, rng: np.random.Generator
) -> tuple[Observation, ExecFeedback, SemiSimEnv]:
    """Advance ``env`` one step under ``action`` (mutates and returns env)."""
    if env.terminal:
        raise EpisodeTerminated(f"episode already terminated at step {env.t}")
    net, cfg = env.net, env.config
    cons = env.constraints()
    before = dict(env.states)
    for n in action.halts:
        if not net.has_node(n):
            raise UnknownNode(f"halt names unknown node {n!r}")
    for e in list(action.q_buy) + list(action.q_ship):
        if not net.has_edge(e):
            raise UnknownNode(f"intervention names unknown edge {e!r}")
    halted = set(action.halts) | cons.frozen

    cap_eff = {}
    for spec in net.nodes:
        s = env.states[spec.id]
        cap = spec.capacity * cons.capacity_mult.get(spec.id, 1.0)
        cap *= max(0.0, 1.0 - cfg.risk_capacity_drag * s.risk / 100.0)
        cap_eff[spec.id] = 0.0 if spec.id in halted else cap

    production = {}
    for src in net.sources:
        production[src] = min(float(action.produce.get(src, 0.0)), cap_eff[src])

    sales, unmet = {}, {}
    for sink in net.sinks:
        avail = min(env.states[sink].inventory, cap_eff[sink])
        sales[sink] = max(0.0, min(env.demand.get(sink, 0.0), avail))
        unmet[sink] = env.demand.get(sink, 0.0) - sales[sink]

    quota_nodes = set()
    quota = None
    if action.export_params and "quota" in action.export_params:
        quota = float(action.export_params["quota"])
        quota_nodes = export_quota_nodes(net, cons)

    requested, capped = {}, {}
    for e in net.edges:
        q = float(action.q_buy.get(e.id, 0.0))
        requested[e.id] = q
        if e.id in action.q_ship:
            q = min(q, float(action.q_ship[e.id]))
        if e.source in halted or e.target in halted:
            q = 0.0
        if e.id in cons.edge_cap:
            q = min(q, cons.edge_cap[e.id] * net.node(e.source).capacity)
        if quota is not None and e.source in quota_nodes:
            q = min(q, quota * net.node(e.source).capacity)
        capped[e.id] = q

    flows = {}
    for spec in net.nodes:
        outs = net.out_edges(spec.id)
        if not outs:
            continue
        shippable = max(0.0, min(env.states[spec.id].inventory, cap_eff[spec.id]) - sales.get(spec.id, 0.0))
        total = sum(capped[e.id] for e in outs)
        scale = 1.0 if total <= shippable or total == 0 else shippable / total
        for e in outs:
            flows[e.id] = capped[e.id] * scale

    clipped = {e: requested[e] - flows[e] for e in requested if requested[e] - flows[e] > 1e-12}
    for src in net.sources:
        if action.produce.get(src, 0.0) - production[src] > 1e-12:
            clipped[src] = action.produce[src] - production[src]

    buy = {n: production.get(n, 0.0) for n in net.node_ids}
    ship = {n: sales.get(n, 0.0) for n in net.node_ids}
    cost = {n: production.get(n, 0.0) for n in net.node_ids}  # in units of p_cost
    viol_qty = {n: 0.0 for n in net.node_ids}
    for e in net.edges:
        q = flows[e.id]
        ship[e.source] += q
        buy[e.target] += q
        cost[e.target] += q * cons.tariff.get(e.id, 1.0)
        if q > 0 and (e.source in cons.sanctioned or e.target in cons.sanctioned):
            both = e.source in cons.sanctioned and e.target in cons.sanctioned
            for end in (e.source, e.target):
                if both or end not in cons.sanctioned:
                    viol_qty[end] += q

    violations = {n: viol_qty[n] > 0 for n in net.node_ids}
    rent = {
        n: cfg.rent_rate * net.node(n).p_sale * viol_qty[n] if violations[n] else 0.0
        for n in net.node_ids
    }

    new_states = {}
    for spec in net.nodes:
        n = spec.id
        mult = cost[n] / buy[n] if buy[n] > 0 else 1.0
        new_states[n] = step_inventory_cash(
            env.states[n], buy[n], ship[n], spec, violations[n], rent[n], mult,
            cfg.compliance_penalty, cfg.compliance_recovery,
        )

    # risk: contagion on current levels, then exogenous injections
    risks = propagate_risk(net, {n: s.risk for n, s in env.states.items()}, cfg.gamma, cfg.tau)
    inject = env.exposure()
    for sink in net.sinks:
        d = env.demand.get(sink, 0.0)
        if d > 0:
            inject[sink] += cfg.stockout_risk * unmet[sink] / d
    for n in net.node_ids:
        if buy[n] + ship[n] <= 0:
            inject[n] += cfg.idle_risk
    # enforcement of earlier violations: risk, a fine and a trade freeze
    due = [x for x in env.enforcement if x[0] == env.t]
    env.enforcement = [x for x in env.enforcement if x[0] != env.t]
    enforcement = {}
    for _, n, amount, fine in due:
        inject[n] += amount
        enforcement[n] = enforcement.get(n, 0.0) + amount
        new_states[n] = replace(new_states[n], cash=new_states[n].cash - fine)
        if cfg.enforcement_freeze > 0:
            env.frozen[n] = max(env.frozen.get(n, 0), env.t + cfg.enforcement_freeze)
    for n in net.node_ids:
        if violations[n]:
            env.enforcement.append(
                (env.t + cfg.enforcement_lag, n, cfg.enforcement_risk, cfg.enforcement_fine * rent[n])
            )
    for n in net.node_ids:
        r = min(100.0, max(0.0, risks[n] + inject[n]))
        new_states[n] = replace(new_states[n], risk=r, operable=buy[n] + ship[n] > 0)

    mean_risk = sum(s.risk for s in new_states.values()) / len(new_states)
    env.collapse_streak = env.collapse_streak + 1 if mean_risk >= cfg.collapse_level else 0
    collapse = env.collapse_streak >= cfg.collapse_steps

    fb = ExecFeedback(
        flows=flows,
        production=production,
        sales=sales,
        unmet=unmet,
        clipped=clipped,
        buy=buy,
        ship=ship,
        violations=violations,
        rent=rent,
        enforcement=enforcement,
        collapse=collapse,
    )
    fb.reward = compute_exec_reward(
        before, new_states, fb, cfg.reward_weights, cfg.cash_scale, cfg.risk_scale
    )

    env.states = new_states
    env.last_flows = dict(flows)
    env.last_production = dict(production)
    env.t += 1
    env.collapsed = collapse
    env.terminal = collapse or env.t > cfg.t_max
    for sink in net.sinks:
        prev = env.demand.get(sink, cfg.demand_mean)
        d = cfg.demand_mean + cfg.demand_phi * (prev - cfg.demand_mean)
        env.demand[sink] = max(0.0, d + cfg.demand_std * rng.standard_normal())
    if not env.terminal:
        env._refresh_shocks()
    return env.observe(rng), fb, env


def run_policy(
    env: SemiSimEnv,
    policy: Callable[[Observation], Intervention],
    obs: Observation,
    rng: np.random.Generator,
    steps: int | None = None,
) -> list[ExecFeedback]:
    """Drive ``env`` with a fixed policy; handy for baselines and tests."""
    out = []
    while not env.terminal and (steps is None or len(out) < steps):
        obs, fb, _ = env_step(env, policy(obs), rng)
        out.append(fb)
    return out
