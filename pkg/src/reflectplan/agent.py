"""Actor policies and critics.

Actions are drawn from a finite library of intervention templates. Each
template turns the current observation into a concrete
:class:`~reflectplan.dynamics.Intervention`, so a policy only has to choose a
template and its log-probability stays exact.

Three actor backends share one interface (``sample``/``log_prob``):

* :class:`ParametricPolicy` - softmax over template logits ``theta @ phi(ctx) / T``,
  trainable with REINFORCE;
* :class:`ScriptedPolicy` - deterministic rule, used for baselines;
* :class:`reflectplan.llm.LLMPolicy` - chat-completion adapter, inference only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .buffer import HindsightBuffer
from .dynamics import (
    ExecFeedback,
    Intervention,
    Observation,
    observation_features,
    topological_order,
)
from .errors import (
    EmptyTemplateLibrary,
    IndexOutOfBuffer,
    ScoreOutOfRange,
    UnknownTemplate,
)
from .network import SupplyNetwork, edge_id

TASK_DESCRIPTION = (
    "You coordinate a semiconductor supply network. Keep every node operating and "
    "profitable while respecting export bans and sanctions, and avoid actions whose "
    "risk cascades through the network."
)


# ---------------------------------------------------------------------------
# templates


def _blocked_edges(obs: Observation, net: SupplyNetwork) -> set[str]:
    cons = obs.constraints
    blocked = {e for e, cap in cons.edge_cap.items() if cap <= 0}
    off = cons.sanctioned | cons.frozen
    for e in net.edges:
        if e.source in off or e.target in off:
            blocked.add(e.id)
    return blocked


def replenishment_plan(
    obs: Observation,
    net: SupplyNetwork,
    aware: bool = True,
    cover: float = 1.3,
    even_split: bool = False,
) -> tuple[dict[str, float], dict[str, float]]:
    """Base-stock plan routed from sink demand back to the sources.

    Every node orders enough to end the step holding ``cover`` times what it
    expects to ship. ``aware`` plans skip banned edges and trades touching
    sanctioned nodes, shifting that volume to the remaining suppliers.
    """
    blocked = _blocked_edges(obs, net) if aware else set()
    sanctioned = obs.constraints.sanctioned if aware else frozenset()
    need = {n: 0.0 for n in net.node_ids}
    for sink in net.sinks:
        need[sink] = float(obs.demand.get(sink, 0.0))
    flows = {e: 0.0 for e in net.edge_ids}
    production = {}
    for node in reversed(topological_order(net)):
        if node in sanctioned:
            continue
        inv = max(0.0, obs.nodes[node]["inventory"])
        expected = need[node]
        order = max(0.0, cover * expected + min(inv, expected) - inv)
        preds = [(j, w) for j, w in net.predecessors(node) if edge_id(j, node) not in blocked]
        if not net.predecessors(node):
            production[node] = order
            continue
        if not preds:
            continue
        if even_split:
            shares = [1.0 / len(preds)] * len(preds)
        else:
            wsum = sum(w for _, w in preds)
            shares = [w / wsum if wsum > 0 else 1.0 / len(preds) for _, w in preds]
        for (j, _), share in zip(preds, shares):
            q = order * share
            flows[edge_id(j, node)] = q
            need[j] += q
    return flows, production


def _scaled(flows, production, factor):
    return {k: v * factor for k, v in flows.items()}, {k: v * factor for k, v in production.items()}


def _plan_template(name, factor=1.0, aware=True, even_split=False):
    def make(obs: Observation, net: SupplyNetwork) -> Intervention:
        flows, prod = replenishment_plan(obs, net, aware=aware, even_split=even_split)
        flows, prod = _scaled(flows, prod, factor)
        return Intervention(q_buy=flows, produce=prod, template=name)

    return make


def _hold(obs: Observation, net: SupplyNetwork) -> Intervention:
    return Intervention(q_buy=dict(obs.last_flows), produce=dict(obs.last_production), template="hold")


def _halt_riskiest(obs: Observation, net: SupplyNetwork) -> Intervention:
    flows, prod = replenishment_plan(obs, net)
    worst = max(net.node_ids, key=lambda n: (obs.nodes[n]["risk"], -net.node_ids.index(n)))
    return Intervention(q_buy=flows, produce=prod, halts=frozenset({worst}), template="halt_riskiest")


def _halt_all(obs: Observation, net: SupplyNetwork) -> Intervention:
    return Intervention(halts=frozenset(net.node_ids), template="halt_all")


def _export_params(obs: Observation, net: SupplyNetwork) -> Intervention:
    flows, prod = replenishment_plan(obs, net)
    return Intervention(
        q_buy=flows,
        produce=prod,
        export_params={"quota": 0.3},
        template="set_export_params",
    )


@dataclass(frozen=True)
class Template:
    name: str
    build: Callable[[Observation, SupplyNetwork], Intervention]
    description: str = ""

    def instantiate(self, obs: Observation, net: SupplyNetwork) -> Intervention:
        action = self.build(obs, net)
        action.template = self.name
        return action


DEFAULT_TEMPLATES = (
    Template("hold", _hold, "repeat last period's realized quantities"),
    Template("replenish", _plan_template("replenish", aware=False), "base-stock replenishment on the usual suppliers"),
    Template("reroute", _plan_template("reroute"), "replenish, moving volume off banned or sanctioned links"),
    Template("expedite", _plan_template("expedite", 1.5), "rerouted plan scaled up 50%"),
    Template("scale_up", _plan_template("scale_up", 1.25), "rerouted plan scaled up 25%"),
    Template("trim", _plan_template("trim", 0.5), "rerouted plan cut by 50%"),
    Template("lean", _plan_template("lean", 0.75), "rerouted plan cut by 25%"),
    Template("split_even", _plan_template("split_even", aware=False, even_split=True), "split every order evenly across usual suppliers"),
    Template("multi_source", _plan_template("multi_source", even_split=True), "rerouted plan split evenly across allowed suppliers"),
    Template("halt_riskiest", _halt_riskiest, "rerouted plan, halting the node with the highest risk"),
    Template("halt_all", _halt_all, "halt all trade until the situation clears"),
    Template("set_export_params", _export_params, "throttle exports of shock-affected suppliers to 30% of capacity"),
)


class TemplateLibrary:
    def __init__(self, templates: Sequence[Template] = DEFAULT_TEMPLATES):
        if not templates:
            raise EmptyTemplateLibrary("template library is empty")
        self.templates = tuple(templates)
        self._index = {t.name: i for i, t in enumerate(self.templates)}
        if len(self._index) != len(self.templates):
            raise ValueError("template names must be unique")

    def __len__(self) -> int:
        return len(self.templates)

    def __getitem__(self, i: int) -> Template:
        return self.templates[i]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.templates]

    def index(self, name: str | None) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownTemplate(f"unknown template {name!r}") from None

    def instantiate(self, k: int, obs: Observation, net: SupplyNetwork) -> Intervention:
        return self.templates[k].instantiate(obs, net)


# ---------------------------------------------------------------------------
# prompt context


@dataclass
class PromptContext:
    task: str
    obs: Observation
    prev_action: Intervention | None = None
    history: tuple[str, ...] = ()

    @property
    def narratives(self) -> list[str]:
        return [s.narrative for s in self.obs.shocks if s.narrative]

    def to_prompt(self) -> str:
        lines = [f"TASK: {self.task}", f"STEP: {self.obs.t}/{self.obs.t_max}"]
        lines.append("ACTIVE SHOCKS:")
        lines += [f"- [{s.kind.value}] {s.narrative or ', '.join(s.targets)}" for s in self.obs.shocks] or ["- none"]
        lines.append("NODE STATES (inventory, cash, compliance, risk):")
        for n, s in self.obs.nodes.items():
            lines.append(
                f"- {n}: I={s['inventory']:.1f} C={s['cash']:.0f} "
                f"Omega={s['compliance']:.1f} R={s['risk']:.1f}"
            )
        lines.append("DEMAND: " + ", ".join(f"{k}={v:.1f}" for k, v in self.obs.demand.items()))
        prev = self.prev_action.template if self.prev_action is not None else "none"
        lines.append(f"PREVIOUS ACTION: {prev}")
        if self.history:
            lines.append("RECENT HISTORY:")
            lines += [f"- {h}" for h in self.history]
        return "\n".join(lines)


def context_features(ctx: PromptContext, net: SupplyNetwork) -> np.ndarray:
    """phi(ctx): normalized observation features plus a bias term."""
    return np.append(observation_features(ctx.obs, net), 1.0)


# ---------------------------------------------------------------------------
# actors


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max()
    return logits - (m + math.log(np.exp(logits - m).sum()))


@dataclass
class ParametricPolicy:
    net: SupplyNetwork
    library: TemplateLibrary
    theta: np.ndarray
    temperature: float = 1.0
    backend: str = field(default="parametric", init=False)
    trainable: bool = field(default=True, init=False)

    @classmethod
    def zeros(cls, net: SupplyNetwork, library: TemplateLibrary | None = None, temperature: float = 1.0):
        from .dynamics import feature_dim

        library = library or TemplateLibrary()
        return cls(net, library, np.zeros((len(library), feature_dim(net) + 1)), temperature)

    def __post_init__(self):
        if len(self.library) == 0:
            raise EmptyTemplateLibrary("template library is empty")
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape[0] != len(self.library):
            raise ValueError("theta rows must match the template count")

    def log_probs(self, phi: np.ndarray, temperature: float | None = None) -> np.ndarray:
        T = self.temperature if temperature is None else temperature
        return _log_softmax(self.theta @ phi / T)

    def sample(self, ctx: PromptContext, n: int, temperature: float, rng: np.random.Generator):
        phi = context_features(ctx, self.net)
        logp = self.log_probs(phi, temperature)
        cdf = np.cumsum(np.exp(logp))
        draws = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(cdf) - 1)
        return [(self.library.instantiate(int(k), ctx.obs, self.net), float(logp[k])) for k in draws]

    def log_prob(self, ctx: PromptContext, action: Intervention, temperature: float | None = None) -> float:
        k = self.library.index(action.template)
        return float(self.log_probs(context_features(ctx, self.net), temperature)[k])

    def grad_log_prob(self, phi: np.ndarray, k: int, temperature: float | None = None) -> np.ndarray:
        """d log pi(k | phi) / d theta = (onehot_k - pi) outer phi / T."""
        T = self.temperature if temperature is None else temperature
        p = np.exp(self.log_probs(phi, T))
        onehot = np.zeros_like(p)
        onehot[k] = 1.0
        return np.outer(onehot - p, phi) / T

    def with_theta(self, theta: np.ndarray) -> "ParametricPolicy":
        return replace(self, theta=np.array(theta, dtype=float))

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "templates": self.library.names,
            "temperature": self.temperature,
            "theta": self.theta.tolist(),
        }


@dataclass
class ScriptedPolicy:
    """Deterministic actor: ``rule(ctx)`` names the template to play."""

    net: SupplyNetwork
    library: TemplateLibrary
    rule: Callable[[PromptContext], str]
    name: str = "scripted"
    backend: str = field(default="scripted", init=False)
    trainable: bool = field(default=False, init=False)

    def sample(self, ctx: PromptContext, n: int, temperature: float, rng: np.random.Generator):
        k = self.library.index(self.rule(ctx))
        return [(self.library.instantiate(k, ctx.obs, self.net), 0.0) for _ in range(n)]

    def log_prob(self, ctx: PromptContext, action: Intervention, temperature: float | None = None) -> float:
        return 0.0 if action.template == self.rule(ctx) else -math.inf

    def to_dict(self) -> dict:
        return {"backend": self.backend, "name": self.name}


def sample_candidates(policy, ctx: PromptContext, n: int, temperature: float, rng: np.random.Generator):
    """Draw ``n`` (intervention, logprob) candidates from ``policy``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    return policy.sample(ctx, n, temperature, rng)


def log_prob(policy, ctx: PromptContext, action: Intervention, temperature: float | None = None) -> float:
    return policy.log_prob(ctx, action, temperature)


# ---------------------------------------------------------------------------
# critics


@dataclass(frozen=True)
class CriticVerdict:
    feedback: str
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 100.0):
            raise ScoreOutOfRange(f"critic score {self.score} outside [0, 100]")


def clamp_score(x: float) -> float:
    return float(min(100.0, max(0.0, x)))


def reward_to_score(r: float) -> float:
    """Affine map [-1, 1] -> [0, 100]."""
    return 50.0 * (1.0 + r)


DEFAULT_PENALTIES = {"sanction": 50.0, "ban": 20.0, "cap": 10.0, "halt": 30.0}


@dataclass
class ScriptedInternalCritic:
    """Rule-based pre-execution compliance check.

    Deducts from 100 for each planned trade with a sanctioned party, each
    planned shipment on a banned link, each supplier asked for more than its
    current capacity, and each node halted without an active shock behind it.
    """

    net: SupplyNetwork
    penalties: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_PENALTIES))

    def critique(self, obs: Observation, action: Intervention, ctx: PromptContext | None = None) -> CriticVerdict:
        cons = obs.constraints
        notes = []
        score = 100.0
        outbound: dict[str, float] = {}
        for eid, q in action.q_buy.items():
            if q <= 0:
                continue
            e = self.net.edge(eid)
            if e.source in action.halts or e.target in action.halts:
                continue
            if e.source in cons.sanctioned or e.target in cons.sanctioned:
                score -= self.penalties["sanction"]
                notes.append(f"{eid} trades with a sanctioned party")
            elif eid in cons.edge_cap and q > cons.edge_cap[eid] * self.net.node(e.source).capacity:
                score -= self.penalties["ban"]
                notes.append(f"{eid} exceeds an export ban")
            outbound[e.source] = outbound.get(e.source, 0.0) + q
        for src, q in action.produce.items():
            outbound[src] = max(outbound.get(src, 0.0), q)
        for node, q in sorted(outbound.items()):
            cap = self.net.node(node).capacity * cons.capacity_mult.get(node, 1.0)
            if q > cap + 1e-9:
                score -= self.penalties["cap"]
                notes.append(f"{node} asked for {q:.1f} > capacity {cap:.1f}")
        exposed = _shock_exposed(obs, self.net)
        for node in sorted(action.halts):
            if node not in exposed:
                score -= self.penalties["halt"]
                notes.append(f"{node} halted without cause")
        text = "; ".join(notes) if notes else "no compliance issues found"
        return CriticVerdict(text, clamp_score(score))


def _shock_exposed(obs: Observation, net: SupplyNetwork) -> set[str]:
    out = set()
    for s in obs.shocks:
        for t in s.targets:
            if net.has_edge(t):
                e = net.edge(t)
                out |= {e.source, e.target}
            elif net.has_node(t):
                out.add(t)
    return out


@dataclass
class ScriptedExternalCritic:
    """Post-execution assessor; also produces the hindsight re-scores."""

    net: SupplyNetwork
    violation_penalty: float = 10.0
    discount: float = 0.9
    cascade_coef: float = 1.0

    def assess(self, obs: Observation, action: Intervention, feedback: ExecFeedback) -> CriticVerdict:
        n_viol = feedback.violation_count
        score = clamp_score(reward_to_score(feedback.reward) - self.violation_penalty * n_viol)
        text = f"step reward {feedback.reward:+.3f}, {n_viol} violation(s)"
        return CriticVerdict(text, score)

    def retrospective(self, buffer: HindsightBuffer, index: int, final_obs: Observation) -> CriticVerdict:
        """Re-score record ``index`` using the rest of the window.

        The score maps the discounted mean of realized rewards from the record
        to the end of the window onto [0, 100], then subtracts a penalty for
        risk growth, up to ``final_obs``, on the nodes that record's
        violations implicated (violators and their direct customers).
        """
        if not 0 <= index < len(buffer):
            raise IndexOutOfBuffer(f"index {index} outside buffer of size {len(buffer)}")
        records = buffer.records[index:]
        weights = [self.discount ** h for h in range(len(records))]
        rewards = [rec.feedback.reward for rec in records]
        mean_return = sum(w * r for w, r in zip(weights, rewards)) / sum(weights)
        rec = buffer.records[index]
        violators = [n for n, v in rec.feedback.violations.items() if v]
        penalty = 0.0
        if violators:
            implicated = set(violators)
            for n in violators:
                implicated |= {m for m, _ in self.net.successors(n)}
            growth = [
                max(0.0, final_obs.nodes[n]["risk"] - rec.obs.nodes[n]["risk"]) for n in sorted(implicated)
            ]
            penalty = self.cascade_coef * sum(growth) / len(growth)
        score = clamp_score(reward_to_score(mean_return) - penalty)
        text = (
            f"window return {mean_return:+.3f} over {len(records)} step(s)"
            + (f", cascade penalty {penalty:.1f}" if penalty else "")
        )
        return CriticVerdict(text, score)


def internal_critique(critic, obs: Observation, action: Intervention, ctx: PromptContext | None = None) -> CriticVerdict:
    return critic.critique(obs, action, ctx)


def external_assess(critic, obs: Observation, action: Intervention, feedback: ExecFeedback) -> CriticVerdict:
    return critic.assess(obs, action, feedback)


def retrospective_score(critic, buffer: HindsightBuffer, index: int, final_obs: Observation) -> CriticVerdict:
    return critic.retrospective(buffer, index, final_obs)
