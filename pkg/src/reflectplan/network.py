"""Supply-network topology, node roles and per-node state.

A network is a directed graph whose edges point from supplier to customer.
Each edge carries a dependency weight in [0, 1] that scales how much of the
supplier's excess risk reaches the customer.

Spec files are JSON documents::

    {
      "name": "semisim-v1",
      "nodes": [{"id": ..., "role": "Upstream|Midstream|Downstream",
                 "label": ..., "p_sale": ..., "p_cost": ..., "capacity": ...}],
      "edges": [{"source": ..., "target": ..., "weight": ...}]
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import (
    DanglingEdge,
    DuplicateNode,
    EmptyNetwork,
    NetworkError,
    UnknownNode,
    WeightOutOfRange,
)

DEFAULT_FEATURE_MEAN = -0.21
DEFAULT_FEATURE_DIM = 8
DEFAULT_FEATURE_STD = 0.1


class Role(str, Enum):
    UPSTREAM = "Upstream"
    MIDSTREAM = "Midstream"
    DOWNSTREAM = "Downstream"


@dataclass(frozen=True)
class NodeSpec:
    id: str
    role: Role
    label: str = ""
    p_sale: float = 0.0
    p_cost: float = 0.0
    capacity: float = 1.0

    def __post_init__(self):
        if self.p_sale < 0 or self.p_cost < 0:
            raise NetworkError(f"node {self.id!r}: prices must be non-negative")
        if not self.capacity > 0:
            raise NetworkError(f"node {self.id!r}: capacity must be positive")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "role": self.role.value,
            "label": self.label,
            "p_sale": self.p_sale,
            "p_cost": self.p_cost,
            "capacity": self.capacity,
        }


@dataclass(frozen=True)
class EdgeSpec:
    source: str
    target: str
    weight: float

    @property
    def id(self) -> str:
        return edge_id(self.source, self.target)

    def to_dict(self) -> dict:
        return {"source": self.source, "target": self.target, "weight": self.weight}


def edge_id(source: str, target: str) -> str:
    return f"{source}->{target}"


@dataclass(frozen=True)
class NodeState:
    """Inventory I, cash C, compliance Omega and risk R of one node."""

    inventory: float
    cash: float
    compliance: float
    risk: float
    operable: bool = True

    def to_dict(self) -> dict:
        return {
            "inventory": self.inventory,
            "cash": self.cash,
            "compliance": self.compliance,
            "risk": self.risk,
            "operable": self.operable,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NodeState":
        return cls(
            inventory=float(d["inventory"]),
            cash=float(d["cash"]),
            compliance=float(d["compliance"]),
            risk=float(d["risk"]),
            operable=bool(d.get("operable", True)),
        )


@dataclass(frozen=True)
class SupplyNetwork:
    """Validated, immutable supply network. Build with :func:`build_network`."""

    name: str
    nodes: tuple[NodeSpec, ...]
    edges: tuple[EdgeSpec, ...]
    _node_index: Mapping[str, NodeSpec] = field(repr=False, compare=False)
    _edge_index: Mapping[str, EdgeSpec] = field(repr=False, compare=False)
    _pred: Mapping[str, tuple[tuple[str, float], ...]] = field(repr=False, compare=False)
    _succ: Mapping[str, tuple[tuple[str, float], ...]] = field(repr=False, compare=False)

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes)

    @property
    def edge_ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.edges)

    def node(self, node_id: str) -> NodeSpec:
        try:
            return self._node_index[node_id]
        except KeyError:
            raise UnknownNode(f"unknown node {node_id!r}") from None

    def edge(self, eid: str) -> EdgeSpec:
        try:
            return self._edge_index[eid]
        except KeyError:
            raise UnknownNode(f"unknown edge {eid!r}") from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._node_index

    def has_edge(self, eid: str) -> bool:
        return eid in self._edge_index

    def predecessors(self, node_id: str) -> list[tuple[str, float]]:
        self.node(node_id)
        return list(self._pred[node_id])

    def successors(self, node_id: str) -> list[tuple[str, float]]:
        self.node(node_id)
        return list(self._succ[node_id])

    def in_edges(self, node_id: str) -> list[EdgeSpec]:
        return [self._edge_index[edge_id(j, node_id)] for j, _ in self._pred[node_id]]

    def out_edges(self, node_id: str) -> list[EdgeSpec]:
        return [self._edge_index[edge_id(node_id, i)] for i, _ in self._succ[node_id]]

    def by_role(self, role: Role) -> list[str]:
        return [n.id for n in self.nodes if n.role == role]

    @property
    def sources(self) -> list[str]:
        return [n for n in self.node_ids if not self._pred[n]]

    @property
    def sinks(self) -> list[str]:
        return [n for n in self.node_ids if not self._succ[n]]

    def to_spec(self) -> dict:
        return {
            "name": self.name,
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [e.to_dict() for e in self.edges],
        }


def build_network(spec: Mapping) -> SupplyNetwork:
    """Validate a network spec mapping and return an immutable network.

    Raises:
        EmptyNetwork: the spec has no nodes.
        DuplicateNode: two nodes share an id, or an edge is repeated.
        DanglingEdge: an edge references a node that does not exist.
        WeightOutOfRange: a dependency weight lies outside [0, 1].
    """
    raw_nodes = list(spec.get("nodes") or [])
    raw_edges = list(spec.get("edges") or [])
    if not raw_nodes:
        raise EmptyNetwork("network spec has no nodes")

    nodes: list[NodeSpec] = []
    index: dict[str, NodeSpec] = {}
    for raw in raw_nodes:
        nid = str(raw["id"])
        if nid in index:
            raise DuplicateNode(f"duplicate node id {nid!r}")
        try:
            role = Role(raw.get("role", "Midstream"))
        except ValueError:
            raise NetworkError(f"node {nid!r}: unknown role {raw.get('role')!r}") from None
        node = NodeSpec(
            id=nid,
            role=role,
            label=str(raw.get("label", "")),
            p_sale=float(raw.get("p_sale", 0.0)),
            p_cost=float(raw.get("p_cost", 0.0)),
            capacity=float(raw.get("capacity", 1.0)),
        )
        nodes.append(node)
        index[nid] = node

    edges: list[EdgeSpec] = []
    eindex: dict[str, EdgeSpec] = {}
    for raw in raw_edges:
        src, dst = str(raw["source"]), str(raw["target"])
        for end in (src, dst):
            if end not in index:
                raise DanglingEdge(f"edge {edge_id(src, dst)!r} references unknown node {end!r}")
        w = float(raw.get("weight", 0.0))
        if not (0.0 <= w <= 1.0) or math.isnan(w):
            raise WeightOutOfRange(f"edge {edge_id(src, dst)!r} has weight {w} outside [0, 1]")
        e = EdgeSpec(src, dst, w)
        if e.id in eindex:
            raise DuplicateNode(f"duplicate edge {e.id!r}")
        edges.append(e)
        eindex[e.id] = e

    pred: dict[str, list[tuple[str, float]]] = {n.id: [] for n in nodes}
    succ: dict[str, list[tuple[str, float]]] = {n.id: [] for n in nodes}
    for e in edges:
        pred[e.target].append((e.source, e.weight))
        succ[e.source].append((e.target, e.weight))

    net = SupplyNetwork(
        name=str(spec.get("name", "unnamed")),
        nodes=tuple(nodes),
        edges=tuple(edges),
        _node_index=MappingProxyType(index),
        _edge_index=MappingProxyType(eindex),
        _pred=MappingProxyType({k: tuple(sorted(v)) for k, v in pred.items()}),
        _succ=MappingProxyType({k: tuple(sorted(v)) for k, v in succ.items()}),
    )
    if raw_edges and (not net.sources or not net.sinks):
        raise NetworkError("network needs at least one source and one sink node")
    return net


def predecessors(net: SupplyNetwork, node: str) -> list[tuple[str, float]]:
    """Upstream neighbours of ``node`` with their weights, sorted by id."""
    return net.predecessors(node)


def serialize_network(net: SupplyNetwork) -> str:
    return json.dumps(net.to_spec(), indent=2, sort_keys=True)


def deserialize_network(text: str) -> SupplyNetwork:
    return build_network(json.loads(text))


def load_network(ref: str | Path = "semisim-v1") -> SupplyNetwork:
    """Load a bundled topology by name, or a spec file by path."""
    return build_network(load_json_resource(ref))


def load_json_resource(ref: str | Path):
    path = Path(ref)
    if path.suffix == ".json" and path.exists():
        return json.loads(path.read_text())
    name = path.name if path.suffix == ".json" else f"{ref}.json"
    res = resources.files("reflectplan").joinpath("data").joinpath(name)
    if not res.is_file():
        raise FileNotFoundError(f"no bundled resource or file named {ref!r}")
    return json.loads(res.read_text())


def draw_features(
    net: SupplyNetwork,
    seed: int,
    feature_mean: float = DEFAULT_FEATURE_MEAN,
    dim: int = DEFAULT_FEATURE_DIM,
    std: float = DEFAULT_FEATURE_STD,
) -> np.ndarray:
    """Seeded latent features, one row per node in network order."""
    if not math.isfinite(feature_mean):
        raise ValueError("feature_mean must be finite")
    rng = np.random.default_rng(seed)
    return rng.normal(feature_mean, std, size=(len(net.nodes), dim))


def init_states(
    net: SupplyNetwork,
    seed: int,
    feature_mean: float = DEFAULT_FEATURE_MEAN,
    dim: int = DEFAULT_FEATURE_DIM,
    std: float = DEFAULT_FEATURE_STD,
) -> dict[str, NodeState]:
    """Initial node states as affine maps of seeded latent features.

    A negative feature mean starts the network below nominal stock with
    elevated risk, near the propagation threshold.
    """
    if dim < 4:
        raise ValueError("feature dimension must be at least 4")
    feats = draw_features(net, seed, feature_mean, dim, std)
    states = {}
    for node, f in zip(net.nodes, feats):
        states[node.id] = NodeState(
            inventory=float(max(0.0, node.capacity * (1.0 + f[0]))),
            cash=float(1000.0 * (1.0 + f[1])),
            compliance=float(np.clip(100.0 + 40.0 * f[2], 0.0, 100.0)),
            risk=float(np.clip(15.0 - 50.0 * f[3], 0.0, 100.0)),
        )
    return states
