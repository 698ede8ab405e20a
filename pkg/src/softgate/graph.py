"""Forney-style factor graphs: construction, termination, validation, schedules.

Nodes are factors; edges are variables with exactly two endpoints after
termination.  Variables shared by more than two factors are routed
through explicit equality nodes; the connected component of edges
through equality nodes forms a *variable group* carrying one belief.

Line types act as the type system: solid and dash-dot edges carry
Gaussian-typed variables, dashed edges carry Gamma-typed variables.  A
graph is *proper* when it is assembled from the five-factor alphabet and
every edge's endpoints agree with its line type; properness is what
guarantees every message in the runtime has a closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "Edge",
    "FactorGraph",
    "GraphError",
    "LineType",
    "Node",
    "NodeKind",
    "Schedule",
    "ValidationReport",
    "VariableGroup",
    "build_schedule",
    "validate_proper",
]


class GraphError(ValueError):
    """Structural error while building or loading a factor graph."""


class LineType(str, Enum):
    SOLID = "solid"
    DASHED = "dashed"
    DASH_DOT = "dash_dot"


class NodeKind(str, Enum):
    SOFTDOT = "softdot"
    EXP_LINK = "exp_link"
    GAMMA_FACTOR = "gamma_factor"
    NORMAL_FACTOR = "normal_factor"
    EQUALITY = "equality"
    CLAMP = "clamp"
    OBSERVATION = "observation"
    UNITY = "unity"


GAUSSIAN_LINES = frozenset({LineType.SOLID, LineType.DASH_DOT})
TERMINATORS = frozenset({NodeKind.CLAMP, NodeKind.OBSERVATION, NodeKind.UNITY})
DETERMINISTIC = frozenset({NodeKind.EXP_LINK, NodeKind.EQUALITY})

# port name -> variable family expected by the factor kernel
PORT_FAMILIES = {
    NodeKind.SOFTDOT: {"z": "gaussian", "w": "gaussian", "phi": "gaussian", "tau": "gamma"},
    NodeKind.EXP_LINK: {"z": "gaussian", "gamma": "gamma"},
    NodeKind.GAMMA_FACTOR: {"gamma": "gamma", "beta": "gamma", "alpha": "clamp"},
    NodeKind.NORMAL_FACTOR: {"y": "gaussian", "mu": "gaussian", "tau": "gamma"},
}

# canonical line per factor port, used when auto-creating clamp edges
PORT_LINES = {
    NodeKind.SOFTDOT: {"z": LineType.DASH_DOT, "w": LineType.SOLID,
                       "phi": LineType.SOLID, "tau": LineType.DASHED},
    NodeKind.EXP_LINK: {"z": LineType.DASH_DOT, "gamma": LineType.DASHED},
    NodeKind.GAMMA_FACTOR: {"gamma": LineType.DASHED, "beta": LineType.DASHED,
                            "alpha": LineType.SOLID},
    NodeKind.NORMAL_FACTOR: {"y": LineType.SOLID, "mu": LineType.SOLID,
                             "tau": LineType.DASHED},
}


def _line_family(line: LineType) -> str:
    return "gaussian" if line in GAUSSIAN_LINES else "gamma"


@dataclass
class Node:
    id: str
    kind: NodeKind
    value: object = None          # clamp / observation payload
    structured: bool = False      # normal factor: structured q(y, mu)
    n_ports: int = 0              # equality arity

    def port_names(self) -> list[str]:
        if self.kind == NodeKind.EQUALITY:
            return [f"p{k}" for k in range(self.n_ports)]
        if self.kind in TERMINATORS:
            return ["x"]
        return list(PORT_FAMILIES[self.kind])


@dataclass
class Edge:
    id: str
    line: LineType
    family: str                   # "gaussian" | "mvgaussian" | "gamma"
    dim: int = 1
    role: str = ""
    diagonal: bool = False
    endpoints: list = field(default_factory=list)


@dataclass
class VariableGroup:
    """A set of edges identified through equality nodes: one belief."""

    id: str
    family: str
    dim: int
    edges: list
    factors: list                 # (node_id, port) of stochastic factors
    exp_links: list               # (node_id, port) of adjacent exp links
    equalities: list
    observed: object = None       # value if clamped/observed
    role: str = ""
    diagonal: bool = False

    @property
    def is_observed(self) -> bool:
        return self.observed is not None


class FactorGraph:
    """Mutable builder; :meth:`terminate` freezes the structure."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.edges: dict[str, Edge] = {}
        self.terminated = False
        self._counts: dict[str, int] = {}
        self._port_map: dict[tuple[str, str], str] = {}

    # -- construction -------------------------------------------------

    def _next_id(self, prefix: str) -> str:
        n = self._counts.get(prefix, 0)
        self._counts[prefix] = n + 1
        return f"{prefix}{n:04d}"

    def add_factor(self, kind: NodeKind, *, value=None, structured: bool = False,
                   n_ports: int = 3, node_id: str | None = None) -> str:
        if self.terminated:
            raise GraphError("graph already terminated")
        kind = NodeKind(kind)
        if kind == NodeKind.EQUALITY and n_ports < 3:
            raise GraphError("equality nodes need at least three ports")
        node_id = node_id or self._next_id(f"n.{kind.value}.")
        if node_id in self.nodes:
            raise GraphError(f"duplicate node id {node_id}")
        self.nodes[node_id] = Node(
            id=node_id, kind=kind, value=value, structured=structured,
            n_ports=n_ports if kind == NodeKind.EQUALITY else 0,
        )
        return node_id

    def add_edge(self, line: LineType, *, family: str | None = None, dim: int = 1,
                 role: str = "", diagonal: bool = False, edge_id: str | None = None) -> str:
        if self.terminated:
            raise GraphError("graph already terminated")
        line = LineType(line)
        family = family or _line_family(line)
        if family not in ("gaussian", "mvgaussian", "gamma"):
            raise GraphError(f"unknown family {family!r}")
        if _line_family(line) != ("gaussian" if family != "gamma" else "gamma"):
            raise GraphError(f"family {family!r} inconsistent with line {line.value}")
        edge_id = edge_id or self._next_id("e.")
        if edge_id in self.edges:
            raise GraphError(f"duplicate edge id {edge_id}")
        self.edges[edge_id] = Edge(
            id=edge_id, line=line, family=family, dim=dim, role=role, diagonal=diagonal
        )
        return edge_id

    def connect(self, node_id: str, port: str, edge_id: str) -> None:
        node = self.nodes[node_id]
        edge = self.edges[edge_id]
        if port not in node.port_names():
            raise GraphError(f"node {node_id} ({node.kind.value}) has no port {port!r}")
        if (node_id, port) in self._port_map:
            raise GraphError(f"port {port!r} of {node_id} already connected")
        if len(edge.endpoints) >= 2:
            raise GraphError(f"edge {edge_id} already has two endpoints")
        expected = PORT_FAMILIES.get(node.kind, {}).get(port)
        if expected in ("gaussian", "gamma"):
            actual = "gaussian" if edge.family in ("gaussian", "mvgaussian") else "gamma"
            if actual != expected:
                raise GraphError(
                    f"line-type mismatch: port {port!r} of {node.kind.value} is "
                    f"{expected}-typed but edge {edge_id} carries {edge.family}"
                )
        edge.endpoints.append((node_id, port))
        self._port_map[(node_id, port)] = edge_id

    def clamp(self, node_id: str, port: str, value, *, dim: int | None = None) -> str:
        """Attach a fixed numerical value to a factor port."""
        return self._attach_terminal(NodeKind.CLAMP, node_id, port, value, dim)

    def observe(self, node_id: str, port: str, value, *, dim: int | None = None) -> str:
        """Attach an observed value to a factor port."""
        return self._attach_terminal(NodeKind.OBSERVATION, node_id, port, value, dim)

    def _attach_terminal(self, kind, node_id, port, value, dim):
        node = self.nodes[node_id]
        line = PORT_LINES.get(node.kind, {}).get(port)
        if line is None:
            # equality hub: match the line of any already-connected edge
            for (nid, _), eid in self._port_map.items():
                if nid == node_id:
                    line = self.edges[eid].line
                    break
        if line is None:
            raise GraphError(f"cannot infer line type for {node_id}.{port}")
        if dim is None:
            arr = np.asarray(value, dtype=float)
            dim = int(arr.size) if arr.ndim else 1
        family = _line_family(line)
        if family == "gaussian" and dim > 1:
            family = "mvgaussian"
        edge_id = self.add_edge(line, family=family, dim=dim)
        term_id = self.add_factor(kind, value=value)
        self.connect(node_id, port, edge_id)
        self.connect(term_id, "x", edge_id)
        return edge_id

    def terminate(self) -> "FactorGraph":
        """Close every half-edge and unconnected port with a unity factor."""
        if self.terminated:
            return self
        for node_id in list(self.nodes):
            node = self.nodes[node_id]
            if node.kind in TERMINATORS:
                continue
            for port in node.port_names():
                if (node_id, port) not in self._port_map:
                    line = PORT_LINES.get(node.kind, {}).get(port)
                    if line is None:
                        line = self._infer_hub_line(node_id) or LineType.SOLID
                    edge_id = self.add_edge(line)
                    unity = self.add_factor(NodeKind.UNITY)
                    self.connect(node_id, port, edge_id)
                    self.connect(unity, "x", edge_id)
        for edge in list(self.edges.values()):
            if len(edge.endpoints) == 1:
                unity = self.add_factor(NodeKind.UNITY)
                self.connect(unity, "x", edge.id)
            elif len(edge.endpoints) == 0:
                raise GraphError(f"edge {edge.id} is not connected to any node")
        self.terminated = True
        return self

    def _infer_hub_line(self, node_id):
        for (nid, _), eid in self._port_map.items():
            if nid == node_id:
                return self.edges[eid].line
        return None

    # -- structure queries --------------------------------------------

    def node_edges(self, node_id: str) -> list[tuple[str, str]]:
        """(port, edge_id) pairs of a node, in port order."""
        node = self.nodes[node_id]
        return [
            (port, self._port_map[(node_id, port)])
            for port in node.port_names()
            if (node_id, port) in self._port_map
        ]

    def variable_groups(self) -> list[VariableGroup]:
        """Connected components of edges through equality nodes.

        Cached once the graph is terminated (the structure is immutable
        from that point on).
        """
        if self.terminated and getattr(self, "_groups_cache", None) is not None:
            return self._groups_cache
        parent: dict[str, str] = {e: e for e in self.edges}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

        for node_id, node in self.nodes.items():
            if node.kind == NodeKind.EQUALITY:
                eids = [eid for _, eid in self.node_edges(node_id)]
                for other in eids[1:]:
                    union(eids[0], other)

        members: dict[str, list[str]] = {}
        for eid in sorted(self.edges):
            members.setdefault(find(eid), []).append(eid)

        groups = []
        for gid in sorted(members):
            edge_ids = members[gid]
            edges = [self.edges[e] for e in edge_ids]
            family = edges[0].family
            dim = max(e.dim for e in edges)
            factors, exp_links, equalities = [], [], []
            observed = None
            role = ""
            diagonal = any(e.diagonal for e in edges)
            seen_eq = set()
            for edge in edges:
                if edge.role and not role:
                    role = edge.role
                for node_id, port in edge.endpoints:
                    node = self.nodes[node_id]
                    if node.kind == NodeKind.EQUALITY:
                        if node_id not in seen_eq:
                            seen_eq.add(node_id)
                            equalities.append(node_id)
                    elif node.kind == NodeKind.EXP_LINK:
                        exp_links.append((node_id, port))
                    elif node.kind in (NodeKind.OBSERVATION, NodeKind.CLAMP):
                        observed = node.value
                    elif node.kind != NodeKind.UNITY:
                        factors.append((node_id, port))
            groups.append(VariableGroup(
                id=gid, family=family, dim=dim, edges=edge_ids, factors=factors,
                exp_links=exp_links, equalities=equalities, observed=observed,
                role=role, diagonal=diagonal,
            ))
        if self.terminated:
            self._groups_cache = groups
        return groups

    # -- serialization -------------------------------------------------

    def to_json(self) -> str:
        def payload(value):
            if value is None:
                return None
            arr = np.asarray(value, dtype=float)
            return arr.tolist() if arr.ndim else float(arr)

        doc = {
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind.value,
                    "value": payload(n.value),
                    "structured": n.structured,
                    "n_ports": n.n_ports,
                }
                for n in (self.nodes[k] for k in sorted(self.nodes))
            ],
            "edges": [
                {
                    "id": e.id,
                    "line": e.line.value,
                    "family": e.family,
                    "dim": e.dim,
                    "role": e.role,
                    "diagonal": e.diagonal,
                    "endpoints": [[n, p] for n, p in e.endpoints],
                }
                for e in (self.edges[k] for k in sorted(self.edges))
            ],
            "terminated": self.terminated,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FactorGraph":
        doc = json.loads(text)
        graph = cls()
        try:
            for n in doc["nodes"]:
                node = Node(
                    id=n["id"], kind=NodeKind(n["kind"]), value=n.get("value"),
                    structured=bool(n.get("structured", False)),
                    n_ports=int(n.get("n_ports", 0)),
                )
                graph.nodes[node.id] = node
            for e in doc["edges"]:
                edge = Edge(
                    id=e["id"], line=LineType(e["line"]), family=e["family"],
                    dim=int(e.get("dim", 1)), role=e.get("role", ""),
                    diagonal=bool(e.get("diagonal", False)),
                    endpoints=[(n, p) for n, p in e["endpoints"]],
                )
                if edge.family not in ("gaussian", "mvgaussian", "gamma"):
                    raise GraphError(f"unknown family {edge.family!r} on edge {edge.id}")
                graph.edges[edge.id] = edge
                for node_id, port in edge.endpoints:
                    if node_id not in graph.nodes:
                        raise GraphError(f"edge {edge.id} references unknown node {node_id}")
                    graph._port_map[(node_id, port)] = edge.id
            graph.terminated = bool(doc.get("terminated", False))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GraphError):
                raise
            raise GraphError(f"malformed graph document: {exc}") from exc
        return graph


# ---------------------------------------------------------------------------
# properness validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


_ARITY = {
    NodeKind.SOFTDOT: 4,
    NodeKind.EXP_LINK: 2,
    NodeKind.GAMMA_FACTOR: 3,
    NodeKind.NORMAL_FACTOR: 3,
}


def validate_proper(graph: FactorGraph) -> ValidationReport:
    """Check the line-type discipline and alphabet wiring of a graph.

    Passes iff every edge has two endpoints whose ports agree with its
    line type, every factor has its full arity, equality nodes join one
    family only, and no variable group touches more than one exponential
    link (the product of two change-of-variable messages has no closed
    form, so such graphs are rejected rather than mis-solved).
    """
    violations = []
    for edge in (graph.edges[k] for k in sorted(graph.edges)):
        if len(edge.endpoints) != 2:
            violations.append(
                f"edge {edge.id}: {len(edge.endpoints)} endpoints (graph not terminated?)"
            )
        line_fam = _line_family(edge.line)
        edge_fam = "gaussian" if edge.family in ("gaussian", "mvgaussian") else "gamma"
        if line_fam != edge_fam:
            violations.append(
                f"edge {edge.id}: family {edge.family} inconsistent with line {edge.line.value}"
            )
        for node_id, port in edge.endpoints:
            node = graph.nodes.get(node_id)
            if node is None:
                violations.append(f"edge {edge.id}: unknown node {node_id}")
                continue
            expected = PORT_FAMILIES.get(node.kind, {}).get(port)
            if expected == "clamp":
                other = [n for n, _ in edge.endpoints if n != node_id]
                if other and graph.nodes[other[0]].kind != NodeKind.CLAMP:
                    violations.append(
                        f"edge {edge.id}: port {port!r} of {node_id} must connect to a clamp"
                    )
            elif expected in ("gaussian", "gamma") and line_fam != expected:
                violations.append(
                    f"edge {edge.id}: {edge.line.value} line into {expected}-typed "
                    f"port {port!r} of {node_id}"
                )
    for node in (graph.nodes[k] for k in sorted(graph.nodes)):
        connected = len(graph.node_edges(node.id))
        if node.kind in _ARITY and connected != _ARITY[node.kind]:
            violations.append(
                f"node {node.id} ({node.kind.value}): {connected} of "
                f"{_ARITY[node.kind]} ports connected"
            )
        if node.kind == NodeKind.EQUALITY:
            if connected < 3:
                violations.append(f"node {node.id}: equality with fewer than 3 ports")
            lines = {graph.edges[eid].line for _, eid in graph.node_edges(node.id)}
            fams = {_line_family(line) for line in lines}
            if len(fams) > 1:
                violations.append(f"node {node.id}: equality mixes Gaussian and Gamma edges")
        if node.kind in DETERMINISTIC and node.structured:
            violations.append(f"node {node.id}: deterministic node carries a factorization")
    for group in graph.variable_groups():
        if len(group.exp_links) > 1:
            violations.append(
                f"group {group.id}: {len(group.exp_links)} exponential links share one "
                "variable; their message product has no closed form"
            )
    return ValidationReport(violations)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

PARAMETER_ROLES = frozenset({"w", "tau", "beta", "kappa", "precision"})


@dataclass(frozen=True)
class Schedule:
    """One deterministic sweep: message steps and group updates in order.

    ``steps`` is a flat tuple of ``("message", node_id, edge_id)`` and
    ``("update", group_id, method)`` records.  Message steps cover every
    (node, adjacent-edge) pair exactly once; updates cover every latent
    group.  The plan is reproducible: identical graphs yield identical
    schedules.
    """

    steps: tuple

    @property
    def message_steps(self):
        return [s for s in self.steps if s[0] == "message"]

    @property
    def update_steps(self):
        return [s for s in self.steps if s[0] == "update"]

    def fingerprint(self) -> int:
        return hash(self.steps)


def build_schedule(graph: FactorGraph) -> Schedule:
    """Plan one sweep: exp-adjacent edges first, then conjugate products,
    then parameter updates, in group-id (observation-major) order."""
    if not graph.terminated:
        raise GraphError("schedule requires a terminated graph")
    report = validate_proper(graph)
    if not report.ok:
        raise GraphError("graph is not proper: " + "; ".join(report.violations))
    groups = graph.variable_groups()

    def group_messages(group):
        steps = []
        for eid in group.edges:
            for node_id, _ in graph.edges[eid].endpoints:
                steps.append(("message", node_id, eid))
        return steps

    exp_groups = [g for g in groups if g.exp_links and not g.is_observed]
    gauss_exp = [g for g in exp_groups if g.family != "gamma"]
    gamma_exp = [g for g in exp_groups if g.family == "gamma"]
    conjugate = [g for g in groups if not g.exp_links and not g.is_observed]
    plain = [g for g in conjugate if g.role not in PARAMETER_ROLES]
    params = [g for g in conjugate if g.role in PARAMETER_ROLES]
    observed = [g for g in groups if g.is_observed]

    steps = []
    for g in gauss_exp + gamma_exp:
        steps.extend(group_messages(g))
    for g in gauss_exp:
        steps.append(("update", g.id, "solve_gaussian"))
    for g in gamma_exp:
        steps.append(("update", g.id, "solve_gamma"))
    for g in plain:
        steps.extend(group_messages(g))
        steps.append(("update", g.id, "product"))
    for g in params:
        steps.extend(group_messages(g))
        steps.append(("update", g.id, "product"))
    for g in observed:
        steps.extend(group_messages(g))
    return Schedule(steps=tuple(steps))
