"""The inference loop: alternate message and marginal computation per sweep.

One sweep follows the schedule: messages into exp-link-adjacent edges,
fixed-point solves on those edges, conjugate-edge products, then
parameter-edge updates, everything eagerly consuming the newest
beliefs.  The Bethe free energy is recorded after every sweep.

Runs are deterministic: the schedule is a fixed total order and all
arithmetic happens in a reproducible sequence, so identical inputs give
bit-identical marginals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rules
from .bfe import BfeBreakdown, bethe_free_energy
from .families import (
    DegenerateBeliefError,
    Flat,
    Gamma,
    Gaussian,
    LogGamma,
    LogNormal,
    MvGaussian,
    PointMass,
    natural_product,
)
from .fixedpoint import SolverConfig, solve_gamma_edge, solve_gaussian_edge
from .graph import FactorGraph, GraphError, NodeKind, Schedule, build_schedule

__all__ = ["InferenceConfig", "Marginals", "infer", "predictive"]


@dataclass(frozen=True)
class InferenceConfig:
    """Sweep budget and solver settings.

    Training default is 5 sweeps; prediction conventionally uses 3.
    ``initial_beliefs`` maps edge or group ids to starting beliefs;
    groups without one start at the family defaults N(0, 1) and
    Gamma(1, 1), except read-out variables (role ``y``) which start
    flat.  ``early_stop_delta`` optionally stops when the free energy
    improves by less than the given amount (off by default).
    """

    sweeps: int = 5
    solver: SolverConfig = field(default_factory=SolverConfig)
    initial_beliefs: dict | None = None
    track_bfe: bool = True
    early_stop_delta: float | None = None

    def __post_init__(self):
        if self.sweeps < 1:
            raise ValueError("sweeps must be at least 1")


@dataclass
class Marginals:
    """Edge-indexed beliefs plus the free-energy trace of the run."""

    beliefs: dict
    group_beliefs: dict
    bfe_trace: list
    status: dict
    groups: list
    sweeps_run: int = 0

    def belief_of(self, edge_id: str):
        return self.beliefs[edge_id]


class _Runtime:
    """Execution state for one inference run."""

    def __init__(self, graph: FactorGraph, cfg: InferenceConfig):
        self.graph = graph
        self.cfg = cfg
        self.schedule = build_schedule(graph)
        self.groups = graph.variable_groups()
        self.by_id = {g.id: g for g in self.groups}
        self.group_of_edge = {}
        for g in self.groups:
            for eid in g.edges:
                self.group_of_edge[eid] = g
        self.node_ports = {
            node_id: dict(graph.node_edges(node_id)) for node_id in graph.nodes
        }
        self.beliefs: dict[str, object] = {}
        self.status: dict[str, dict] = {}
        self._init_beliefs()

    # -- initialization -------------------------------------------------

    def _default_belief(self, group):
        if group.role == "y":
            return Flat()
        if group.family == "gamma":
            return Gamma(1.0, 1.0)
        if group.family == "mvgaussian" or group.dim > 1:
            return MvGaussian(np.zeros(group.dim), np.eye(group.dim),
                              diagonal_only=group.diagonal)
        return Gaussian.from_moments(0.0, 1.0)

    def _init_beliefs(self):
        overrides = self.cfg.initial_beliefs or {}
        for group in self.groups:
            if group.is_observed:
                self.beliefs[group.id] = PointMass(group.observed)
                continue
            chosen = None
            for key in (group.id, *group.edges):
                if key in overrides:
                    chosen = overrides[key]
                    break
            self.beliefs[group.id] = chosen if chosen is not None else self._default_belief(group)

    # -- belief access ---------------------------------------------------

    def port_belief(self, node_id: str, port: str):
        gid = self.group_of_edge[self.node_ports[node_id][port]].id
        return self.beliefs[gid]

    def _is_flat(self, belief) -> bool:
        return isinstance(belief, Flat)

    # -- factor messages --------------------------------------------------

    def factor_message(self, node_id: str, facing_port: str):
        """Message from a stochastic factor toward the group at ``facing_port``.

        Returns ``Flat()`` when a required far-side belief is still flat
        (uninformative), so early sweeps simply skip that contribution.
        """
        node = self.graph.nodes[node_id]
        kind = node.kind
        if kind == NodeKind.SOFTDOT:
            b = {p: self.port_belief(node_id, p) for p in ("z", "w", "phi", "tau")}
            needed = {"z": ("w", "phi", "tau"), "w": ("phi", "z", "tau"),
                      "phi": ("w", "z", "tau"), "tau": ("w", "phi", "z")}[facing_port]
            if any(self._is_flat(b[p]) for p in needed):
                return Flat()
            kwargs = {f"q_{p}": b[p] for p in needed}
            return rules.softdot_message(facing_port, **kwargs)
        if kind == NodeKind.NORMAL_FACTOR:
            b = {p: self.port_belief(node_id, p) for p in ("y", "mu", "tau")}
            if facing_port in ("y", "mu"):
                source = "mu" if facing_port == "y" else "y"
                if self._is_flat(b["tau"]):
                    return Flat()
                if node.structured:
                    # structured joint over (y, mu): belief propagation,
                    # so the opposite side enters through its incoming
                    # message and the variances add
                    incoming = self.conjugate_product(
                        self.group_of_edge[self.node_ports[node_id][source]],
                        exclude=node_id,
                    )
                    if isinstance(incoming, Flat):
                        return Flat()
                    tau = _mean_precision(b["tau"])
                    if math.isinf(tau):
                        return incoming
                    return rules.normal_bp_to_y(incoming, tau)
                if self._is_flat(b[source]):
                    return Flat()
                kwargs = {f"q_{source}": b[source], "q_tau": b["tau"]}
                return rules.normal_message(facing_port, **kwargs)
            if facing_port == "tau":
                if self._is_flat(b["y"]) or self._is_flat(b["mu"]):
                    return Flat()
                return rules.normal_message(
                    "tau", q_y=b["y"], q_mu=b["mu"], structured=node.structured
                )
        if kind == NodeKind.GAMMA_FACTOR:
            alpha = PointMass(
                self.by_id[self.group_of_edge[self.node_ports[node_id]["alpha"]].id].observed
            ).as_float()
            if facing_port == "gamma":
                q_beta = self.port_belief(node_id, "beta")
                if self._is_flat(q_beta):
                    return Flat()
                return rules.gamma_node_message("gamma", alpha_clamp=alpha, q_beta=q_beta)
            if facing_port == "beta":
                q_gamma = self.port_belief(node_id, "gamma")
                if self._is_flat(q_gamma):
                    return Flat()
                return rules.gamma_node_message("beta", alpha_clamp=alpha, q_gamma=q_gamma)
        if kind == NodeKind.EXP_LINK:
            return self.explink_message(node_id, facing_port)
        raise GraphError(f"no message rule for node {node_id} ({kind})")

    def explink_message(self, node_id: str, facing_port: str):
        other_port = "z" if facing_port == "gamma" else "gamma"
        other_group = self.group_of_edge[self.node_ports[node_id][other_port]]
        incoming = self.conjugate_product(other_group, exclude=node_id)
        if isinstance(incoming, Flat):
            return LogGamma.flat() if facing_port == "z" else Flat()
        return rules.explink_message(facing_port, incoming)

    def conjugate_product(self, group, exclude: str | None = None):
        """Product of the conjugate factor messages arriving at a group."""
        if group.is_observed:
            return PointMass(group.observed)
        result = Flat()
        for node_id, port in group.factors:
            if node_id == exclude:
                continue
            msg = self.factor_message(node_id, port)
            if isinstance(msg, PointMass):
                return msg
            result = natural_product(result, msg)
        return result

    # -- group updates ----------------------------------------------------

    def update_product(self, group):
        msg = self.conjugate_product(group)
        if isinstance(msg, Flat):
            return  # nothing informative yet; keep the current belief
        if isinstance(msg, MvGaussian):
            if group.diagonal:
                msg = msg.project_diagonal()
            msg._chol()  # belief must be normalizable
        self.beliefs[group.id] = msg

    def update_gaussian_solve(self, group):
        exp_id, _ = group.exp_links[0]
        conj = self.conjugate_product(group, exclude=exp_id)
        lg = self.explink_message(exp_id, "z")
        if isinstance(conj, PointMass):
            self.beliefs[group.id] = conj
            return
        if isinstance(lg, PointMass):
            self.beliefs[group.id] = lg
            return
        current = self.beliefs[group.id]
        init = current if isinstance(current, Gaussian) else None
        if lg.is_flat and isinstance(conj, Flat):
            return
        result = solve_gaussian_edge(conj if not isinstance(conj, Flat) else Flat(),
                                     lg, init=init, cfg=self.cfg.solver)
        self.beliefs[group.id] = result.belief
        self.status[group.id] = {
            "iterations": result.iterations_used,
            "gradient_norm": result.final_gradient_norm,
            "status": result.status,
        }

    def update_gamma_solve(self, group):
        exp_id, _ = group.exp_links[0]
        conj = self.conjugate_product(group, exclude=exp_id)
        ln = self.explink_message(exp_id, "gamma")
        if isinstance(conj, PointMass):
            self.beliefs[group.id] = conj
            return
        if isinstance(ln, PointMass):
            self.beliefs[group.id] = ln
            return
        if isinstance(ln, Flat):
            if not isinstance(conj, Flat):
                self.beliefs[group.id] = conj
            return
        current = self.beliefs[group.id]
        init = current if isinstance(current, Gamma) else None
        result = solve_gamma_edge(conj if not isinstance(conj, Flat) else Flat(),
                                  ln, init=init, cfg=self.cfg.solver)
        self.beliefs[group.id] = result.belief
        self.status[group.id] = {
            "iterations": result.iterations_used,
            "gradient_norm": result.final_gradient_norm,
            "status": result.status,
        }

    def sweep(self):
        for step in self.schedule.update_steps:
            _, gid, method = step
            group = self.by_id[gid]
            if method == "solve_gaussian":
                self.update_gaussian_solve(group)
            elif method == "solve_gamma":
                self.update_gamma_solve(group)
            else:
                self.update_product(group)

    def free_energy(self) -> float:
        return bethe_free_energy(self.graph, self.beliefs).total


def _mean_precision(belief) -> float:
    if isinstance(belief, Gamma):
        return belief.mean
    if isinstance(belief, PointMass):
        return belief.as_float()
    raise TypeError(type(belief))


def infer(graph: FactorGraph, cfg: InferenceConfig = InferenceConfig()) -> Marginals:
    """Run sweep-based message passing and return the edge marginals.

    The free-energy trace has one entry for the initialization plus one
    per executed sweep.
    """
    runtime = _Runtime(graph, cfg)
    trace = []
    if cfg.track_bfe:
        trace.append(runtime.free_energy())
    sweeps_run = 0
    for _ in range(cfg.sweeps):
        runtime.sweep()
        sweeps_run += 1
        if cfg.track_bfe:
            trace.append(runtime.free_energy())
            if (
                cfg.early_stop_delta is not None
                and len(trace) >= 2
                and abs(trace[-2] - trace[-1]) < cfg.early_stop_delta
            ):
                break
    beliefs = {}
    for group in runtime.groups:
        for eid in group.edges:
            beliefs[eid] = runtime.beliefs[group.id]
    return Marginals(
        beliefs=beliefs,
        group_beliefs=dict(runtime.beliefs),
        bfe_trace=trace,
        status=dict(runtime.status),
        groups=runtime.groups,
        sweeps_run=sweeps_run,
    )


def predictive(graph: FactorGraph, marginals: Marginals, target_edge: str):
    """Belief on a latent read-out edge after inference has run.

    The target edge must be terminated by a unity factor, never
    observed; for noisy prediction graphs the stored belief already went
    through the uncertainty-propagating message chain.
    """
    group = next(g for g in marginals.groups if target_edge in g.edges)
    if group.is_observed:
        raise GraphError(f"edge {target_edge} carries an observation")
    return marginals.beliefs[target_edge]
