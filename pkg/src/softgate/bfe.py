"""Bethe free energy: local edge objectives and whole-graph evaluation.

The two local objectives below are the variational targets of the
fixed-point solver on edges adjacent to an exponential link: the belief
entropy plus the expected negative log of the two incoming messages.
Their gradients in natural coordinates are analytic; every term reduces
to exponential-family sufficient statistics and the closed-form
moment-generating function.

Whole-graph evaluation (:func:`bethe_free_energy`) sums node-local free
energies and edge entropies.  Deterministic exponential links contribute
the negative entropy of the score-side belief, and the factors on their
precision side are absorbed through the change of variables
``gamma = exp(z)`` whose Jacobian contributes a linear term in ``z``;
this makes the graph total consistent with the per-edge objectives the
solver descends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from .families import tetragamma, trigamma

from .families import (
    Flat,
    Gamma,
    Gaussian,
    LogGamma,
    LogNormal,
    MvGaussian,
    PointMass,
    entropy,
)

__all__ = [
    "BfeBreakdown",
    "bethe_free_energy",
    "gamma_edge_objective",
    "gaussian_edge_objective",
    "local_z_objective",
]

LOG_2PI = math.log(2.0 * math.pi)
MAX_EXP = 700.0


def _conj_gaussian_terms(conj) -> tuple[float, float, float]:
    """Natural parameters and log-normalizer of the conjugate message."""
    if isinstance(conj, Flat) or conj is None:
        return 0.0, 0.0, 0.0
    if isinstance(conj, Gaussian):
        return conj.eta1, conj.eta2, conj.log_partition()
    raise TypeError(f"conjugate score message must be Gaussian or Flat, got {type(conj).__name__}")


def gaussian_edge_objective(eta1: float, eta2: float, conj, lg: LogGamma):
    """Local free energy of a Gaussian-constrained score edge, with gradient.

    Objective: ``-H[q] - E_q[log conj] - E_q[log lg]`` for
    ``q = N(eta1, eta2)`` in natural coordinates.  Returns
    ``(value, grad1, grad2)``; the value is ``+inf`` outside the feasible
    region (including exponents beyond the floating-point range, which the
    caller treats as an infeasible trial point).
    """
    if eta2 >= 0.0 or not (math.isfinite(eta1) and math.isfinite(eta2)):
        return math.inf, 0.0, 0.0
    v = -0.5 / eta2
    m = eta1 * v
    c1, c2, c_norm = _conj_gaussian_terms(conj)
    b = lg.b
    rate = lg.rate

    expo = m + 0.5 * v
    if rate > 0.0 and expo > MAX_EXP:
        return math.inf, 0.0, 0.0
    mgf = math.exp(expo) if rate > 0.0 else 0.0

    neg_entropy = -0.5 * (LOG_2PI + 1.0 + math.log(v))
    e_neg_log_conj = -(c1 * m + c2 * (m * m + v)) + c_norm
    if lg.is_flat:
        e_neg_log_lg = 0.0
    else:
        e_neg_log_lg = -b * m + rate * mgf + b * math.log(lg.a) + math.lgamma(b)
    value = neg_entropy + e_neg_log_conj + e_neg_log_lg

    # gradient: F(eta)(eta - c) - b * d(E z)/d(eta) + rate * d(MGF)/d(eta)
    de1 = eta1 - c1
    de2 = eta2 - c2
    f00 = v
    f01 = 2.0 * m * v
    f11 = 4.0 * m * m * v + 2.0 * v * v
    g1 = f00 * de1 + f01 * de2 - b * v + rate * mgf * v
    g2 = f01 * de1 + f11 * de2 - b * f01 + rate * mgf * (f01 + v * v)
    return value, g1, g2


def local_z_objective(eta, msg_conjugate, msg_nonconj: LogGamma):
    """Spec-facing wrapper: value and gradient array of the score-edge objective."""
    value, g1, g2 = gaussian_edge_objective(eta[0], eta[1], msg_conjugate, msg_nonconj)
    return value, np.array([g1, g2])


def _conj_gamma_terms(conj) -> tuple[float, float, float]:
    if isinstance(conj, Flat) or conj is None:
        return 1.0, 0.0, 0.0
    if isinstance(conj, Gamma):
        return conj.alpha, conj.beta, conj.log_partition()
    raise TypeError(f"conjugate precision message must be Gamma or Flat, got {type(conj).__name__}")


def gamma_edge_objective(alpha: float, beta: float, conj, ln: LogNormal):
    """Local free energy of a Gamma-constrained precision edge, with gradient.

    Objective: ``-H[q] - E_q[log conj] - E_q[log ln]`` for
    ``q = Gamma(alpha, beta)``.  The gradient is taken in the natural
    coordinates ``(alpha - 1, -beta)``.
    """
    if not (alpha > 0.0 and beta > 0.0 and math.isfinite(alpha) and math.isfinite(beta)):
        return math.inf, 0.0, 0.0
    a_msg, b_msg, conj_norm = _conj_gamma_terms(conj)
    psi = float(digamma(alpha))
    psi1 = trigamma(alpha)
    gbar = psi - math.log(beta)
    gamma_bar = alpha / beta

    neg_entropy = -(alpha - math.log(beta) + math.lgamma(alpha) + (1.0 - alpha) * psi)
    e_neg_log_conj = -(a_msg - 1.0) * gbar + b_msg * gamma_bar + conj_norm
    if ln is None or (isinstance(ln, LogNormal) and ln.is_flat):
        e_neg_log_ln = 0.0
        m, s2 = 0.0, math.inf
    else:
        m, s2 = ln.m, ln.s2
        g2bar = psi1 + gbar * gbar
        e_neg_log_ln = (
            (g2bar - 2.0 * m * gbar + m * m) / (2.0 * s2)
            + gbar
            + 0.5 * math.log(2.0 * math.pi * s2)
        )
    value = neg_entropy + e_neg_log_conj + e_neg_log_ln

    psi2 = tetragamma(alpha)
    # d(-H) = Fisher @ eta in natural coordinates
    g1 = (alpha - 1.0) * psi1 - 1.0
    g2 = -1.0 / beta
    # conjugate message energy
    g1 += -(a_msg - 1.0) * psi1 + b_msg / beta
    g2 += -(a_msg - 1.0) / beta + b_msg * alpha / (beta * beta)
    # log-normal energy
    if math.isfinite(s2):
        c0 = 1.0 - m / s2
        g1 += (psi2 + 2.0 * gbar * psi1) / (2.0 * s2) + c0 * psi1
        g2 += gbar / (s2 * beta) + c0 / beta
    return value, g1, g2


# ---------------------------------------------------------------------------
# whole-graph evaluation
# ---------------------------------------------------------------------------


@dataclass
class BfeBreakdown:
    """Bethe free energy split into node terms and edge entropies."""

    node_terms: dict
    edge_entropies: dict
    total: float


def _scalar_mv(belief):
    """(mean, variance) of a scalar Gaussian-typed belief."""
    if isinstance(belief, PointMass):
        return belief.as_float(), 0.0
    if isinstance(belief, Gaussian):
        return belief.moments
    if isinstance(belief, MvGaussian) and belief.xi.size == 1:
        return float(belief.mean[0]), float(belief.cov[0, 0])
    raise TypeError(f"expected scalar Gaussian-typed belief, got {type(belief).__name__}")


def _vector_mv(belief):
    if isinstance(belief, PointMass):
        m = belief.as_vector()
        return m, np.zeros((m.size, m.size))
    if isinstance(belief, MvGaussian):
        return belief.mean, belief.cov
    if isinstance(belief, Gaussian):
        m, v = belief.moments
        return np.array([m]), np.array([[v]])
    raise TypeError(type(belief))


def _precision_moments(belief):
    """(E[tau], E[log tau]) of a Gamma-typed belief."""
    if isinstance(belief, PointMass):
        val = belief.as_float()
        return val, (math.log(val) if val > 0 else -math.inf)
    if isinstance(belief, Gamma):
        return belief.mean, belief.mean_log
    raise TypeError(f"expected Gamma-typed belief, got {type(belief).__name__}")


def _capped_mgf(belief) -> float:
    """E[exp(z)] capped at the float range (sharp-routing regime)."""
    if isinstance(belief, PointMass):
        return math.exp(min(belief.as_float(), MAX_EXP))
    m, v = belief.moments
    return math.exp(min(m + 0.5 * v, MAX_EXP))


def _pushforward_moments(z_belief):
    """Precision moments of exp(z) under the score-side belief."""
    if isinstance(z_belief, PointMass):
        val = z_belief.as_float()
        return math.exp(min(val, MAX_EXP)), val
    return _capped_mgf(z_belief), z_belief.mean


def _residual_second_moment(q_z, q_w, q_phi) -> float:
    """Full E[(z - w'phi)^2] under mean-field beliefs."""
    mz, vz = _scalar_mv(q_z)
    mw, cw = _vector_mv(q_w)
    mp, cp = _vector_mv(q_phi)
    second_phi = np.outer(mp, mp) + cp
    return (
        (mz - float(mw @ mp)) ** 2
        + vz
        + float(np.trace(cw @ second_phi))
        + float(mw @ cp @ mw)
    )


def bethe_free_energy(graph, group_beliefs: dict) -> "BfeBreakdown":
    """Evaluate the Bethe free energy of a terminated graph.

    ``group_beliefs`` maps variable-group ids to beliefs.  Conventions:

    - observed and clamped variables are constants: zero entropy,
      energies evaluated at their values;
    - unity factors contribute zero node terms and their half-edges
      contribute no entropy, so the total on a conjugate subgraph with
      exact marginals equals the exact negative log evidence;
    - precision-side groups of exponential links do not appear in the
      entropy bookkeeping; the factors attached to them are evaluated
      through the change of variables ``gamma = exp(z)``, and each
      exponential link contributes ``-H[q(z)] - E[z]`` (the negative
      entropy of the constrained score belief plus the Jacobian term).
    """
    from .graph import NodeKind  # local import to avoid a cycle

    groups = graph.variable_groups()
    group_of_edge = {}
    by_id = {}
    for g in groups:
        by_id[g.id] = g
        for eid in g.edges:
            group_of_edge[eid] = g

    # precision-side groups of exp links are excluded from entropy terms
    excluded = set()
    z_belief_for_group = {}
    for g in groups:
        if g.exp_links and g.family == "gamma":
            excluded.add(g.id)
            exp_id, _ = g.exp_links[0]
            z_edge = next(
                eid for port, eid in graph.node_edges(exp_id)
                if group_of_edge[eid].family != "gamma"
            )
            z_belief_for_group[g.id] = group_of_edge[z_edge].id

    def gbelief(gid):
        g = by_id[gid]
        if g.is_observed:
            return PointMass(g.observed)
        return group_beliefs[gid]

    def port_precision_moments(gid):
        if gid in excluded:
            return _pushforward_moments(gbelief(z_belief_for_group[gid]))
        return _precision_moments(gbelief(gid))

    def port_entropy(gid):
        g = by_id[gid]
        if g.is_observed or gid in excluded:
            return 0.0
        belief = group_beliefs[gid]
        if isinstance(belief, Flat):
            # read-out variables that have not formed yet contribute
            # nothing; they only occur in prediction graphs
            return 0.0
        return entropy(belief)

    def any_flat(*gids):
        return any(
            not by_id[g].is_observed
            and g not in excluded
            and isinstance(group_beliefs[g], Flat)
            for g in gids
        )

    node_terms = {}
    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        ports = {port: group_of_edge[eid].id for port, eid in graph.node_edges(node_id)}
        if node.kind in (NodeKind.CLAMP, NodeKind.OBSERVATION, NodeKind.UNITY):
            node_terms[node_id] = 0.0
            continue
        if node.kind == NodeKind.EQUALITY:
            gid = next(iter(ports.values()))
            node_terms[node_id] = -port_entropy(gid)
            continue
        if node.kind == NodeKind.EXP_LINK:
            z_gid = next(
                gid for port, gid in ports.items()
                if by_id[gid].family != "gamma"
            )
            if any_flat(z_gid):
                node_terms[node_id] = 0.0
                continue
            mz, _ = _scalar_mv(gbelief(z_gid))
            node_terms[node_id] = -port_entropy(z_gid) - mz
            continue
        # stochastic conjugate factors; factors touching an unformed
        # read-out belief contribute nothing yet
        if any_flat(*ports.values()):
            node_terms[node_id] = 0.0
            continue
        ent = -sum(port_entropy(gid) for gid in ports.values())
        if node.kind == NodeKind.SOFTDOT:
            e_tau, e_log_tau = port_precision_moments(ports["tau"])
            spread = _residual_second_moment(
                gbelief(ports["z"]), gbelief(ports["w"]), gbelief(ports["phi"])
            )
            if math.isinf(e_tau):
                energy = 0.0
            else:
                energy = 0.5 * e_log_tau - 0.5 * LOG_2PI - 0.5 * e_tau * spread
        elif node.kind == NodeKind.NORMAL_FACTOR:
            q_y = gbelief(ports["y"])
            q_mu = gbelief(ports["mu"])
            vector = (
                (isinstance(q_y, MvGaussian) and q_y.dim > 1)
                or (isinstance(q_mu, MvGaussian) and q_mu.dim > 1)
                or (isinstance(q_y, PointMass) and np.asarray(q_y.value).size > 1)
                or (isinstance(q_mu, PointMass) and np.asarray(q_mu.value).size > 1)
            )
            if vector:
                # vector normal with clamped (scalar or matrix) precision
                tau_val = by_id[ports["tau"]].observed
                prec = np.asarray(tau_val, dtype=float)
                my, cy = _vector_mv(q_y)
                mm, cm = _vector_mv(q_mu)
                if prec.ndim == 0:
                    prec = float(prec) * np.eye(my.size)
                diff = my - mm
                spread = np.outer(diff, diff) + cy + cm
                sign, logdet = np.linalg.slogdet(prec)
                energy = (
                    0.5 * logdet
                    - 0.5 * my.size * LOG_2PI
                    - 0.5 * float(np.trace(prec @ spread))
                )
            else:
                e_tau, e_log_tau = port_precision_moments(ports["tau"])
                my, vy = _scalar_mv(q_y)
                mm, vm = _scalar_mv(q_mu)
                spread = (my - mm) ** 2 + vy + vm
                if math.isinf(e_tau):
                    energy = 0.0
                else:
                    energy = 0.5 * e_log_tau - 0.5 * LOG_2PI - 0.5 * e_tau * spread
        elif node.kind == NodeKind.GAMMA_FACTOR:
            alpha = PointMass(by_id[ports["alpha"]].observed).as_float()
            e_beta, e_log_beta = port_precision_moments(ports["beta"])
            e_gamma, e_log_gamma = port_precision_moments(ports["gamma"])
            energy = (
                alpha * e_log_beta
                - float(gammaln(alpha))
                + (alpha - 1.0) * e_log_gamma
                - e_beta * e_gamma
            )
        else:
            raise TypeError(f"unknown node kind {node.kind}")
        node_terms[node_id] = ent - energy

    edge_entropies = {}
    for eid in sorted(graph.edges):
        edge = graph.edges[eid]
        kinds = {graph.nodes[n].kind for n, _ in edge.endpoints}
        if kinds & {NodeKind.CLAMP, NodeKind.OBSERVATION, NodeKind.UNITY}:
            edge_entropies[eid] = 0.0
        else:
            edge_entropies[eid] = port_entropy(group_of_edge[eid].id)

    total = sum(node_terms[k] for k in sorted(node_terms)) + sum(
        edge_entropies[k] for k in sorted(edge_entropies)
    )
    return BfeBreakdown(node_terms=node_terms, edge_entropies=edge_entropies, total=total)
