"""Model builders: static ensemble, precision-gated experts, noisy experts,
split-branch routing, and stacked routing trees.

Builders assemble terminated factor graphs from the five-factor alphabet
and tag edges with roles (``w``, ``tau``, ``beta``, ``kappa``, ``y``,
``z``, ...) that the schedule uses to order updates.  Feature vectors
get a constant appended, so weight dimensions are ``raw features + 1``.

Also here: the synthetic heteroscedastic generator used by tests and
demos, ensemble metrics, and the CSV reading conventions of the command
line interface.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .engine import InferenceConfig, Marginals, infer
from .families import Gamma, Gaussian, MvGaussian, PointMass
from .graph import FactorGraph, GraphError, LineType, NodeKind

__all__ = [
    "Depth2ExpertSpec",
    "EnsembleData",
    "ExpertPriors",
    "TreeLeafSpec",
    "XOR_EXPERTS",
    "build_decision_tree",
    "decision_tree_inits",
    "build_depth0",
    "build_depth2",
    "build_noisy",
    "build_pge",
    "default_priors",
    "design_matrix",
    "fit_ensemble",
    "make_synthetic",
    "metrics",
    "predict_ensemble",
    "read_ensemble_csvs",
]


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleData:
    """Features (m x d raw), expert predictions (n x m), optional targets (m)."""

    features: np.ndarray
    predictions: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=float))
        preds = np.atleast_2d(np.asarray(self.predictions, dtype=float))
        targets = None if self.targets is None else np.asarray(self.targets, dtype=float).ravel()
        if preds.shape[1] != feats.shape[0]:
            raise ValueError(
                f"predictions are {preds.shape} but there are {feats.shape[0]} observations"
            )
        if targets is not None and targets.size != feats.shape[0]:
            raise ValueError(f"{targets.size} targets for {feats.shape[0]} observations")
        for name, arr in (("features", feats), ("predictions", preds), ("targets", targets)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contain non-finite entries")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "targets", targets)

    @property
    def n_experts(self) -> int:
        return self.predictions.shape[0]

    @property
    def n_obs(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ExpertPriors:
    """Per-expert priors; ``kappa`` only for the noisy variants."""

    w: MvGaussian
    tau: Gamma
    beta: Gamma
    kappa: object = None


@dataclass(frozen=True)
class Depth2ExpertSpec:
    """One split-branch routing expert: router weights, two sub-expert
    weight vectors, softdot precisions, and the expert's prediction."""

    v: np.ndarray
    w_left: np.ndarray
    w_right: np.ndarray
    tau_router: float
    tau_expert: float
    yhat: float

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        wl = np.asarray(self.w_left, dtype=float)
        wr = np.asarray(self.w_right, dtype=float)
        if not (v.shape == wl.shape == wr.shape):
            raise ValueError("routing and sub-expert weights must share one dimension")
        if not (self.tau_router > 0 and self.tau_expert > 0):
            raise ValueError("softdot precisions must be positive")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w_left", wl)
        object.__setattr__(self, "w_right", wr)


@dataclass(frozen=True)
class TreeLeafSpec:
    """A leaf of a stacked routing tree.

    ``path`` lists (split weights, side) pairs from the root down; side
    ``"+"`` means the leaf lives where the split score is positive.
    ``value`` is the leaf's prediction.
    """

    path: tuple
    value: float


def design_matrix(features: np.ndarray) -> np.ndarray:
    """Feature rows with a constant 1 appended."""
    feats = np.atleast_2d(np.asarray(features, dtype=float))
    return np.hstack([feats, np.ones((feats.shape[0], 1))])


def default_priors(n_experts: int, dim: int, noisy: bool = False) -> list[ExpertPriors]:
    """Default priors shared by all experts.

    The score-noise prior is tightly concentrated (mean 4, std 0.06):
    a loose precision lets the posterior score noise collapse onto the
    fitted scores within a few sweeps, freezing the weights far from
    convergence.  The rate prior on the per-score gamma factors is kept
    near zero so it does not throttle large precisions.
    """
    return [
        ExpertPriors(
            w=MvGaussian(np.zeros(dim), np.eye(dim)),
            tau=Gamma(4000.0, 1000.0),
            beta=Gamma(2.0, 50.0),
            kappa=Gamma(2.0, 0.5) if noisy else None,
        )
        for _ in range(n_experts)
    ]


# ---------------------------------------------------------------------------
# depth 0: static ensemble
# ---------------------------------------------------------------------------


def build_depth0(predictions, targets=None, gamma_priors=None) -> FactorGraph:
    """Static ensemble: one shared precision per expert.

    Every expert gets a gamma prior with clamped shape and rate, joined
    by an equality chain to the precision ports of its per-observation
    likelihoods; targets attach as observations (or stay latent for
    prediction).
    """
    predictions = np.atleast_2d(np.asarray(predictions, dtype=float))
    n, m = predictions.shape
    if n < 1 or m < 1:
        raise ValueError("the ensemble needs at least one expert and one observation")
    if gamma_priors is None:
        gamma_priors = [Gamma(1.0, 1.0)] * n
    if len(gamma_priors) != n:
        raise ValueError(f"{len(gamma_priors)} priors for {n} experts")
    if targets is not None:
        targets = np.asarray(targets, dtype=float).ravel()
        if targets.size != m:
            raise ValueError(f"{targets.size} targets for {m} observations")

    g = FactorGraph()
    eq_gamma, eq_y = [], []
    for i in range(n):
        prior = g.add_factor(NodeKind.GAMMA_FACTOR, node_id=f"n.prior.i{i:04d}")
        g.clamp(prior, "alpha", gamma_priors[i].alpha)
        g.clamp(prior, "beta", gamma_priors[i].beta)
        hub = g.add_factor(NodeKind.EQUALITY, n_ports=max(m + 1, 3),
                           node_id=f"n.eqgam.i{i:04d}")
        edge = g.add_edge(LineType.DASHED, role="precision",
                          edge_id=f"e.gam.i{i:04d}.a_prior")
        g.connect(prior, "gamma", edge)
        g.connect(hub, "p0", edge)
        eq_gamma.append(hub)
    for j in range(m):
        hub = g.add_factor(NodeKind.EQUALITY, n_ports=max(n + 1, 3),
                           node_id=f"n.eqy.j{j:04d}")
        if targets is not None:
            obs_edge = g.add_edge(LineType.SOLID, role="y", edge_id=f"e.y.j{j:04d}.a_obs")
            obs = g.add_factor(NodeKind.OBSERVATION, value=float(targets[j]))
            g.connect(hub, "p0", obs_edge)
            g.connect(obs, "x", obs_edge)
        eq_y.append(hub)
    for j in range(m):
        for i in range(n):
            lik = g.add_factor(NodeKind.NORMAL_FACTOR, node_id=f"n.lik.j{j:04d}.i{i:04d}")
            g.clamp(lik, "y", float(predictions[i, j]))
            y_edge = g.add_edge(LineType.SOLID, role="y", edge_id=f"e.y.j{j:04d}.b{i:04d}")
            g.connect(lik, "mu", y_edge)
            g.connect(eq_y[j], f"p{i + 1}" if targets is not None else f"p{i + 1}", y_edge)
            gam_edge = g.add_edge(LineType.DASHED, role="precision",
                                  edge_id=f"e.gam.i{i:04d}.b{j:04d}")
            g.connect(lik, "tau", gam_edge)
            g.connect(eq_gamma[i], f"p{j + 1}", gam_edge)
    return g.terminate()


# ---------------------------------------------------------------------------
# depth 1: precision-gated experts (and the noisy variant)
# ---------------------------------------------------------------------------


def _attach_parameter_chain(g, prefix, i, m, prior_factor_builder, role, dim=1):
    """Prior factor -> equality hub with one branch per observation."""
    hub = g.add_factor(NodeKind.EQUALITY, n_ports=max(m + 1, 3),
                       node_id=f"n.eq{prefix}.i{i:04d}")
    line = LineType.DASHED if role in ("tau", "beta", "kappa") else LineType.SOLID
    edge_kwargs = {}
    if role == "w":
        edge_kwargs = {"family": "mvgaussian", "dim": dim}
    edge = g.add_edge(line, role=role, edge_id=f"e.{prefix}.i{i:04d}.a_prior", **edge_kwargs)
    prior_factor_builder(edge)
    g.connect(hub, "p0", edge)
    return hub


def _pge_parameter_chains(g, data, priors, diagonal, noisy):
    phi = design_matrix(data.features)
    n, m = data.n_experts, data.n_obs
    d = phi.shape[1]
    hubs = {"w": [], "tau": [], "beta": [], "kappa": []}
    for i in range(n):
        pr = priors[i]
        if pr.w.dim != d:
            raise ValueError(f"w prior dimension {pr.w.dim} != feature dimension {d}")

        def w_prior(edge, pr=pr, i=i):
            node = g.add_factor(NodeKind.NORMAL_FACTOR, node_id=f"n.wprior.i{i:04d}")
            g.connect(node, "y", edge)
            g.clamp(node, "mu", pr.w.mean)
            g.clamp(node, "tau", pr.w.lam)

        hubs["w"].append(_attach_parameter_chain(g, "w", i, m, w_prior, "w", dim=d))

        def gamma_prior(edge, kind_prior=None, i=i, name="", params=None):
            node = g.add_factor(NodeKind.GAMMA_FACTOR, node_id=f"n.{name}prior.i{i:04d}")
            g.clamp(node, "alpha", params.alpha)
            g.clamp(node, "beta", params.beta)
            g.connect(node, "gamma", edge)

        for role in ("tau", "beta"):
            params = getattr(pr, role)
            if isinstance(params, PointMass):
                hubs[role].append(None)  # clamped at the consuming ports
            else:
                hubs[role].append(_attach_parameter_chain(
                    g, role, i, m,
                    lambda e, i=i, name=role, params=params: gamma_prior(
                        e, i=i, name=name, params=params), role))
        if noisy:
            if pr.kappa is None:
                raise ValueError("noisy experts need kappa priors")
            if isinstance(pr.kappa, PointMass):
                hubs["kappa"].append(None)
            else:
                hubs["kappa"].append(_attach_parameter_chain(
                    g, "kappa", i, m,
                    lambda e, i=i, pr=pr: gamma_prior(e, i=i, name="kappa", params=pr.kappa),
                    "kappa"))
    if diagonal:
        for i in range(n):
            g.edges[f"e.w.i{i:04d}.a_prior"].diagonal = True
    return phi, hubs


def _build_pge_like(data: EnsembleData, priors, diagonal: bool, noisy: bool,
                    prediction_mode: bool) -> FactorGraph:
    n, m = data.n_experts, data.n_obs
    if priors is None:
        priors = default_priors(n, design_matrix(data.features).shape[1], noisy=noisy)
    g = FactorGraph()
    phi, hubs = _pge_parameter_chains(g, data, priors, diagonal, noisy)

    eq_y = []
    observed = data.targets is not None and not prediction_mode
    for j in range(m):
        hub = g.add_factor(NodeKind.EQUALITY, n_ports=max(n + 1, 3),
                           node_id=f"n.eqy.j{j:04d}")
        if observed:
            obs_edge = g.add_edge(LineType.SOLID, role="y", edge_id=f"e.y.j{j:04d}.a_obs")
            obs = g.add_factor(NodeKind.OBSERVATION, value=float(data.targets[j]))
            g.connect(hub, "p0", obs_edge)
            g.connect(obs, "x", obs_edge)
        eq_y.append(hub)

    for j in range(m):
        for i in range(n):
            tag = f"j{j:04d}.i{i:04d}"
            sd = g.add_factor(NodeKind.SOFTDOT, node_id=f"n.sd.{tag}")
            w_edge = g.add_edge(LineType.SOLID, family="mvgaussian", role="w",
                                dim=phi.shape[1], edge_id=f"e.w.i{i:04d}.b{j:04d}")
            g.connect(sd, "w", w_edge)
            g.connect(hubs["w"][i], f"p{j + 1}", w_edge)
            g.clamp(sd, "phi", phi[j])
            if hubs["tau"][i] is None:
                g.clamp(sd, "tau", priors[i].tau.as_float())
            else:
                tau_edge = g.add_edge(LineType.DASHED, role="tau",
                                      edge_id=f"e.tau.i{i:04d}.b{j:04d}")
                g.connect(sd, "tau", tau_edge)
                g.connect(hubs["tau"][i], f"p{j + 1}", tau_edge)
            z_edge = g.add_edge(LineType.DASH_DOT, role="z", edge_id=f"e.z.{tag}")
            g.connect(sd, "z", z_edge)

            el = g.add_factor(NodeKind.EXP_LINK, node_id=f"n.el.{tag}")
            g.connect(el, "z", z_edge)
            eq_gam = g.add_factor(NodeKind.EQUALITY, n_ports=3, node_id=f"n.eqgam.{tag}")
            gam_el = g.add_edge(LineType.DASHED, role="gamma", edge_id=f"e.gm.{tag}.a_el")
            g.connect(el, "gamma", gam_el)
            g.connect(eq_gam, "p0", gam_el)

            gf = g.add_factor(NodeKind.GAMMA_FACTOR, node_id=f"n.gf.{tag}")
            g.clamp(gf, "alpha", 1.0)
            if hubs["beta"][i] is None:
                g.clamp(gf, "beta", priors[i].beta.as_float())
            else:
                beta_edge = g.add_edge(LineType.DASHED, role="beta",
                                       edge_id=f"e.beta.i{i:04d}.b{j:04d}")
                g.connect(gf, "beta", beta_edge)
                g.connect(hubs["beta"][i], f"p{j + 1}", beta_edge)
            gam_gf = g.add_edge(LineType.DASHED, role="gamma", edge_id=f"e.gm.{tag}.b_gf")
            g.connect(gf, "gamma", gam_gf)
            g.connect(eq_gam, "p1", gam_gf)

            lik = g.add_factor(NodeKind.NORMAL_FACTOR, node_id=f"n.lik.{tag}",
                               structured=noisy and prediction_mode)
            gam_lik = g.add_edge(LineType.DASHED, role="gamma", edge_id=f"e.gm.{tag}.c_lik")
            g.connect(lik, "tau", gam_lik)
            g.connect(eq_gam, "p2", gam_lik)

            if noisy:
                pred_edge = g.add_edge(LineType.SOLID, role="pred", edge_id=f"e.pred.{tag}")
                noise = g.add_factor(NodeKind.NORMAL_FACTOR, node_id=f"n.noise.{tag}")
                g.connect(noise, "y", pred_edge)
                g.clamp(noise, "mu", float(data.predictions[i, j]))
                if hubs["kappa"][i] is None:
                    g.clamp(noise, "tau", priors[i].kappa.value)
                else:
                    kap_edge = g.add_edge(LineType.DASHED, role="kappa",
                                          edge_id=f"e.kappa.i{i:04d}.b{j:04d}")
                    g.connect(noise, "tau", kap_edge)
                    g.connect(hubs["kappa"][i], f"p{j + 1}", kap_edge)
                g.connect(lik, "mu", pred_edge)
                y_edge = g.add_edge(LineType.SOLID, role="y", edge_id=f"e.y.j{j:04d}.b{i:04d}")
                g.connect(lik, "y", y_edge)
                g.connect(eq_y[j], f"p{i + 1}", y_edge)
            else:
                g.clamp(lik, "y", float(data.predictions[i, j]))
                y_edge = g.add_edge(LineType.SOLID, role="y", edge_id=f"e.y.j{j:04d}.b{i:04d}")
                g.connect(lik, "mu", y_edge)
                g.connect(eq_y[j], f"p{i + 1}", y_edge)
    return g.terminate()


def build_pge(data: EnsembleData, priors=None, diagonal: bool = False) -> FactorGraph:
    """Precision-gated experts: per-expert trust is an input-dependent
    precision produced by a softdot score through an exponential link."""
    return _build_pge_like(data, priors, diagonal, noisy=False, prediction_mode=False)


def build_noisy(data: EnsembleData, priors=None, diagonal: bool = False,
                prediction_mode: bool = False) -> FactorGraph:
    """Noisy experts: forecaster outputs are noisy views of a latent
    prediction, separating disagreement from irreducible noise.

    In prediction mode targets stay latent, the likelihoods declare the
    structured joint over (y, pred), and predictive variances pick up
    the additive ``1/kappa`` term.
    """
    return _build_pge_like(data, priors, diagonal, noisy=True,
                           prediction_mode=prediction_mode)


# ---------------------------------------------------------------------------
# depth 2: split-branch routing
# ---------------------------------------------------------------------------

XOR_EXPERTS = (
    Depth2ExpertSpec(
        v=(14.0, 0.0, -7.0), w_left=(0.0, 10.0, 0.0), w_right=(0.0, -10.0, 10.0),
        tau_router=2000.0, tau_expert=2000.0, yhat=0.0,
    ),
    Depth2ExpertSpec(
        v=(-14.0, 0.0, 7.0), w_left=(0.0, 10.0, 0.0), w_right=(0.0, -10.0, 10.0),
        tau_router=2000.0, tau_expert=2000.0, yhat=1.0,
    ),
)


def _switch_word(g, tag, h_hub, h_port, sign, weight, tau):
    """Clamped-weight switch: softdot on the routing score, through an
    exponential link, producing one gating activation edge."""
    sw = g.add_factor(NodeKind.SOFTDOT, node_id=f"n.sw{sign}.{tag}")
    g.clamp(sw, "w", weight)
    g.clamp(sw, "tau", tau)
    h_edge = g.add_edge(LineType.DASH_DOT, role="h", edge_id=f"e.h.{tag}.{sign}")
    g.connect(sw, "phi", h_edge)
    g.connect(h_hub, h_port, h_edge)
    zsw_edge = g.add_edge(LineType.DASH_DOT, role="z", edge_id=f"e.zsw.{tag}.{sign}")
    g.connect(sw, "z", zsw_edge)
    el = g.add_factor(NodeKind.EXP_LINK, node_id=f"n.elsw{sign}.{tag}")
    g.connect(el, "z", zsw_edge)
    kap_edge = g.add_edge(LineType.DASHED, role="gate", edge_id=f"e.kap.{tag}.{sign}")
    g.connect(el, "gamma", kap_edge)
    return kap_edge


def _router_split(g, tag, v, tau, phi_vec):
    """Router softdot plus two opposing switches.

    Returns the gating activation edges ``(kappa_pos, kappa_neg)`` for
    the positive and negative side of the split score.
    """
    rt = g.add_factor(NodeKind.SOFTDOT, node_id=f"n.rt.{tag}")
    g.clamp(rt, "w", v)
    g.clamp(rt, "phi", phi_vec)
    g.clamp(rt, "tau", tau)
    h_hub = g.add_factor(NodeKind.EQUALITY, n_ports=3, node_id=f"n.eqh.{tag}")
    h_edge = g.add_edge(LineType.DASH_DOT, role="h", edge_id=f"e.h.{tag}.a_rt")
    g.connect(rt, "z", h_edge)
    g.connect(h_hub, "p0", h_edge)
    kap_pos = _switch_word(g, tag, h_hub, "p1", "L", 1.0, tau)
    kap_neg = _switch_word(g, tag, h_hub, "p2", "R", -1.0, tau)
    return kap_pos, kap_neg


def _gate(g, tag, side, kap_edge, mu_edge):
    """Gating normal: passes its score input tightly when the activation
    is large, diffusely when suppressed.  Returns the output edge."""
    gate = g.add_factor(NodeKind.NORMAL_FACTOR, node_id=f"n.gate{side}.{tag}")
    g.connect(gate, "tau", kap_edge)
    g.connect(gate, "mu", mu_edge)
    m_edge = g.add_edge(LineType.DASH_DOT, role="m", edge_id=f"e.m.{tag}.{side}")
    g.connect(gate, "y", m_edge)
    return m_edge


def _router_level(g, tag, v, tau, phi_vec, mu_edges):
    """One stacked split whose two gate outputs join on a shared blended
    score edge (the equality realizes the activation-weighted blend)."""
    kap_pos, kap_neg = _router_split(g, tag, v, tau, phi_vec)
    m_hub = g.add_factor(NodeKind.EQUALITY, n_ports=3, node_id=f"n.eqm.{tag}")
    m_left = _gate(g, tag, "L", kap_pos, mu_edges[0])
    m_right = _gate(g, tag, "R", kap_neg, mu_edges[1])
    g.connect(m_hub, "p0", m_left)
    g.connect(m_hub, "p1", m_right)
    out_edge = g.add_edge(LineType.DASH_DOT, role="m", edge_id=f"e.m.{tag}.z_out")
    g.connect(m_hub, "p2", out_edge)
    return out_edge


def _score_edge(g, tag, weights, tau, phi_vec):
    """Sub-expert softdot emitting a score edge from clamped weights."""
    se = g.add_factor(NodeKind.SOFTDOT, node_id=f"n.se.{tag}")
    g.clamp(se, "w", weights)
    g.clamp(se, "phi", phi_vec)
    g.clamp(se, "tau", tau)
    edge = g.add_edge(LineType.DASH_DOT, role="zb", edge_id=f"e.zb.{tag}")
    g.connect(se, "z", edge)
    return edge


def _attach_likelihood(g, tag, score_edge, yhat, eq_y, eq_port):
    el = g.add_factor(NodeKind.EXP_LINK, node_id=f"n.elm.{tag}")
    g.connect(el, "z", score_edge)
    gam_edge = g.add_edge(LineType.DASHED, role="gamma", edge_id=f"e.gmb.{tag}")
    g.connect(el, "gamma", gam_edge)
    lik = g.add_factor(NodeKind.NORMAL_FACTOR, node_id=f"n.lik.{tag}")
    g.connect(lik, "tau", gam_edge)
    g.clamp(lik, "y", yhat)
    y_edge = g.add_edge(LineType.SOLID, role="y", edge_id=f"e.y.{tag}")
    g.connect(lik, "mu", y_edge)
    g.connect(eq_y, eq_port, y_edge)


def build_depth2(experts, inputs, targets=None) -> FactorGraph:
    """Split-branch routing for a batch of inputs.

    Per expert and input: a router softdot produces a routing score; two
    switch words with clamped weights +1 and -1 convert it into opposing
    gating activations; each branch's sub-expert score passes through a
    gating normal, an exponential link and a likelihood; both branches
    share the observation variable through an equality node.
    """
    experts = list(experts)
    if not experts:
        raise ValueError("at least one routing expert is required")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    phi_rows = design_matrix(inputs)
    g = FactorGraph()
    for j, phi_vec in enumerate(phi_rows):
        eq_y = g.add_factor(NodeKind.EQUALITY, n_ports=max(2 * len(experts) + 1, 3),
                            node_id=f"n.eqy.j{j:04d}")
        if targets is not None:
            obs_edge = g.add_edge(LineType.SOLID, role="y", edge_id=f"e.y.j{j:04d}.a_obs")
            obs = g.add_factor(NodeKind.OBSERVATION, value=float(np.asarray(targets).ravel()[j]))
            g.connect(eq_y, "p0", obs_edge)
            g.connect(obs, "x", obs_edge)
        port = 1
        for i, spec in enumerate(experts):
            tag = f"j{j:04d}.i{i:04d}"
            if spec.v.size != phi_vec.size:
                raise ValueError(
                    f"expert {i} weights have dimension {spec.v.size}, "
                    f"features have {phi_vec.size}"
                )
            kap_pos, kap_neg = _router_split(g, tag, spec.v, spec.tau_router, phi_vec)
            # the +1 switch gates the left sub-expert, the -1 switch the right
            left = _score_edge(g, f"{tag}.L", spec.w_left, spec.tau_expert, phi_vec)
            right = _score_edge(g, f"{tag}.R", spec.w_right, spec.tau_expert, phi_vec)
            for side, kap_edge, mu_edge in (("L", kap_pos, left), ("R", kap_neg, right)):
                m_edge = _gate(g, tag, side, kap_edge, mu_edge)
                _attach_likelihood(g, f"{tag}.{side}", m_edge, spec.yhat, eq_y, f"p{port}")
                port += 1
    return g.terminate()


def decision_tree_inits(leaves, inputs, tau: float = 2000.0,
                        score_on: float = 10.0, score_off: float = -10.0) -> dict:
    """Forward-pass initial beliefs for :func:`build_decision_tree`.

    Nested gating creates latent chains whose links get pinned together
    once activations sharpen; a sweep started from neutral beliefs can
    freeze the transient into the final answer.  Seeding every routing
    word at its sharp-limit value (the activation-weighted blend of its
    inputs) starts the sweeps inside the correct basin, where they then
    refine the uncertainties.
    """
    leaves = list(leaves)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    phi_rows = design_matrix(inputs)
    init: dict = {}
    prec_shape = 2000.0
    for j, phi_vec in enumerate(phi_rows):
        for leaf_idx, leaf in enumerate(leaves):
            tag0 = f"j{j:04d}.l{leaf_idx:04d}"
            init[f"e.zb.{tag0}.on"] = Gaussian.from_moments(score_on, 1.0 / tau)
            cur = score_on
            for depth in range(len(leaf.path) - 1, -1, -1):
                v, side = leaf.path[depth]
                h = float(np.asarray(v, dtype=float) @ phi_vec)
                tag = f"{tag0}.d{depth:02d}"
                init[f"e.zb.{tag}.off"] = Gaussian.from_moments(score_off, 1.0 / tau)
                init[f"e.h.{tag}.a_rt"] = Gaussian.from_moments(h, 1.0 / (3.0 * tau))
                hc = min(max(h, -600.0), 600.0)
                init[f"e.zsw.{tag}.L"] = Gaussian.from_moments(hc, 1.0 / tau)
                init[f"e.zsw.{tag}.R"] = Gaussian.from_moments(-hc, 1.0 / tau)
                init[f"e.kap.{tag}.L"] = Gamma(prec_shape, prec_shape * math.exp(-hc))
                init[f"e.kap.{tag}.R"] = Gamma(prec_shape, prec_shape * math.exp(hc))
                oriented = h if side == "+" else -h
                cur = cur if oriented > 0.0 else score_off
                init[f"e.m.{tag}.z_out"] = Gaussian.from_moments(cur, 1.0 / tau)
            init[f"e.gmb.{tag0}"] = Gamma(prec_shape, prec_shape * math.exp(-cur))
    return init


def build_decision_tree(leaves, inputs, tau: float = 2000.0,
                        score_on: float = 10.0, score_off: float = -10.0) -> FactorGraph:
    """Stacked split-branch routing encoding a decision tree.

    Each leaf contributes a chain of router levels following its path;
    at every level the on-path gate passes the deeper blended score and
    the off-path gate passes a constant suppressor score, so the leaf's
    final log-precision is large exactly on its cell.
    """
    leaves = list(leaves)
    if not leaves:
        raise ValueError("a tree needs at least one leaf")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    phi_rows = design_matrix(inputs)
    g = FactorGraph()
    for j, phi_vec in enumerate(phi_rows):
        eq_y = g.add_factor(NodeKind.EQUALITY, n_ports=max(len(leaves) + 1, 3),
                            node_id=f"n.eqy.j{j:04d}")
        for leaf_idx, leaf in enumerate(leaves):
            tag0 = f"j{j:04d}.l{leaf_idx:04d}"
            # deepest level first: its on-path input is the leaf's score
            current = _score_edge(g, f"{tag0}.on", (0.0,) * (phi_vec.size - 1) + (score_on,),
                                  tau, phi_vec)
            for depth in range(len(leaf.path) - 1, -1, -1):
                v, side = leaf.path[depth]
                v = np.asarray(v, dtype=float)
                if v.size != phi_vec.size:
                    raise ValueError("split weights must match the feature dimension")
                tag = f"{tag0}.d{depth:02d}"
                off = _score_edge(g, f"{tag}.off",
                                  (0.0,) * (phi_vec.size - 1) + (score_off,), tau, phi_vec)
                if side == "+":
                    mu_edges = (current, off)
                elif side == "-":
                    mu_edges = (off, current)
                else:
                    raise ValueError(f"unknown path side {side!r}")
                current = _router_level(g, tag, v, tau, phi_vec, mu_edges)
            _attach_likelihood(g, tag0, current, leaf.value, eq_y, f"p{leaf_idx + 1}")
    return g.terminate()


# ---------------------------------------------------------------------------
# metrics, synthetic data, fitting helpers
# ---------------------------------------------------------------------------


def metrics(predictive, targets) -> dict:
    """Mean squared error and Gaussian negative log-likelihood."""
    targets = np.asarray(targets, dtype=float).ravel()
    if len(predictive) != targets.size:
        raise ValueError(f"{len(predictive)} predictions for {targets.size} targets")
    means = np.array([p.mean for p in predictive])
    variances = np.array([p.variance for p in predictive])
    if np.any(variances <= 0):
        raise ValueError("predictive variances must be positive")
    sq = (means - targets) ** 2
    nll = 0.5 * np.log(2.0 * math.pi * variances) + sq / (2.0 * variances)
    return {"mse": float(np.mean(sq)), "nll": float(np.mean(nll))}


def make_synthetic(seed: int, n_experts: int = 3, n_obs: int = 200, dim: int = 5,
                   heteroscedastic: bool = True, weight_scale: float = 2.0,
                   w_true: np.ndarray | None = None):
    """Heteroscedastic ensemble data with log-linear expert reliability.

    Targets are standard normal; expert ``i`` reports the target plus
    noise of precision ``exp(w_i . phi(x))``.  Each expert's reliability
    varies along its own feature axis (sign randomized), so experts are
    trustworthy in different regions.  The homoscedastic variant zeroes
    the feature weights so every expert has one constant precision.

    Pass ``w_true`` to reuse the weights of an earlier draw (held-out
    data from the same regime).  Returns ``(EnsembleData, info)`` with
    the weights and the precision table in ``info``.
    """
    rng = np.random.default_rng(seed)
    d_raw = dim - 1
    if d_raw < 1:
        raise ValueError("dim counts the appended constant and must be >= 2")
    features = rng.normal(size=(n_obs, d_raw))
    phi = design_matrix(features)
    if w_true is None:
        w_true = np.zeros((n_experts, dim))
        if heteroscedastic:
            for i in range(n_experts):
                w_true[i, i % d_raw] = weight_scale * (1.0 if rng.random() < 0.5 else -1.0)
                w_true[i, -1] = rng.uniform(-0.5, 0.5)
        else:
            w_true[:, -1] = rng.uniform(-0.5, 0.5, size=n_experts)
    else:
        w_true = np.asarray(w_true, dtype=float)
    log_gamma = np.clip(w_true @ phi.T, -3.0, 3.0)
    gamma = np.exp(log_gamma)
    targets = rng.normal(size=n_obs)
    noise = rng.normal(size=(n_experts, n_obs)) / np.sqrt(gamma)
    predictions = targets[None, :] + noise
    data = EnsembleData(features=features, predictions=predictions, targets=targets)
    return data, {"w_true": w_true, "gamma": gamma}


def _posterior_params(marginals: Marginals, n_experts: int, roles=("w", "tau", "beta", "kappa")):
    """Collect per-expert parameter beliefs from a fitted graph."""
    out = {role: [None] * n_experts for role in roles}
    for group in marginals.groups:
        if group.role in roles and not group.is_observed:
            i = int(group.id.split(".i")[1][:4])
            out[group.role][i] = marginals.group_beliefs[group.id]
    return out


def fit_ensemble(model: str, data: EnsembleData, priors=None,
                 cfg: InferenceConfig | None = None):
    """Train one of the ensemble configurations on observed targets.

    ``model`` is one of ``static``, ``pge``, ``pge-diag``, ``noisy``,
    ``noisy-diag``.  Returns ``(posteriors, marginals)`` where
    ``posteriors`` maps parameter names to per-expert beliefs.
    """
    if data.targets is None:
        raise ValueError("training requires targets")
    cfg = cfg or InferenceConfig()
    n = data.n_experts
    if model == "static":
        graph = build_depth0(data.predictions, data.targets,
                             gamma_priors=None if priors is None else [p.tau for p in priors])
        marginals = infer(graph, cfg)
        post = _posterior_params(marginals, n, roles=("precision",))
        return {"gamma": post["precision"]}, marginals
    diagonal = model.endswith("-diag")
    base = model.removesuffix("-diag")
    noisy = base == "noisy"
    if priors is None:
        priors = default_priors(n, design_matrix(data.features).shape[1], noisy=noisy)
    if base == "pge":
        graph = build_pge(data, priors, diagonal=diagonal)
    elif noisy:
        graph = build_noisy(data, priors, diagonal=diagonal)
    else:
        raise ValueError(f"unknown model {model!r}")
    marginals = infer(graph, cfg)
    posteriors = _posterior_params(marginals, n)
    # clamped parameters have no posterior group; carry the clamp through
    for role in ("tau", "beta", "kappa"):
        for i in range(n):
            if posteriors[role][i] is None:
                posteriors[role][i] = getattr(priors[i], role)
    return posteriors, marginals


def predict_ensemble(model: str, posteriors: dict, data: EnsembleData,
                     cfg: InferenceConfig | None = None):
    """Predictive beliefs for held-out observations.

    Parameter posteriors from :func:`fit_ensemble` enter the prediction
    graph as priors; targets stay latent.
    """
    cfg = cfg or InferenceConfig(sweeps=3)
    n, m = data.n_experts, data.n_obs
    test = EnsembleData(features=data.features, predictions=data.predictions, targets=None)
    if model == "static":
        gammas = posteriors["gamma"]
        graph = build_depth0(test.predictions, targets=None, gamma_priors=gammas)
    else:
        priors = [
            ExpertPriors(
                w=posteriors["w"][i],
                tau=posteriors["tau"][i],
                beta=posteriors["beta"][i],
                kappa=(posteriors.get("kappa") or [None] * n)[i],
            )
            for i in range(n)
        ]
        diagonal = model.endswith("-diag")
        base = model.removesuffix("-diag")
        if base == "pge":
            graph = build_pge(test, priors, diagonal=diagonal)
        elif base == "noisy":
            graph = build_noisy(test, priors, diagonal=diagonal, prediction_mode=True)
        else:
            raise ValueError(f"unknown model {model!r}")
    marginals = infer(graph, cfg)
    predictive = []
    for j in range(m):
        gid = next(g.id for g in marginals.groups
                   if g.role == "y" and any(f".j{j:04d}." in e for e in g.edges))
        predictive.append(marginals.group_beliefs[gid])
    return predictive, marginals


# ---------------------------------------------------------------------------
# CSV conventions
# ---------------------------------------------------------------------------


def _read_csv_matrix(path) -> np.ndarray:
    """Comma-separated numeric matrix with a required header row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    try:
        [float(x) for x in header]
    except ValueError:
        pass
    else:
        raise ValueError(f"{path}: missing header row")
    body = rows[1:]
    if not body:
        return np.empty((0, len(header)))
    return np.array([[float(x) for x in row] for row in body])


def read_ensemble_csvs(features_path, predictions_path, targets_path=None) -> EnsembleData:
    """Load the three-file CSV layout: features (m x d), predictions
    (n x m), targets (m x 1, optional and possibly empty)."""
    features = _read_csv_matrix(features_path)
    predictions = _read_csv_matrix(predictions_path)
    targets = None
    if targets_path is not None:
        matrix = _read_csv_matrix(targets_path)
        targets = matrix.ravel() if matrix.size else None
    return EnsembleData(features=features, predictions=predictions, targets=targets)
