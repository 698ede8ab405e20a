"""Inference loop: conjugate exactness, traces, determinism, prediction."""

import math

import numpy as np
import pytest

from softgate.engine import InferenceConfig, Marginals, infer, predictive
from softgate.families import Flat, Gamma, Gaussian, MvGaussian, PointMass, natural_product
from softgate.graph import FactorGraph, GraphError, LineType, NodeKind
from softgate.models import (
    EnsembleData,
    ExpertPriors,
    build_depth0,
    build_noisy,
    build_pge,
    make_synthetic,
)


class TestConjugateExactness:
    def test_depth0_textbook_update(self):
        graph = build_depth0(np.array([[1.0, -1.0, 2.0]]), np.zeros(3),
                             [Gamma(1.0, 1.0)])
        marg = infer(graph, InferenceConfig(sweeps=1))
        gid = next(g.id for g in marg.groups if g.role == "precision")
        post = marg.group_beliefs[gid]
        assert post.alpha == 2.5
        assert post.beta == 4.0

    @pytest.mark.parametrize("seed", range(25))
    def test_depth0_random_instances(self, seed):
        rng = np.random.default_rng(3000 + seed)
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 7))
        predictions = rng.normal(size=(n, m))
        targets = rng.normal(size=m)
        priors = [Gamma(rng.uniform(0.5, 4.0), rng.uniform(0.5, 4.0)) for _ in range(n)]
        graph = build_depth0(predictions, targets, priors)
        marg = infer(graph, InferenceConfig(sweeps=2))
        for i in range(n):
            gid = next(g.id for g in marg.groups
                       if g.role == "precision" and any(f".i{i:04d}." in e for e in g.edges))
            post = marg.group_beliefs[gid]
            resid = float(np.sum((predictions[i] - targets) ** 2))
            assert post.alpha == pytest.approx(priors[i].alpha + 0.5 * m, abs=1e-10)
            assert post.beta == pytest.approx(priors[i].beta + 0.5 * resid, rel=1e-10)

    def test_prior_predictive_through_unity(self):
        g = FactorGraph()
        sd = g.add_factor(NodeKind.SOFTDOT)
        g.clamp(sd, "w", (1.0, 2.0))
        g.clamp(sd, "phi", (0.5, -0.5))
        g.clamp(sd, "tau", 4.0)
        z_edge = g.add_edge(LineType.DASH_DOT, edge_id="e.z.prior")
        g.connect(sd, "z", z_edge)
        g.terminate()
        marg = infer(g, InferenceConfig(sweeps=1))
        belief = marg.beliefs["e.z.prior"]
        assert belief.mean == pytest.approx(-0.5)
        assert belief.variance == pytest.approx(0.25)


class TestTraces:
    @pytest.mark.parametrize("seed", range(5))
    def test_pge_bfe_non_increasing(self, seed):
        data, _ = make_synthetic(seed=42 + seed, n_experts=2, n_obs=15, dim=4)
        graph = build_pge(data)
        marg = infer(graph, InferenceConfig(sweeps=5))
        trace = marg.bfe_trace
        assert len(trace) == 6
        for before, after in zip(trace, trace[1:]):
            assert after <= before + 1e-6

    def test_trace_length_includes_initialization(self):
        data, _ = make_synthetic(seed=1, n_experts=1, n_obs=4, dim=3)
        marg = infer(build_pge(data), InferenceConfig(sweeps=3))
        assert len(marg.bfe_trace) == 4
        assert marg.sweeps_run == 3

    def test_early_stop(self):
        graph = build_depth0(np.array([[1.0, -1.0]]), np.zeros(2))
        marg = infer(graph, InferenceConfig(sweeps=10, early_stop_delta=1e-12))
        assert marg.sweeps_run < 10


class TestDeterminism:
    def test_marginals_bit_identical(self):
        data, _ = make_synthetic(seed=9, n_experts=2, n_obs=8, dim=4)
        graph = build_pge(data)
        m1 = infer(graph, InferenceConfig(sweeps=4))
        m2 = infer(graph, InferenceConfig(sweeps=4))
        for gid, belief in m1.group_beliefs.items():
            other = m2.group_beliefs[gid]
            if isinstance(belief, Gaussian):
                assert belief.natural() == other.natural()
            elif isinstance(belief, Gamma):
                assert (belief.alpha, belief.beta) == (other.alpha, other.beta)
            elif isinstance(belief, MvGaussian):
                assert np.array_equal(belief.xi, other.xi)
                assert np.array_equal(belief.lam, other.lam)


class TestMarginalMessageProduct:
    def test_conjugate_edges_equal_message_products(self):
        """At the fixed point every conjugate edge belief equals the
        normalized product of the messages arriving at it."""
        from softgate.engine import _Runtime

        data, _ = make_synthetic(seed=21, n_experts=2, n_obs=4, dim=3)
        graph = build_pge(data)
        cfg = InferenceConfig(sweeps=80)
        runtime = _Runtime(graph, cfg)
        for _ in range(cfg.sweeps):
            runtime.sweep()
        checked = 0
        for group in runtime.groups:
            if group.is_observed or group.exp_links or group.role not in ("w", "tau", "beta"):
                continue
            product = runtime.conjugate_product(group)
            belief = runtime.beliefs[group.id]
            if isinstance(belief, Gamma):
                assert product.alpha == pytest.approx(belief.alpha, rel=1e-6)
                assert product.beta == pytest.approx(belief.beta, rel=1e-6)
                checked += 1
            elif isinstance(belief, MvGaussian) and not group.diagonal:
                np.testing.assert_allclose(product.lam, belief.lam, rtol=1e-6)
                np.testing.assert_allclose(product.xi, belief.xi, rtol=1e-6, atol=1e-9)
                checked += 1
        assert checked >= 4


class TestPrediction:
    def test_precision_weighted_combination(self):
        # two experts with clamped precisions 1 and 3, predictions 0 and 4
        graph = build_depth0(np.array([[0.0], [4.0]]), None,
                             [Gamma(1e8, 1e8), Gamma(3e8, 1e8)])
        marg = infer(graph, InferenceConfig(sweeps=2))
        ygroup = next(g for g in marg.groups if g.role == "y")
        belief = predictive(graph, marg, ygroup.edges[0])
        assert belief.mean == pytest.approx(3.0, rel=1e-6)
        assert belief.variance == pytest.approx(0.25, rel=1e-6)

    def test_single_expert_passthrough(self):
        graph = build_depth0(np.array([[2.0]]), None, [Gamma(1e8, 1e8)])
        marg = infer(graph, InferenceConfig(sweeps=2))
        ygroup = next(g for g in marg.groups if g.role == "y")
        belief = marg.group_beliefs[ygroup.id]
        assert belief.mean == pytest.approx(2.0, rel=1e-8)
        assert belief.variance == pytest.approx(1.0, rel=1e-6)

    def test_noisy_additive_variance_with_point_masses(self):
        data = EnsembleData(features=np.zeros((1, 2)),
                            predictions=np.array([[1.3]]), targets=None)
        priors = [ExpertPriors(
            w=MvGaussian(np.zeros(3), np.eye(3)),
            tau=Gamma(2.0, 1.0), beta=Gamma(2.0, 2.0), kappa=PointMass(4.0),
        )]
        graph = build_noisy(data, priors, prediction_mode=True)
        marg = infer(graph, InferenceConfig(sweeps=3, track_bfe=False))
        ygroup = next(g for g in marg.groups if g.role == "y")
        gamma = next(marg.group_beliefs[g.id] for g in marg.groups if g.role == "gamma")
        belief = marg.group_beliefs[ygroup.id]
        assert belief.variance == pytest.approx(0.25 + 1.0 / gamma.mean, abs=1e-10)

    def test_predictive_rejects_observed_edge(self):
        graph = build_depth0(np.array([[1.0]]), np.zeros(1))
        marg = infer(graph, InferenceConfig(sweeps=1))
        observed = next(g for g in marg.groups if g.role == "y")
        with pytest.raises(GraphError):
            predictive(graph, marg, observed.edges[0])
