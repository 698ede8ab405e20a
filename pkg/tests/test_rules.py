"""Message catalog against tensor-product quadrature of the expected log-factor.

Every variational rule is checked by evaluating E_q[log f] numerically
over the non-target ports (Gauss-Hermite for Gaussian ports,
Gauss-Laguerre for Gamma ports), reconstructing the message parameters
from probe evaluations of the resulting exponent, and comparing with
the analytic rule.  The belief-propagation rules through the exponential
link are checked against mollified-delta quadrature of the pushforward.
"""

import math

import numpy as np
import pytest

from softgate.families import (
    DomainError,
    FamilyError,
    Flat,
    Gamma,
    Gaussian,
    LogGamma,
    LogNormal,
    MvGaussian,
    PointMass,
)
from softgate.oracles import gamma_nodes, gauss_hermite_nodes, np_logpdf
from softgate.rules import (
    equality_message,
    explink_message,
    gamma_node_message,
    normal_bp_to_y,
    normal_message,
    softdot_message,
)

from quadrature_battery import (
    fit_gamma_exponent,
    fit_gaussian_exponent,
    fit_mv_exponent,
    normal_logf,
    tensor_expect,
    _random_instance,
    _random_spd,
)

TWO_PI = 2.0 * math.pi

# ---------------------------------------------------------------------------
# softdot
# ---------------------------------------------------------------------------


class TestSoftdot:
    def test_xor_router_score(self):
        msg = softdot_message(
            "z",
            q_w=PointMass((14.0, 0.0, -7.0)),
            q_phi=PointMass((0.0, 0.0, 1.0)),
            q_tau=PointMass(2000.0),
        )
        assert msg.mean == pytest.approx(-7.0)
        assert msg.variance == pytest.approx(1.0 / 2000.0)

    def test_zero_weights(self):
        msg = softdot_message(
            "z",
            q_w=MvGaussian.from_moments(np.zeros(2), np.eye(2)),
            q_phi=PointMass((3.0, -1.0)),
            q_tau=Gamma(2.0, 2.0),
        )
        assert msg.mean == pytest.approx(0.0)
        assert msg.variance == pytest.approx(1.0)

    def test_information_form_toward_w(self):
        msg = softdot_message(
            "w",
            q_phi=PointMass((1.0, 2.0)),
            q_z=Gaussian.from_moments(3.0, 0.5),
            q_tau=Gamma(4.0, 2.0),
        )
        np.testing.assert_allclose(msg.lam, [[2.0, 4.0], [4.0, 8.0]])
        np.testing.assert_allclose(msg.xi, [6.0, 12.0])

    def test_tau_rate_from_point_inputs(self):
        msg = softdot_message(
            "tau",
            q_w=PointMass((0.0, 0.0)),
            q_phi=PointMass((1.0, 1.0)),
            q_z=Gaussian(1.0 / 1e-12, -0.5 / 1e-12),
        )
        assert msg.alpha == pytest.approx(1.5)
        assert msg.beta == pytest.approx(0.5, abs=1e-9)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(DomainError):
            softdot_message(
                "z",
                q_w=PointMass((1.0, 2.0)),
                q_phi=PointMass((1.0, 2.0, 3.0)),
                q_tau=PointMass(1.0),
            )

    @pytest.mark.parametrize("seed", range(20))
    def test_z_message_matches_quadrature(self, seed):
        rng = np.random.default_rng(100 + seed)
        q_w, q_phi, q_tau, _ = _random_instance(rng)
        msg = softdot_message("z", q_w=q_w, q_phi=q_phi, q_tau=q_tau)
        mw, cw = q_w.mean, q_w.cov
        mp, cp = q_phi.mean, q_phi.cov
        beliefs = {
            "w0": Gaussian.from_moments(mw[0], cw[0, 0]),
            "w1": Gaussian.from_moments(mw[1], cw[1, 1]),
            "p0": Gaussian.from_moments(mp[0], cp[0, 0]),
            "p1": Gaussian.from_moments(mp[1], cp[1, 1]),
            "tau": q_tau,
        }
        # independent-component surrogate beliefs: valid because the rule's
        # claimed output depends only on means and per-port second moments,
        # which the diagonal surrogate preserves; correlated ports are
        # exercised in test_w_message_matches_quadrature
        diag_w = MvGaussian.from_moments(mw, np.diag(np.diag(cw)))
        diag_p = MvGaussian.from_moments(mp, np.diag(np.diag(cp)))
        claimed = softdot_message("z", q_w=diag_w, q_phi=diag_p, q_tau=q_tau)

        def evaluate(z):
            return tensor_expect(
                lambda w0, w1, p0, p1, tau: 0.5 * np.log(tau)
                - 0.5 * math.log(TWO_PI)
                - 0.5 * tau * (z - w0 * p0 - w1 * p1) ** 2,
                beliefs,
                order=12,
            )

        mean, precision = fit_gaussian_exponent(evaluate)
        assert mean == pytest.approx(claimed.mean, rel=1e-6, abs=1e-9)
        assert precision == pytest.approx(1.0 / claimed.variance, rel=1e-6)

    @pytest.mark.parametrize("seed", range(20))
    def test_w_message_matches_quadrature(self, seed):
        rng = np.random.default_rng(200 + seed)
        _, q_phi, q_tau, q_z = _random_instance(rng)
        msg = softdot_message("w", q_phi=q_phi, q_z=q_z, q_tau=q_tau)
        # integrate the correlated phi belief exactly via its eigenbasis
        evals, evecs = np.linalg.eigh(q_phi.cov)
        mp = q_phi.mean

        def evaluate(wvec):
            beliefs = {
                "u0": Gaussian.from_moments(0.0, evals[0]),
                "u1": Gaussian.from_moments(0.0, evals[1]),
                "z": q_z,
                "tau": q_tau,
            }

            def logf(u0, u1, z, tau):
                phi0 = mp[0] + evecs[0, 0] * u0 + evecs[0, 1] * u1
                phi1 = mp[1] + evecs[1, 0] * u0 + evecs[1, 1] * u1
                return (
                    0.5 * np.log(tau)
                    - 0.5 * math.log(TWO_PI)
                    - 0.5 * tau * (z - wvec[0] * phi0 - wvec[1] * phi1) ** 2
                )

            return tensor_expect(logf, beliefs, order=12)

        xi, lam = fit_mv_exponent(evaluate, 2)
        np.testing.assert_allclose(xi, msg.xi, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(lam, msg.lam, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_phi_message_matches_quadrature(self, seed):
        rng = np.random.default_rng(300 + seed)
        q_w, _, q_tau, q_z = _random_instance(rng)
        msg = softdot_message("phi", q_w=q_w, q_z=q_z, q_tau=q_tau)
        evals, evecs = np.linalg.eigh(q_w.cov)
        mw = q_w.mean

        def evaluate(pvec):
            beliefs = {
                "u0": Gaussian.from_moments(0.0, evals[0]),
                "u1": Gaussian.from_moments(0.0, evals[1]),
                "z": q_z,
                "tau": q_tau,
            }

            def logf(u0, u1, z, tau):
                w0 = mw[0] + evecs[0, 0] * u0 + evecs[0, 1] * u1
                w1 = mw[1] + evecs[1, 0] * u0 + evecs[1, 1] * u1
                return (
                    0.5 * np.log(tau)
                    - 0.5 * math.log(TWO_PI)
                    - 0.5 * tau * (z - w0 * pvec[0] - w1 * pvec[1]) ** 2
                )

            return tensor_expect(logf, beliefs, order=12)

        xi, lam = fit_mv_exponent(evaluate, 2)
        np.testing.assert_allclose(xi, msg.xi, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(lam, msg.lam, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_tau_message_matches_quadrature(self, seed):
        rng = np.random.default_rng(400 + seed)
        q_w, q_phi, _, q_z = _random_instance(rng)
        msg = softdot_message("tau", q_w=q_w, q_phi=q_phi, q_z=q_z)
        ew, vw = np.linalg.eigh(q_w.cov)
        ep, vp = np.linalg.eigh(q_phi.cov)
        mw, mp = q_w.mean, q_phi.mean

        def evaluate(tau):
            beliefs = {
                "a0": Gaussian.from_moments(0.0, ew[0]),
                "a1": Gaussian.from_moments(0.0, ew[1]),
                "b0": Gaussian.from_moments(0.0, ep[0]),
                "b1": Gaussian.from_moments(0.0, ep[1]),
                "z": q_z,
            }

            def logf(a0, a1, b0, b1, z):
                w0 = mw[0] + vw[0, 0] * a0 + vw[0, 1] * a1
                w1 = mw[1] + vw[1, 0] * a0 + vw[1, 1] * a1
                p0 = mp[0] + vp[0, 0] * b0 + vp[0, 1] * b1
                p1 = mp[1] + vp[1, 0] * b0 + vp[1, 1] * b1
                return (
                    0.5 * math.log(tau)
                    - 0.5 * math.log(TWO_PI)
                    - 0.5 * tau * (z - w0 * p0 - w1 * p1) ** 2
                )

            return tensor_expect(logf, beliefs, order=10)

        shape, rate = fit_gamma_exponent(evaluate)
        assert shape == pytest.approx(msg.alpha, rel=1e-6)
        assert rate == pytest.approx(msg.beta, rel=1e-6)


# ---------------------------------------------------------------------------
# normal factor
# ---------------------------------------------------------------------------


class TestNormal:
    def test_unit_precision_pass_through(self):
        msg = normal_message("y", q_mu=PointMass(5.0), q_tau=PointMass(1.0))
        assert msg.mean == pytest.approx(5.0)
        assert msg.variance == pytest.approx(1.0)

    def test_tau_rate_naive_mean_field(self):
        msg = normal_message(
            "tau",
            q_y=Gaussian.from_moments(1.0, 0.25),
            q_mu=Gaussian.from_moments(0.0, 0.25),
        )
        assert msg.alpha == pytest.approx(1.5)
        assert msg.beta == pytest.approx(0.75)

    def test_mu_from_observed_y(self):
        msg = normal_message("mu", q_y=PointMass(2.0), q_tau=PointMass(4.0))
        assert msg.mean == pytest.approx(2.0)
        assert msg.variance == pytest.approx(0.25)

    def test_structured_rate_uses_conditional_variance(self):
        naive = normal_message(
            "tau",
            q_y=Gaussian.from_moments(0.0, 1.5),
            q_mu=Gaussian.from_moments(0.0, 0.5),
        )
        structured = normal_message(
            "tau",
            q_y=Gaussian.from_moments(0.0, 1.5),
            q_mu=Gaussian.from_moments(0.0, 0.5),
            structured=True,
        )
        assert naive.beta == pytest.approx(1.0)
        assert structured.beta == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(20))
    def test_all_targets_match_quadrature(self, seed):
        rng = np.random.default_rng(500 + seed)
        q_y = Gaussian.from_moments(rng.normal(scale=2), rng.uniform(0.1, 2.0))
        q_mu = Gaussian.from_moments(rng.normal(scale=2), rng.uniform(0.1, 2.0))
        q_tau = Gamma(rng.uniform(0.8, 5.0), rng.uniform(0.5, 3.0))

        msg_y = normal_message("y", q_mu=q_mu, q_tau=q_tau)
        mean, prec = fit_gaussian_exponent(
            lambda y: tensor_expect(
                lambda mu, tau: normal_logf(y, mu, tau), {"mu": q_mu, "tau": q_tau}
            )
        )
        assert mean == pytest.approx(msg_y.mean, rel=1e-6, abs=1e-9)
        assert prec == pytest.approx(1.0 / msg_y.variance, rel=1e-6)

        msg_mu = normal_message("mu", q_y=q_y, q_tau=q_tau)
        mean, prec = fit_gaussian_exponent(
            lambda mu: tensor_expect(
                lambda y, tau: normal_logf(y, mu, tau), {"y": q_y, "tau": q_tau}
            )
        )
        assert mean == pytest.approx(msg_mu.mean, rel=1e-6, abs=1e-9)
        assert prec == pytest.approx(1.0 / msg_mu.variance, rel=1e-6)

        msg_tau = normal_message("tau", q_y=q_y, q_mu=q_mu)
        shape, rate = fit_gamma_exponent(
            lambda tau: tensor_expect(
                lambda y, mu: normal_logf(y, mu, tau), {"y": q_y, "mu": q_mu}
            )
        )
        assert shape == pytest.approx(msg_tau.alpha, rel=1e-6)
        assert rate == pytest.approx(msg_tau.beta, rel=1e-6)


class TestNormalBpToY:
    def test_additive_variance(self):
        msg = normal_bp_to_y(Gaussian.from_moments(0.0, 0.25), 4.0)
        assert msg.mean == pytest.approx(0.0)
        assert msg.variance == pytest.approx(0.5)

    def test_point_mass_input(self):
        msg = normal_bp_to_y(PointMass(3.0), 2.0)
        assert msg.mean == pytest.approx(3.0)
        assert msg.variance == pytest.approx(0.5)

    def test_matches_gaussian_convolution_quadrature(self):
        msg_mu = Gaussian.from_moments(1.0, 0.1)
        out = normal_bp_to_y(msg_mu, 10.0)
        assert out.variance == pytest.approx(0.2)
        nodes, weights = gauss_hermite_nodes(msg_mu, 64)
        for y in (0.2, 1.0, 1.7):
            dens = float(
                np.dot(weights, np.sqrt(10.0 / TWO_PI) * np.exp(-5.0 * (y - nodes) ** 2))
            )
            assert math.exp(out.logpdf(y)) == pytest.approx(dens, rel=1e-9)

    def test_rejects_nonpositive_precision(self):
        with pytest.raises(DomainError):
            normal_bp_to_y(PointMass(0.0), 0.0)


# ---------------------------------------------------------------------------
# gamma factor
# ---------------------------------------------------------------------------


class TestGammaFactor:
    def test_unit_exponential(self):
        msg = gamma_node_message("gamma", alpha_clamp=1.0, q_beta=PointMass(1.0))
        assert (msg.alpha, msg.beta) == (1.0, 1.0)

    def test_gamma_target_uses_mean_rate(self):
        msg = gamma_node_message("gamma", alpha_clamp=3.0, q_beta=Gamma(2.0, 4.0))
        assert msg.alpha == pytest.approx(3.0)
        assert msg.beta == pytest.approx(0.5)

    def test_beta_target_kernel_consistent_shape(self):
        msg = gamma_node_message("beta", alpha_clamp=2.0, q_gamma=Gamma(3.0, 1.5))
        assert msg.alpha == pytest.approx(3.0)
        assert msg.beta == pytest.approx(2.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_both_targets_match_quadrature(self, seed):
        rng = np.random.default_rng(600 + seed)
        alpha_clamp = rng.uniform(0.5, 4.0)
        q_beta = Gamma(rng.uniform(0.8, 5.0), rng.uniform(0.5, 3.0))
        q_gamma = Gamma(rng.uniform(0.8, 5.0), rng.uniform(0.5, 3.0))

        def gamma_logf(gamma, beta):
            return (
                alpha_clamp * np.log(beta)
                - math.lgamma(alpha_clamp)
                + (alpha_clamp - 1.0) * np.log(gamma)
                - beta * gamma
            )

        msg_g = gamma_node_message("gamma", alpha_clamp=alpha_clamp, q_beta=q_beta)
        shape, rate = fit_gamma_exponent(
            lambda g: tensor_expect(lambda beta: gamma_logf(g, beta), {"beta": q_beta})
        )
        assert shape == pytest.approx(msg_g.alpha, rel=1e-6)
        assert rate == pytest.approx(msg_g.beta, rel=1e-6)

        msg_b = gamma_node_message("beta", alpha_clamp=alpha_clamp, q_gamma=q_gamma)
        shape, rate = fit_gamma_exponent(
            lambda b: tensor_expect(lambda gamma: gamma_logf(gamma, b), {"gamma": q_gamma})
        )
        assert shape == pytest.approx(msg_b.alpha, rel=1e-6)
        assert rate == pytest.approx(msg_b.beta, rel=1e-6)


# ---------------------------------------------------------------------------
# exponential link
# ---------------------------------------------------------------------------


def _mollified_pushforward_density(points, msg_logpdf, forward: bool, eps_scale: float):
    """Numeric pushforward density via a narrow Gaussian kernel.

    forward=True: density of exp(z) at ``points`` for a message on z.
    forward=False: density of log(gamma) at ``points`` for a message on gamma.
    """
    out = []
    for p in points:
        if forward:
            center = math.log(p)
            grid = np.linspace(center - 12.0 * eps_scale, center + 12.0 * eps_scale, 4001)
            values = np.exp(msg_logpdf(grid))
            kernel = np.exp(-0.5 * ((p - np.exp(grid)) / (eps_scale * p)) ** 2) / (
                math.sqrt(TWO_PI) * eps_scale * p
            )
        else:
            center = math.exp(p)
            lo = center * math.exp(-12.0 * eps_scale)
            hi = center * math.exp(12.0 * eps_scale)
            grid = np.linspace(lo, hi, 4001)
            values = np.exp(msg_logpdf(grid))
            kernel = np.exp(-0.5 * ((p - np.log(grid)) / eps_scale) ** 2) / (
                math.sqrt(TWO_PI) * eps_scale
            )
        out.append(float(np.trapezoid(values * kernel, grid)))
    return np.array(out)


class TestExpLink:
    def test_gaussian_to_lognormal(self):
        msg = explink_message("gamma", Gaussian.from_moments(0.0, 1.0))
        assert isinstance(msg, LogNormal)
        assert (msg.m, msg.s2) == (0.0, 1.0)
        assert msg.mean() == pytest.approx(math.exp(0.5), rel=1e-12)

    def test_gamma_to_loggamma(self):
        msg = explink_message("z", Gamma(1.0, 1.0))
        assert isinstance(msg, LogGamma)
        assert (msg.a, msg.b) == (1.0, 1.0)
        # density e^{z - e^z} integrates to one by substitution
        z = np.linspace(-20.0, 4.0, 200001)
        assert np.trapezoid(np.exp(z - np.exp(z)), z) == pytest.approx(1.0, abs=1e-8)

    def test_point_mass_pushforward(self):
        assert explink_message("gamma", PointMass(0.0)).value == pytest.approx(1.0)
        assert explink_message("z", PointMass(1.0)).value == pytest.approx(0.0)

    def test_wrong_family_is_properness_violation(self):
        with pytest.raises(FamilyError):
            explink_message("gamma", Gamma(1.0, 1.0))
        with pytest.raises(FamilyError):
            explink_message("z", Gaussian.from_moments(0.0, 1.0))

    @pytest.mark.parametrize("seed", range(5))
    def test_forward_density_matches_change_of_variables(self, seed):
        rng = np.random.default_rng(700 + seed)
        g = Gaussian.from_moments(rng.normal(), rng.uniform(0.3, 2.0))
        msg = explink_message("gamma", g)
        qs = np.linspace(0.05, 0.95, 50)
        points = np.exp(g.mean + math.sqrt(g.variance) * _norm_ppf(qs))
        numeric = _mollified_pushforward_density(points, np_logpdf(g), True, 1e-4)
        claimed = np.exp([msg.logpdf(p) for p in points])
        np.testing.assert_allclose(claimed, numeric, rtol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_density_matches_change_of_variables(self, seed):
        rng = np.random.default_rng(800 + seed)
        g = Gamma(rng.uniform(1.0, 5.0), rng.uniform(0.5, 3.0))
        msg = explink_message("z", g)
        from scipy.stats import gamma as gamma_dist

        qs = np.linspace(0.05, 0.95, 50)
        points = np.log(gamma_dist.ppf(qs, g.alpha, scale=1.0 / g.beta))
        numeric = _mollified_pushforward_density(points, np_logpdf(g), False, 1e-4)
        claimed = np.exp([msg.logpdf(p) for p in points])
        np.testing.assert_allclose(claimed, numeric, rtol=1e-6)


def _norm_ppf(q):
    from scipy.stats import norm

    return norm.ppf(q)


# ---------------------------------------------------------------------------
# equality
# ---------------------------------------------------------------------------


class TestEquality:
    def test_two_identical_gaussians(self):
        g = Gaussian.from_moments(0.0, 1.0)
        out = equality_message(0, [None, g, g])
        assert out.variance == pytest.approx(0.5)

    def test_flat_is_identity(self):
        g = Gaussian.from_moments(0.0, 1.0)
        out = equality_message(1, [g, None, Flat()])
        assert out is g

    def test_gamma_products_add_natural_params(self):
        out = equality_message(0, [None, Gamma(2.0, 1.0), Gamma(3.0, 2.0)])
        assert out.alpha == pytest.approx(4.0)
        assert out.beta == pytest.approx(3.0)

    def test_k_identical_inputs_scale_variance_exactly(self):
        g = Gaussian.from_moments(1.3, 0.7)
        for k in (2, 3, 5, 8):
            out = equality_message(0, [None] + [g] * k)
            assert out.eta2 == pytest.approx(k * g.eta2, rel=1e-12)
            assert out.variance == pytest.approx(0.7 / k, rel=1e-12)
            assert out.mean == pytest.approx(1.3, rel=1e-12)

    def test_point_mass_dominates(self):
        out = equality_message(0, [None, Gaussian.from_moments(0, 1), PointMass(2.0)])
        assert isinstance(out, PointMass)

    def test_mixed_families_routed_to_solver(self):
        with pytest.raises(FamilyError, match="fixed-point"):
            equality_message(0, [None, Gaussian.from_moments(0, 1), Gamma(1, 1)])
