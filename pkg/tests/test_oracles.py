"""The verification oracles themselves: quadrature and grid minimizers."""

import math

import numpy as np
import pytest

from softgate.families import Gamma, Gaussian, LogGamma, LogNormal
from softgate.oracles import (
    GridSpec,
    QuadratureSpec,
    brute_force_gamma_min,
    brute_force_gaussian_min,
    expect,
    np_logpdf,
)


class TestExpect:
    def test_normalization(self):
        one = lambda x: np.ones_like(x)
        assert expect(one, Gaussian.from_moments(1.0, 2.0)) == pytest.approx(1.0)
        spec = QuadratureSpec(kind="gauss-laguerre", order=48)
        assert expect(one, Gamma(2.5, 1.5), spec) == pytest.approx(1.0)

    def test_exponential_moment_matches_closed_form(self):
        g = Gaussian.from_moments(0.0, 1.0)
        assert expect(np.exp, g) == pytest.approx(math.exp(0.5), rel=1e-12)

    def test_log_moment_matches_gamma_stats(self):
        g = Gamma(2.0, 3.0)
        spec = QuadratureSpec(kind="log-trapezoid")
        assert expect(np.log, g, spec) == pytest.approx(g.mean_log, abs=1e-10)

    def test_order_64_vs_96_agreement(self):
        g = Gaussian.from_moments(0.4, 1.7)
        for f in (np.exp, np.cos, lambda x: x**3):
            a = expect(f, g, QuadratureSpec(order=64))
            b = expect(f, g, QuadratureSpec(order=96))
            assert a == pytest.approx(b, abs=1e-9)

    def test_non_finite_integrand_rejected(self):
        g = Gaussian.from_moments(0.0, 1.0)
        with pytest.raises(ValueError, match="non-finite"):
            expect(lambda x: np.where(x > 0, np.inf, 1.0), g)

    def test_minimum_order_enforced(self):
        with pytest.raises(ValueError):
            QuadratureSpec(order=4)

    def test_trapezoid_kind(self):
        spec = QuadratureSpec(kind="trapezoid", order=20001, bounds=(-12.0, 12.0))
        g = Gaussian.from_moments(0.5, 1.2)
        assert expect(lambda x: x, g, spec) == pytest.approx(0.5, abs=1e-8)


class TestBruteForce:
    def test_flat_nonconjugate_recovers_conjugate(self):
        conj = Gaussian.from_moments(1.0, 0.5)
        (m, v), _ = brute_force_gaussian_min([np_logpdf(conj), np_logpdf(LogGamma.flat())])
        assert m == pytest.approx(1.0, abs=0.02)
        assert v == pytest.approx(0.5, rel=0.05)

    def test_gaussian_grid_refinement_self_consistent(self):
        conj = Gaussian.from_moments(0.0, 1.0)
        lg = LogGamma(1.0, 1.0)
        logs = [np_logpdf(conj), np_logpdf(lg)]
        (m1, v1), _ = brute_force_gaussian_min(logs)
        shrunk = GridSpec(lo1=m1 - 1.0, hi1=m1 + 1.0,
                          lo2=math.log(v1) - 1.0, hi2=math.log(v1) + 1.0)
        (m2, v2), _ = brute_force_gaussian_min(logs, shrunk)
        coarse_cell = 10.0 / 100
        assert abs(m1 - m2) < coarse_cell
        assert abs(math.log(v1) - math.log(v2)) < 9.0 / 100

    def test_gamma_flat_lognormal_recovers_conjugate(self):
        conj = Gamma(2.0, 1.5)
        flat = LogNormal(0.0, math.inf)
        (a, b), _ = brute_force_gamma_min([np_logpdf(conj), np_logpdf(flat)])
        assert a == pytest.approx(2.0, rel=0.05)
        assert b == pytest.approx(1.5, rel=0.05)

    def test_nonfinite_grid_rejected(self):
        bad = lambda x: np.full_like(np.asarray(x, dtype=float), np.nan)
        with pytest.raises(ValueError):
            brute_force_gaussian_min([bad])
