"""Independent numerical oracles used by the test suite.

Quadrature expectations and brute-force grid minimizers that verify the
analytic message rules and edge solvers.  Nothing here imports the rule
catalog, the solvers or the engine, and the density formulas below are
written out directly rather than shared, so the oracles stay independent
of the computations they are used to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, roots_genlaguerre

from .families import Flat, Gamma, Gaussian, LogGamma, LogNormal, PointMass

__all__ = [
    "GAMMA_GRID",
    "GAUSSIAN_GRID",
    "GridSpec",
    "QuadratureSpec",
    "brute_force_gamma_min",
    "brute_force_gaussian_min",
    "expect",
    "gamma_log_nodes",
    "gamma_nodes",
    "gauss_hermite_nodes",
    "np_logpdf",
]


@dataclass(frozen=True)
class QuadratureSpec:
    """Quadrature rule selector.

    ``kind`` is one of ``"gauss-hermite"``, ``"gauss-laguerre"`` or
    ``"trapezoid"``.  The trapezoid rule integrates on a fixed finite
    window ``bounds`` with ``order`` points; the Gaussian rules use
    ``order`` nodes adapted to the belief.
    """

    kind: str = "gauss-hermite"
    order: int = 64
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.order < 8:
            raise ValueError("quadrature order must be at least 8")
        if self.kind == "trapezoid" and self.bounds is None:
            raise ValueError("trapezoid quadrature needs finite bounds")


def gauss_hermite_nodes(g: Gaussian, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights for E[f(z)] under a Gaussian."""
    x, w = np.polynomial.hermite.hermgauss(order)
    m, v = g.moments
    nodes = m + math.sqrt(2.0 * v) * x
    weights = w / math.sqrt(math.pi)
    return nodes, weights


def gamma_nodes(g: Gamma, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights for E[f(x)] under a Gamma.

    Uses generalized Gauss-Laguerre with exponent ``alpha - 1`` so the
    Gamma kernel is absorbed into the weight function exactly.
    """
    t, w = roots_genlaguerre(order, g.alpha - 1.0)
    nodes = t / g.beta
    weights = w / math.exp(float(gammaln(g.alpha)))
    return nodes, weights


def gamma_log_nodes(g: Gamma, n: int = 4097) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoid rule for Gamma expectations after ``u = log x``.

    The transformed density ``exp(a*u - b*exp(u))`` is smooth with
    double-exponential right tail, so the trapezoid rule converges
    geometrically; unlike Gauss-Laguerre it handles ``log x`` moments to
    near machine precision.
    """
    from scipy.stats import gamma as gamma_dist

    lo = math.log(gamma_dist.ppf(1e-300, g.alpha, scale=1.0 / g.beta))
    hi = math.log(gamma_dist.isf(1e-16, g.alpha, scale=1.0 / g.beta))
    lo = max(lo, math.log(g.mean) - 4000.0)
    u = np.linspace(lo, hi, n)
    logdens = (
        g.alpha * u
        - g.beta * np.exp(u)
        + g.alpha * math.log(g.beta)
        - float(gammaln(g.alpha))
    )
    weights = np.exp(logdens) * (u[1] - u[0])
    weights[0] *= 0.5
    weights[-1] *= 0.5
    return np.exp(u), weights


def np_logpdf(msg):
    """Vectorized log density of a message, written out independently."""
    if isinstance(msg, Gaussian):
        m, v = msg.moments
        c = 0.5 * math.log(2.0 * math.pi * v)
        return lambda x: -0.5 * (x - m) ** 2 / v - c
    if isinstance(msg, Gamma):
        a, b = msg.alpha, msg.beta
        c = a * math.log(b) - float(gammaln(a))
        return lambda x: c + (a - 1.0) * np.log(x) - b * x
    if isinstance(msg, LogNormal):
        if msg.is_flat:
            return lambda x: np.zeros_like(np.asarray(x, dtype=float))
        m, s2 = msg.m, msg.s2
        c = 0.5 * math.log(2.0 * math.pi * s2)
        return lambda x: -0.5 * (np.log(x) - m) ** 2 / s2 - np.log(x) - c
    if isinstance(msg, LogGamma):
        if msg.is_flat:
            return lambda x: np.zeros_like(np.asarray(x, dtype=float))
        a, b = msg.a, msg.b
        c = b * math.log(a) + float(gammaln(b))
        return lambda x: b * x - np.exp(x) / a - c
    if isinstance(msg, Flat):
        return lambda x: np.zeros_like(np.asarray(x, dtype=float))
    raise TypeError(f"no vectorized log density for {type(msg).__name__}")


def expect(f, belief, spec: QuadratureSpec = QuadratureSpec()) -> float:
    """Numerical expectation ``E[f]`` under ``belief``.

    ``f`` must be vectorizable over a 1-d array of evaluation points and
    finite on the belief's effective support.
    """
    if isinstance(belief, PointMass):
        return float(f(np.asarray([belief.as_float()]))[0])
    if spec.kind == "gauss-hermite":
        if not isinstance(belief, Gaussian):
            raise TypeError("gauss-hermite quadrature expects a Gaussian belief")
        nodes, weights = gauss_hermite_nodes(belief, spec.order)
    elif spec.kind == "gauss-laguerre":
        if not isinstance(belief, Gamma):
            raise TypeError("gauss-laguerre quadrature expects a Gamma belief")
        nodes, weights = gamma_nodes(belief, spec.order)
    elif spec.kind == "log-trapezoid":
        if not isinstance(belief, Gamma):
            raise TypeError("log-trapezoid quadrature expects a Gamma belief")
        nodes, weights = gamma_log_nodes(belief, max(spec.order, 4097))
    elif spec.kind == "trapezoid":
        lo, hi = spec.bounds
        nodes = np.linspace(lo, hi, spec.order)
        dens = np.exp(np_logpdf(belief)(nodes))
        values = np.asarray(f(nodes), dtype=float) * dens
        return float(np.trapezoid(values, nodes))
    else:
        raise ValueError(f"unknown quadrature kind {spec.kind!r}")
    values = np.asarray(f(nodes), dtype=float)
    if not np.all(np.isfinite(values * weights)):
        raise ValueError("non-finite integrand samples")
    return float(np.dot(weights, values))


# ---------------------------------------------------------------------------
# Brute-force minimizers for the per-edge variational objectives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Rectangular search grid for the brute-force edge minimizers."""

    lo1: float
    hi1: float
    lo2: float
    hi2: float
    points: int = 101


GAUSSIAN_GRID = GridSpec(lo1=-5.0, hi1=5.0, lo2=-6.0, hi2=3.0)
GAMMA_GRID = GridSpec(lo1=-4.0, hi1=4.0, lo2=-4.0, hi2=4.0)


def _gaussian_objective_grid(msg_logpdfs, means, logvars, order=48):
    """Restricted local free energy on an (m, log v) grid, by quadrature.

    Entropy and both message energies are all computed numerically from
    log densities alone.
    """
    x, w = np.polynomial.hermite.hermgauss(order)
    w = w / math.sqrt(math.pi)
    mm, lv = np.meshgrid(means, logvars, indexing="ij")
    grid_v = np.exp(lv)
    total = np.zeros_like(mm)
    sq2 = np.sqrt(2.0 * grid_v)
    for xi, wi in zip(x, w):
        z = mm + sq2 * xi
        # E[log q]: at a standardized node the quadratic term is -xi**2
        logq = -xi * xi - 0.5 * np.log(2.0 * math.pi * grid_v)
        total += wi * logq
        for logpdf in msg_logpdfs:
            total -= wi * logpdf(z)
    return total


def _gamma_objective_grid(msg_logpdfs, alphas, betas, order=256):
    """Restricted local free energy on an (alpha, beta) grid, by quadrature."""
    total = np.empty((alphas.size, betas.size))
    logb = np.log(betas)
    for i, a in enumerate(alphas):
        t, w = roots_genlaguerre(order, a - 1.0)
        w = w / math.exp(float(gammaln(a)))
        # E[log q] reduces on the standardized nodes t = beta * x
        e_logq = (
            logb
            - float(gammaln(a))
            + (a - 1.0) * float(np.dot(w, np.log(t)))
            - float(np.dot(w, t))
        )
        nodes = t[None, :] / betas[:, None]
        acc = e_logq.copy()
        for logpdf in msg_logpdfs:
            acc -= logpdf(nodes) @ w
        total[i] = acc
    return total


def _refine_window(values: np.ndarray, idx: int) -> tuple[float, float]:
    step = values[1] - values[0]
    return values[idx] - step, values[idx] + step


def brute_force_gaussian_min(msg_logpdfs, grid: GridSpec = GAUSSIAN_GRID):
    """Exhaustive minimizer of the Gaussian-edge local free energy.

    ``msg_logpdfs`` are vectorized log densities of the two incoming
    messages.  Returns ``((mean, variance), objective)`` after one
    refinement pass around the coarse argmin.
    """
    means = np.linspace(grid.lo1, grid.hi1, grid.points)
    logvars = np.linspace(grid.lo2, grid.hi2, grid.points)
    coarse = _gaussian_objective_grid(msg_logpdfs, means, logvars)
    if not np.any(np.isfinite(coarse)):
        raise ValueError("objective non-finite everywhere on the grid")
    i, j = np.unravel_index(np.nanargmin(coarse), coarse.shape)
    means2 = np.linspace(*_refine_window(means, i), grid.points)
    logvars2 = np.linspace(*_refine_window(logvars, j), grid.points)
    fine = _gaussian_objective_grid(msg_logpdfs, means2, logvars2)
    i2, j2 = np.unravel_index(np.nanargmin(fine), fine.shape)
    return (float(means2[i2]), float(np.exp(logvars2[j2]))), float(fine[i2, j2])


def brute_force_gamma_min(msg_logpdfs, grid: GridSpec = GAMMA_GRID):
    """Exhaustive minimizer of the Gamma-edge local free energy.

    The grid is laid out in ``(log alpha, log beta)``.  Returns
    ``((alpha, beta), objective)`` after one refinement pass.
    """
    logas = np.linspace(grid.lo1, grid.hi1, grid.points)
    logbs = np.linspace(grid.lo2, grid.hi2, grid.points)
    coarse = _gamma_objective_grid(msg_logpdfs, np.exp(logas), np.exp(logbs))
    if not np.any(np.isfinite(coarse)):
        raise ValueError("objective non-finite everywhere on the grid")
    i, j = np.unravel_index(np.nanargmin(coarse), coarse.shape)
    logas2 = np.linspace(*_refine_window(logas, i), grid.points)
    logbs2 = np.linspace(*_refine_window(logbs, j), grid.points)
    fine = _gamma_objective_grid(msg_logpdfs, np.exp(logas2), np.exp(logbs2))
    i2, j2 = np.unravel_index(np.nanargmin(fine), fine.shape)
    return (float(np.exp(logas2[i2])), float(np.exp(logbs2[j2]))), float(fine[i2, j2])
