"""Exponential-family beliefs and messages in natural parameterization.

Everything the runtime passes along an edge is one of the types defined
here: univariate Gaussians, multivariate Gaussians in information form,
Gammas in shape/rate form, the two non-conjugate message families
(log-normal on positive precisions, log-gamma on real-valued scores),
point masses for clamped or observed values, and the flat identity
message.

Beliefs and messages are stored in natural/information coordinates;
moment forms are computed on demand.  All types are immutable value
types and all functions here are pure, so they may be used freely from
concurrent code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, zeta

__all__ = [
    "DegenerateBeliefError",
    "DomainError",
    "FamilyError",
    "Flat",
    "Gamma",
    "Gaussian",
    "LogGamma",
    "LogNormal",
    "MvGaussian",
    "PointMass",
    "SaturationError",
    "entropy",
    "gamma_stats",
    "gaussian_fisher",
    "gaussian_mgf",
    "gaussian_mgf_with_grad",
    "multiply_same_family",
    "natural_product",
    "trigamma",
]

# exp(x) overflows float64 slightly above this; kept conservative so
# downstream products of saturating quantities stay finite.
MAX_LOG = 700.0


class DomainError(ValueError):
    """Parameters violate the family's domain (e.g. non-positive variance)."""


class DegenerateBeliefError(ValueError):
    """A product of messages is not normalizable as a belief."""


class FamilyError(TypeError):
    """Messages of different conjugate families were combined directly."""


class SaturationError(OverflowError):
    """A closed-form expectation exceeds the representable float range."""


def trigamma(x: float) -> float:
    """Second derivative of log Gamma (Hurwitz zeta form)."""
    return float(zeta(2.0, x))


def tetragamma(x: float) -> float:
    """Third derivative of log Gamma (Hurwitz zeta form)."""
    return -2.0 * float(zeta(3.0, x))


# ---------------------------------------------------------------------------
# Univariate Gaussian
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Gaussian:
    """Univariate Gaussian with natural parameters ``(m/v, -1/(2v))``.

    Parameters
    ----------
    eta1 : float
        Coefficient of ``z`` in the log density.
    eta2 : float
        Coefficient of ``z**2``; must be strictly negative.
    """

    eta1: float
    eta2: float

    def __post_init__(self):
        if not (math.isfinite(self.eta1) and math.isfinite(self.eta2)):
            raise DomainError(f"non-finite Gaussian parameters ({self.eta1}, {self.eta2})")
        if self.eta2 >= 0.0:
            raise DomainError(f"Gaussian requires eta2 < 0, got {self.eta2}")

    @classmethod
    def from_moments(cls, mean: float, variance: float) -> "Gaussian":
        if not (variance > 0.0 and math.isfinite(variance)):
            raise DomainError(f"variance must be positive and finite, got {variance}")
        return cls(mean / variance, -0.5 / variance)

    @property
    def variance(self) -> float:
        return -0.5 / self.eta2

    @property
    def mean(self) -> float:
        return -0.5 * self.eta1 / self.eta2

    @property
    def moments(self) -> tuple[float, float]:
        return (self.mean, self.variance)

    def natural(self) -> tuple[float, float]:
        return (self.eta1, self.eta2)

    def log_partition(self) -> float:
        return -self.eta1 * self.eta1 / (4.0 * self.eta2) + 0.5 * math.log(
            math.pi / (-self.eta2)
        )

    def logpdf(self, x: float) -> float:
        m, v = self.moments
        return -0.5 * (x - m) ** 2 / v - 0.5 * math.log(2.0 * math.pi * v)

    def entropy(self) -> float:
        return 0.5 * math.log(2.0 * math.pi * math.e * self.variance)


def gaussian_fisher(g: Gaussian) -> np.ndarray:
    """Fisher information of the Gaussian at ``g`` in natural coordinates.

    Equals the Hessian of the Gaussian log-partition, i.e. the covariance
    of the sufficient statistics ``(z, z**2)``.
    """
    m, v = g.moments
    return np.array([[v, 2.0 * m * v], [2.0 * m * v, 4.0 * m * m * v + 2.0 * v * v]])


def gaussian_mgf(g: "Gaussian | PointMass") -> float:
    """``E[exp(z)]`` under ``g``, in closed form.

    Raises
    ------
    SaturationError
        If the exponent exceeds the representable range.  Saturation is
        reported explicitly rather than returned as infinity.
    """
    if isinstance(g, PointMass):
        expo = float(g.value)
    else:
        m, v = g.moments
        expo = m + 0.5 * v
    if expo > MAX_LOG:
        raise SaturationError(f"E[exp(z)] exponent {expo:.3g} exceeds float range")
    return math.exp(expo)


def gaussian_mgf_with_grad(g: Gaussian) -> tuple[float, np.ndarray]:
    """``E[exp(z)]`` and its gradient with respect to ``(eta1, eta2)``."""
    m, v = g.moments
    value = gaussian_mgf(g)
    grad = value * np.array([v, 2.0 * m * v + v * v])
    return value, grad


# ---------------------------------------------------------------------------
# Multivariate Gaussian (information form)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MvGaussian:
    """Multivariate Gaussian in information form ``(xi, lam)``.

    ``lam`` is the precision matrix and ``xi = lam @ mean``.  Messages may
    carry positive semi-definite ``lam`` (rank-one outer products arise
    naturally); only beliefs require positive definiteness, checked by
    :meth:`mean` / :meth:`cov` / :meth:`entropy`.
    """

    xi: np.ndarray
    lam: np.ndarray
    diagonal_only: bool = False

    def __post_init__(self):
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim == 0:
            lam = lam.reshape(1, 1)
        if xi.ndim != 1 or lam.shape != (xi.size, xi.size):
            raise DomainError(f"shape mismatch: xi {xi.shape}, lam {lam.shape}")
        if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(lam))):
            raise DomainError("non-finite MvGaussian parameters")
        scale = max(1.0, float(np.max(np.abs(lam))))
        if np.max(np.abs(lam - lam.T)) > 1e-9 * scale:
            raise DomainError("precision matrix must be symmetric")
        lam = 0.5 * (lam + lam.T)
        if self.diagonal_only:
            off = lam - np.diag(np.diag(lam))
            if np.any(off != 0.0):
                raise DomainError("diagonal_only belief has nonzero off-diagonal entries")
        xi.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def from_moments(
        cls, mean: np.ndarray, cov: np.ndarray, diagonal_only: bool = False
    ) -> "MvGaussian":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        lam = np.linalg.inv(cov)
        lam = 0.5 * (lam + lam.T)
        if diagonal_only:
            lam = np.diag(np.diag(lam))
        return cls(lam @ mean, lam, diagonal_only=diagonal_only)

    @property
    def dim(self) -> int:
        return self.xi.size

    def _chol(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.lam)
        except np.linalg.LinAlgError:
            raise DegenerateBeliefError("precision matrix is not positive definite")

    @property
    def mean(self) -> np.ndarray:
        chol = self._chol()
        y = np.linalg.solve(chol, self.xi)
        return np.linalg.solve(chol.T, y)

    @property
    def cov(self) -> np.ndarray:
        chol = self._chol()
        inv = np.linalg.inv(chol)
        return inv.T @ inv

    def entropy(self) -> float:
        chol = self._chol()
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return 0.5 * (self.dim * math.log(2.0 * math.pi * math.e) - logdet)

    def project_diagonal(self) -> "MvGaussian":
        """Diagonal-precision belief with the same mean.

        The precision matrix is projected to its diagonal; the
        information vector is rebuilt so the mean is preserved (dropping
        off-diagonal mass with a fixed information vector would shift
        the mean and destabilize message passing).
        """
        diag = np.diag(np.diag(self.lam))
        return MvGaussian(np.diag(self.lam) * self.mean, diag, diagonal_only=True)


# ---------------------------------------------------------------------------
# Gamma
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Gamma:
    """Gamma distribution with shape ``alpha`` and rate ``beta``.

    Natural parameters are ``(alpha - 1, -beta)`` for sufficient
    statistics ``(log x, x)``.
    """

    alpha: float
    beta: float

    def __post_init__(self):
        ok = (
            self.alpha > 0.0
            and self.beta > 0.0
            and math.isfinite(self.alpha)
            and math.isfinite(self.beta)
        )
        if not ok:
            raise DomainError(f"Gamma requires alpha, beta > 0, got ({self.alpha}, {self.beta})")

    def natural(self) -> tuple[float, float]:
        return (self.alpha - 1.0, -self.beta)

    @property
    def mean(self) -> float:
        return self.alpha / self.beta

    @property
    def mean_log(self) -> float:
        return float(digamma(self.alpha)) - math.log(self.beta)

    def log_partition(self) -> float:
        return math.lgamma(self.alpha) - self.alpha * math.log(self.beta)

    def logpdf(self, x: float) -> float:
        if x <= 0.0:
            return -math.inf
        return (
            self.alpha * math.log(self.beta)
            - math.lgamma(self.alpha)
            + (self.alpha - 1.0) * math.log(x)
            - self.beta * x
        )

    def entropy(self) -> float:
        a, b = self.alpha, self.beta
        return a - math.log(b) + math.lgamma(a) + (1.0 - a) * float(digamma(a))


@dataclass(frozen=True)
class GammaStats:
    """Closed-form expectations and geometry of a Gamma belief."""

    E_log: float
    E_val: float
    E_logsq: float
    fisher: np.ndarray
    log_partition: float


def gamma_stats(g: Gamma) -> GammaStats:
    """Expected sufficient statistics, Fisher information and log-partition.

    ``fisher`` is the Hessian of the Gamma log-partition in natural
    coordinates ``(alpha - 1, -beta)``.
    """
    a, b = g.alpha, g.beta
    e_log = float(digamma(a)) - math.log(b)
    psi1 = trigamma(a)
    fisher = np.array([[psi1, 1.0 / b], [1.0 / b, a / (b * b)]])
    return GammaStats(
        E_log=e_log,
        E_val=a / b,
        E_logsq=psi1 + e_log * e_log,
        fisher=fisher,
        log_partition=g.log_partition(),
    )


# ---------------------------------------------------------------------------
# Non-conjugate messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogNormal:
    """Log-normal message ``LN(x | m, s2)``: ``log x`` is ``N(m, s2)``."""

    m: float
    s2: float

    def __post_init__(self):
        if not (self.s2 > 0.0):
            raise DomainError(f"LogNormal requires s2 > 0, got {self.s2}")

    @property
    def is_flat(self) -> bool:
        return math.isinf(self.s2)

    def logpdf(self, x: float) -> float:
        if x <= 0.0:
            return -math.inf
        lx = math.log(x)
        return (
            -0.5 * (lx - self.m) ** 2 / self.s2
            - lx
            - 0.5 * math.log(2.0 * math.pi * self.s2)
        )

    def mean(self) -> float:
        expo = self.m + 0.5 * self.s2
        if expo > MAX_LOG:
            raise SaturationError(f"log-normal mean exponent {expo:.3g} exceeds float range")
        return math.exp(expo)


@dataclass(frozen=True)
class LogGamma:
    """Log-gamma message with density ``exp(b*x) * exp(-exp(x)/a) / (a**b Gamma(b))``.

    Arises as the pushforward of a Gamma through ``x = log(gamma)``; the
    exponential link emits it toward its real-valued port.  ``b == 0`` is
    permitted only as the flat degenerate message (then ``a`` must be
    infinite so the density carries no information at all).
    """

    a: float
    b: float

    def __post_init__(self):
        if self.b == 0.0:
            if not math.isinf(self.a):
                raise DomainError("LogGamma with b == 0 is only valid as the flat message")
        elif not (self.a > 0.0 and self.b > 0.0):
            raise DomainError(f"LogGamma requires a, b > 0, got ({self.a}, {self.b})")

    @classmethod
    def flat(cls) -> "LogGamma":
        return cls(a=math.inf, b=0.0)

    @property
    def is_flat(self) -> bool:
        return self.b == 0.0 and math.isinf(self.a)

    @property
    def rate(self) -> float:
        """Coefficient of ``-exp(x)`` in the log density (``1/a``)."""
        return 0.0 if math.isinf(self.a) else 1.0 / self.a

    def logpdf(self, x: float) -> float:
        if self.is_flat:
            return 0.0
        lognorm = self.b * math.log(self.a) + math.lgamma(self.b)
        ex = math.exp(x) if x < MAX_LOG else math.inf
        return self.b * x - ex / self.a - lognorm


@dataclass(frozen=True)
class PointMass:
    """Degenerate belief at a fixed value (clamp or observation)."""

    value: object

    def as_float(self) -> float:
        return float(np.asarray(self.value))

    def as_vector(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.value, dtype=float))


@dataclass(frozen=True)
class Flat:
    """Uninformative message: the identity under message products."""


Message = object

# ---------------------------------------------------------------------------
# Products and entropies
# ---------------------------------------------------------------------------


def natural_product(a: Message, b: Message) -> Message:
    """Same-family message product by natural-parameter addition.

    Lenient: the result may be an improper message (e.g. a rank-deficient
    multivariate Gaussian built from partial sums of rank-one terms).
    Use :func:`multiply_same_family` when the result must be a belief.
    """
    if isinstance(a, Flat):
        return b
    if isinstance(b, Flat):
        return a
    # one-dimensional information-form messages interoperate with scalars
    if isinstance(a, MvGaussian) and a.dim == 1 and isinstance(b, Gaussian):
        a = Gaussian(float(a.xi[0]), -0.5 * float(a.lam[0, 0]))
    if isinstance(b, MvGaussian) and b.dim == 1 and isinstance(a, Gaussian):
        b = Gaussian(float(b.xi[0]), -0.5 * float(b.lam[0, 0]))
    if isinstance(a, Gaussian) and isinstance(b, Gaussian):
        eta1 = a.eta1 + b.eta1
        eta2 = a.eta2 + b.eta2
        if eta2 >= 0.0:
            raise DegenerateBeliefError(f"Gaussian product has eta2 = {eta2} >= 0")
        return Gaussian(eta1, eta2)
    if isinstance(a, Gamma) and isinstance(b, Gamma):
        alpha = a.alpha + b.alpha - 1.0
        beta = a.beta + b.beta
        if alpha <= 0.0 or beta <= 0.0:
            raise DegenerateBeliefError(f"Gamma product has (alpha, beta) = ({alpha}, {beta})")
        return Gamma(alpha, beta)
    if isinstance(a, MvGaussian) and isinstance(b, MvGaussian):
        if a.dim != b.dim:
            raise DomainError(f"dimension mismatch: {a.dim} vs {b.dim}")
        return MvGaussian(a.xi + b.xi, a.lam + b.lam)
    raise FamilyError(
        f"cannot multiply {type(a).__name__} with {type(b).__name__}; "
        "mixed-family products must go through the fixed-point solver"
    )


def multiply_same_family(a: Message, b: Message) -> Message:
    """Product of two same-family messages, renormalized as a belief.

    Natural parameters add.  ``Flat`` acts as the identity.  Mixed
    conjugate families raise :class:`FamilyError` (non-conjugate products
    belong to the fixed-point solver, not to this function); products
    that are not normalizable raise :class:`DegenerateBeliefError`.
    """
    out = natural_product(a, b)
    if isinstance(out, MvGaussian):
        out._chol()
    return out


def entropy(belief: Message) -> float:
    """Differential entropy of a normalizable belief.

    Point masses contribute zero by convention (observed and clamped
    variables are treated as constants).
    """
    if isinstance(belief, (Gaussian, Gamma, MvGaussian)):
        return belief.entropy()
    if isinstance(belief, PointMass):
        return 0.0
    raise DomainError(f"entropy undefined for {type(belief).__name__}")
