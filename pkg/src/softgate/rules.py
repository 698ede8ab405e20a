"""The per-factor message catalog.

One operation per (factor, target-port) pair.  Stochastic factors
(precision-weighted inner product, normal, gamma) send variational
messages computed from the marginals of their other ports; the two
deterministic factors (exponential link, equality) send belief
propagation messages computed from incoming messages.

Every function is pure and depends only on its arguments, never on graph
context, so the output message type is fixed by the target port alone.
Point masses are accepted at every port and treated as zero-variance
beliefs (clamped values).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .families import (
    DomainError,
    FamilyError,
    Flat,
    Gamma,
    Gaussian,
    LogGamma,
    LogNormal,
    MvGaussian,
    PointMass,
    natural_product,
)

__all__ = [
    "equality_message",
    "explink_message",
    "gamma_node_message",
    "normal_bp_to_y",
    "normal_message",
    "softdot_message",
]

# Precisions at or above this are collapsed to point masses: beyond it the
# Gaussian Fisher determinant (2 v^3) underflows, so the belief is a point
# mass at numerical precision anyway.
_POINT_PRECISION = 1e90


def _scalar_moments(b) -> tuple[float, float]:
    """Mean and variance of a scalar Gaussian-typed belief."""
    if isinstance(b, Gaussian):
        return b.moments
    if isinstance(b, PointMass):
        return (b.as_float(), 0.0)
    if isinstance(b, MvGaussian) and b.dim == 1:
        return (float(b.mean[0]), float(b.cov[0, 0]))
    raise DomainError(f"expected a scalar Gaussian-typed belief, got {type(b).__name__}")


def _vector_moments(b) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance of a (possibly clamped) vector belief."""
    if isinstance(b, PointMass):
        m = b.as_vector()
        return m, np.zeros((m.size, m.size))
    if isinstance(b, MvGaussian):
        return b.mean, b.cov
    if isinstance(b, Gaussian):
        m, v = b.moments
        return np.array([m]), np.array([[v]])
    raise DomainError(f"expected a vector Gaussian-typed belief, got {type(b).__name__}")


def _gamma_mean(b) -> float:
    if isinstance(b, Gamma):
        return b.mean
    if isinstance(b, PointMass):
        val = b.as_float()
        if val <= 0.0:
            raise DomainError(f"precision point mass must be positive, got {val}")
        return val
    raise DomainError(f"expected a Gamma-typed belief, got {type(b).__name__}")


def _gaussian_from_mean_precision(mean: float, precision: float):
    if precision >= _POINT_PRECISION or math.isinf(precision):
        return PointMass(mean)
    return Gaussian.from_moments(mean, 1.0 / precision)


def _is_vector(b) -> bool:
    if isinstance(b, MvGaussian):
        return b.dim > 1
    if isinstance(b, PointMass):
        return np.asarray(b.value).size > 1
    return False


def _is_matrix_clamp(b) -> bool:
    return isinstance(b, PointMass) and np.asarray(b.value).ndim == 2


# ---------------------------------------------------------------------------
# Softdot: N(z | w'phi, 1/tau)
# ---------------------------------------------------------------------------


def softdot_message(target: str, *, q_w=None, q_phi=None, q_tau=None, q_z=None):
    """Variational message from the inner-product factor toward ``target``.

    Ports: ``z`` (scalar score), ``w`` and ``phi`` (vectors of equal
    dimension), ``tau`` (scalar precision).  Only the non-target ports
    need be populated.
    """
    if target == "z":
        mw, _ = _vector_moments(q_w)
        mphi, _ = _vector_moments(q_phi)
        if mw.size != mphi.size:
            raise DomainError(f"dimension mismatch: w has {mw.size}, phi has {mphi.size}")
        return _gaussian_from_mean_precision(float(mw @ mphi), _gamma_mean(q_tau))

    if target in ("w", "phi"):
        other = q_phi if target == "w" else q_w
        m_other, cov_other = _vector_moments(other)
        mz, _ = _scalar_moments(q_z)
        e_tau = _gamma_mean(q_tau)
        second_moment = np.outer(m_other, m_other) + cov_other
        return MvGaussian(xi=e_tau * mz * m_other, lam=e_tau * second_moment)

    if target == "tau":
        mw, cov_w = _vector_moments(q_w)
        mphi, cov_phi = _vector_moments(q_phi)
        if mw.size != mphi.size:
            raise DomainError(f"dimension mismatch: w has {mw.size}, phi has {mphi.size}")
        mz, vz = _scalar_moments(q_z)
        # full E[(z - w'phi)^2] under the mean-field beliefs
        second_phi = np.outer(mphi, mphi) + cov_phi
        residual = (
            (mz - float(mw @ mphi)) ** 2
            + vz
            + float(np.trace(cov_w @ second_phi))
            + float(mw @ cov_phi @ mw)
        )
        return Gamma(1.5, 0.5 * residual)

    raise DomainError(f"unknown softdot port {target!r}")


# ---------------------------------------------------------------------------
# Normal: N(y | mu, 1/tau)
# ---------------------------------------------------------------------------


def normal_message(target: str, *, q_y=None, q_mu=None, q_tau=None, structured: bool = False):
    """Variational message from the normal factor toward ``target``.

    With ``structured=True`` the tau-message uses the structured joint
    over (y, mu) in which the mu-marginal's uncertainty is shared, so
    E[(y - mu)^2] reduces to the conditional variance of y; the naive
    mean-field form adds the two variances instead.
    """
    if target in ("y", "mu"):
        src = q_mu if target == "y" else q_y
        if _is_vector(src) or _is_matrix_clamp(q_tau):
            # vector normal: N(y | mu, P^{-1}) with clamped mean and
            # precision (scalar precisions mean tau * identity)
            mean = _vector_moments(src)[0]
            prec = q_tau.value if isinstance(q_tau, PointMass) else None
            if prec is None:
                raise DomainError("vector normal messages require a clamped precision")
            prec = np.asarray(prec, dtype=float)
            if prec.ndim == 0:
                prec = float(prec) * np.eye(mean.size)
            return MvGaussian(xi=prec @ mean, lam=prec)
        m_src, _ = _scalar_moments(src)
        return _gaussian_from_mean_precision(m_src, _gamma_mean(q_tau))
    if target == "tau":
        m_y, v_y = _scalar_moments(q_y)
        m_mu, v_mu = _scalar_moments(q_mu)
        if structured:
            spread = (m_y - m_mu) ** 2 + max(v_y - v_mu, 0.0)
        else:
            spread = (m_y - m_mu) ** 2 + v_y + v_mu
        return Gamma(1.5, 0.5 * spread)
    raise DomainError(f"unknown normal port {target!r}")


def normal_bp_to_y(msg_mu, tau: float) -> Gaussian:
    """Belief-propagation message to ``y`` with a point-mass precision.

    Propagates the full uncertainty of the incoming mu-message:
    the outgoing variance is ``Var(mu) + 1/tau``.
    """
    if isinstance(tau, PointMass):
        tau = tau.as_float()
    if not tau > 0.0:
        raise DomainError(f"precision must be positive, got {tau}")
    m_mu, v_mu = _scalar_moments(msg_mu)
    return Gaussian.from_moments(m_mu, v_mu + 1.0 / tau)


# ---------------------------------------------------------------------------
# Gamma factor: G(gamma | alpha, beta) with clamped shape
# ---------------------------------------------------------------------------


def gamma_node_message(target: str, *, alpha_clamp: float, q_beta=None, q_gamma=None) -> Gamma:
    """Variational message from the gamma factor toward ``target``.

    The shape of the beta-message is ``alpha_clamp + 1``: the expected
    log-kernel in beta is ``beta**alpha * exp(-beta E[gamma])``, read off
    kernel-consistently.
    """
    if not alpha_clamp > 0.0:
        raise DomainError(f"clamped shape must be positive, got {alpha_clamp}")
    if target == "gamma":
        return Gamma(alpha_clamp, _gamma_mean(q_beta))
    if target == "beta":
        return Gamma(alpha_clamp + 1.0, _gamma_mean(q_gamma))
    raise DomainError(f"unknown gamma-factor port {target!r}")


# ---------------------------------------------------------------------------
# Exponential link: delta(gamma - exp(z))
# ---------------------------------------------------------------------------


def explink_message(target: str, incoming):
    """Belief-propagation message through the exponential link.

    ``target == "gamma"`` expects the incoming Gaussian message on the
    score side and returns its log-normal pushforward; ``target == "z"``
    expects the incoming Gamma message on the precision side and returns
    the log-gamma pushforward.  Any other incoming family is a properness
    violation and raises :class:`FamilyError`.
    """
    if target == "gamma":
        if isinstance(incoming, PointMass):
            return PointMass(math.exp(incoming.as_float()))
        if isinstance(incoming, Flat):
            return Flat()
        if not isinstance(incoming, Gaussian):
            raise FamilyError(
                f"exp link toward gamma requires a Gaussian score message, "
                f"got {type(incoming).__name__}"
            )
        m, v = incoming.moments
        return LogNormal(m, v)
    if target == "z":
        if isinstance(incoming, PointMass):
            val = incoming.as_float()
            if val <= 0.0:
                raise DomainError(f"precision point mass must be positive, got {val}")
            return PointMass(math.log(val))
        if isinstance(incoming, Flat):
            return LogGamma.flat()
        if not isinstance(incoming, Gamma):
            raise FamilyError(
                f"exp link toward z requires a Gamma precision message, "
                f"got {type(incoming).__name__}"
            )
        return LogGamma(a=1.0 / incoming.beta, b=incoming.alpha)
    raise DomainError(f"unknown exp-link port {target!r}")


# ---------------------------------------------------------------------------
# Equality
# ---------------------------------------------------------------------------


def equality_message(target_index: int, incoming: Sequence):
    """Product of the incoming messages on all non-target ports.

    Flat messages are identities; point masses dominate (the shared
    variable is pinned).  All informative messages must share one
    conjugate family, otherwise a :class:`FamilyError` instructs the
    caller to route the product through the fixed-point module.
    """
    if not incoming:
        raise DomainError("equality node needs at least one incoming message")
    if not 0 <= target_index < len(incoming):
        raise DomainError(f"target index {target_index} out of range")
    result = Flat()
    for k, msg in enumerate(incoming):
        if k == target_index or msg is None:
            continue
        if isinstance(msg, PointMass):
            return msg
        result = natural_product(result, msg)
    return result
