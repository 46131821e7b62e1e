"""Brute-force numeric references for the closed-form privacy accounting.

Everything here evaluates a divergence directly from its definition --
quadrature for densities, truncated summation for pmfs -- and shares no
code with the accounting module beyond elementary math. These functions
are slow on purpose: they exist to catch mistakes in the fast paths, not
to be called in production loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.special import ive, logsumexp

__all__ = [
    "ContinuousDist",
    "DiscreteDist",
    "OracleError",
    "gaussian_dist",
    "skellam_dist",
    "renyi_gaussian_numeric",
    "renyi_skellam_numeric",
    "renyi_subsampled_gaussian_numeric",
    "hockey_stick_numeric",
]

_LOG_UNDERFLOW = -745.0  # below this, exp() is exactly 0 in float64


class OracleError(RuntimeError):
    """Raised when a numeric reference cannot certify its own accuracy."""


@dataclass(frozen=True)
class ContinuousDist:
    """1-d distribution given by a log-density and an effective support."""

    logpdf: Callable[[float], float]
    lo: float
    hi: float


@dataclass(frozen=True)
class DiscreteDist:
    """1-d integer-support distribution given by a log-pmf and a window."""

    logpmf: Callable[[np.ndarray], np.ndarray]
    lo: int
    hi: int


def gaussian_dist(mean: float, std: float) -> ContinuousDist:
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    c = -0.5 * math.log(2.0 * math.pi * std**2)

    def logpdf(t):
        return c - 0.5 * ((t - mean) / std) ** 2

    return ContinuousDist(logpdf, mean - 20.0 * std, mean + 20.0 * std)


def _skellam_logpmf(k: np.ndarray, mu: float) -> np.ndarray:
    # Sk(mu, mu) pmf(k) = e^{-2 mu} I_k(2 mu); ive is the scaled Bessel,
    # so the exponential factor is already folded in.
    with np.errstate(divide="ignore"):
        return np.log(ive(np.abs(k), 2.0 * mu))


def skellam_dist(shift: int, mu: float) -> DiscreteDist:
    """Centered Skellam (difference of two Poisson(mu)) translated by `shift`."""
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    half = int(math.ceil(abs(shift) + 20.0 * max(1.0, math.sqrt(2.0 * mu)) + 50))

    def logpmf(k):
        return _skellam_logpmf(np.asarray(k) - shift, mu)

    return DiscreteDist(logpmf, -half, half)


def _log_integral(log_f: Callable[[float], float], lo: float, hi: float,
                  pieces: int = 256) -> float:
    """log of the integral of exp(log_f) over [lo, hi].

    The range is cut into pieces; each piece is rescaled by its own maximum
    before Gauss-Kronrod quadrature so integrands with enormous dynamic
    range never overflow.
    """
    edges = np.linspace(lo, hi, pieces + 1)
    logs = []
    for a, b in zip(edges[:-1], edges[1:]):
        m = max(log_f(x) for x in np.linspace(a, b, 7))
        if m < _LOG_UNDERFLOW:
            continue
        val, err = quad(lambda t: math.exp(log_f(t) - m), a, b,
                        epsabs=1e-300, epsrel=1e-12, limit=200)
        if val > 0:
            if err > 1e-6 * val:
                raise OracleError(
                    f"quadrature did not converge on [{a}, {b}]: "
                    f"value {val:.3e}, error estimate {err:.3e}")
            logs.append(m + math.log(val))
    if not logs:
        raise OracleError("integrand underflows everywhere in the window")
    return float(logsumexp(logs))


def _renyi_continuous(log_p, log_q, alpha: float, lo: float, hi: float) -> float:
    # D_alpha(P||Q) = log E_Q[(p/q)^alpha] / (alpha - 1)
    return _log_integral(lambda t: alpha * log_p(t) - (alpha - 1.0) * log_q(t),
                         lo, hi) / (alpha - 1.0)


def renyi_gaussian_numeric(shift: float, std: float, order: float) -> float:
    """Renyi divergence of order `order` between N(shift, std^2) and N(0, std^2).

    Direct quadrature of the definition. The integration window follows the
    exponentially tilted density, whose mass sits near order * shift, not
    near the origin -- truncating at a fixed multiple of std silently loses
    the answer for orders above ~20.
    """
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    if order <= 1:
        raise ValueError(f"order must exceed 1, got {order}")
    if shift == 0:
        return 0.0
    p = gaussian_dist(shift, std)
    q = gaussian_dist(0.0, std)
    lo = min(0.0, shift) - 20.0 * std
    hi = max(0.0, shift) + order * abs(shift) + 20.0 * std
    return _renyi_continuous(p.logpdf, q.logpdf, order, lo, hi)


def renyi_skellam_numeric(shift: int, poisson_param: float, order: int) -> float:
    """Renyi divergence between shifted and unshifted Skellam, both directions.

    Exact pmf summation over a window wide enough that the truncated tail
    of the tilted summand is provably negligible; the max over the two
    neighbouring directions is returned (they coincide for a pure shift by
    symmetry, which doubles as a sanity check).
    """
    if poisson_param <= 0:
        raise ValueError(f"poisson_param must be positive, got {poisson_param}")
    if order <= 1 or int(order) != order:
        raise ValueError(f"order must be an integer >= 2, got {order}")
    shift = int(shift)
    if shift == 0:
        return 0.0
    mu = float(poisson_param)
    alpha = int(order)
    half = int(math.ceil(abs(shift) * (alpha + 1)
                         + 20.0 * max(1.0, math.sqrt(2.0 * mu)) + 50))
    k = np.arange(-half, half + 1)
    logq = _skellam_logpmf(k, mu)
    logp = _skellam_logpmf(k - shift, mu)
    results = []
    for la, lb in ((logp, logq), (logq, logp)):
        terms = alpha * la - (alpha - 1.0) * lb
        finite = np.isfinite(terms)
        if not finite.any():
            raise OracleError("all summands underflowed")
        total = logsumexp(terms[finite])
        # the tilted summand must have decayed into float underflow at the
        # window edges, otherwise the truncation is not certified
        edge = max(terms[finite][0], terms[finite][-1])
        if edge > total + math.log(1e-12):
            raise OracleError(
                f"tail bound failure: edge term {edge:.3e} vs total {total:.3e}")
        results.append(total / (alpha - 1.0))
    return float(max(results))


def renyi_subsampled_gaussian_numeric(shift: float, std: float, rate: float,
                                      order: float) -> float:
    """Renyi divergence for the Poisson-subsampled Gaussian dominating pair.

    Numerically integrates both directions between the mixture
    (1-rate) N(0, std^2) + rate N(shift, std^2) and N(0, std^2), returning
    the max (the add/remove relation requires considering both).
    """
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    if order <= 1:
        raise ValueError(f"order must exceed 1, got {order}")
    if rate == 0.0 or shift == 0.0:
        return 0.0
    if rate == 1.0:
        return renyi_gaussian_numeric(shift, std, order)

    log_q = gaussian_dist(0.0, std).logpdf
    log_p = gaussian_dist(shift, std).logpdf
    lr, l1r = math.log(rate), math.log1p(-rate)

    def log_mix(t):
        a, b = l1r + log_q(t), lr + log_p(t)
        hi_ = max(a, b)
        return hi_ + math.log1p(math.exp(min(a, b) - hi_))

    lo = min(0.0, shift) - 20.0 * std
    hi = max(0.0, shift) + order * abs(shift) + 20.0 * std
    d_remove = _renyi_continuous(log_mix, log_q, order, lo, hi)
    d_add = _renyi_continuous(log_q, log_mix, order, lo, hi)
    return max(d_remove, d_add)


def hockey_stick_numeric(p_dist, q_dist, alpha: float) -> float:
    """E_Q[(p/q - alpha)_+] evaluated directly from densities or pmfs.

    Accepts a (ContinuousDist, ContinuousDist) or (DiscreteDist, DiscreteDist)
    pair; `alpha` here is the hockey-stick threshold (e^epsilon in DP use),
    not a Renyi order.
    """
    if alpha < 0:
        raise ValueError(f"threshold must be nonnegative, got {alpha}")
    if isinstance(p_dist, DiscreteDist) and isinstance(q_dist, DiscreteDist):
        k = np.arange(min(p_dist.lo, q_dist.lo), max(p_dist.hi, q_dist.hi) + 1)
        p = np.exp(p_dist.logpmf(k))
        q = np.exp(q_dist.logpmf(k))
        return float(np.sum(np.maximum(p - alpha * q, 0.0)))
    if isinstance(p_dist, ContinuousDist) and isinstance(q_dist, ContinuousDist):
        lo = min(p_dist.lo, q_dist.lo)
        hi = max(p_dist.hi, q_dist.hi)

        def integrand(t):
            return max(math.exp(p_dist.logpdf(t)) - alpha * math.exp(q_dist.logpdf(t)), 0.0)

        edges = np.linspace(lo, hi, 65)
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            val, err = quad(integrand, a, b, epsabs=1e-12, epsrel=1e-10, limit=200)
            if err > 1e-8:
                raise OracleError(f"hockey-stick quadrature error {err:.3e} on [{a}, {b}]")
            total += val
        return float(max(total, 0.0))
    raise TypeError("p_dist and q_dist must both be continuous or both discrete")
