"""Renyi-DP accounting: base curves, subsampling amplification, composition,
and conversion to approximate DP.

All operations are pure functions on integer-order RDP curves. Anything
that could overflow (the amplification expansion at high orders) runs in
log space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp
from scipy.stats import norm

__all__ = [
    "NoiseFamily",
    "NeighbourRelation",
    "RdpCurve",
    "MechanismSpec",
    "SubsamplingSpec",
    "PrivacyBudget",
    "default_orders",
    "gaussian_rdp",
    "skellam_rdp",
    "gaussian_epsilon",
    "skellam_epsilon",
    "amplify_poisson",
    "compose",
    "rdp_to_adp",
    "adp_delta_exact_gaussian",
    "make_report",
    "write_report",
]


class NoiseFamily(str, Enum):
    GAUSSIAN = "gaussian"
    SKELLAM = "skellam"


class NeighbourRelation(str, Enum):
    ADD_REMOVE = "add_remove"


def default_orders() -> list[int]:
    """Integer order grid covering every regime this package calibrates in."""
    return list(range(2, 65)) + [128, 256]


@dataclass(frozen=True)
class RdpCurve:
    """Renyi-DP epsilon as a function of integer order alpha >= 2."""

    orders: tuple[int, ...]
    epsilons: tuple[float, ...]

    def __post_init__(self):
        orders = tuple(int(a) for a in self.orders)
        eps = tuple(float(e) for e in self.epsilons)
        if len(orders) != len(eps) or not orders:
            raise ValueError("orders and epsilons must be non-empty and equal length")
        if any(a < 2 for a in orders):
            raise ValueError(f"orders must be integers >= 2, got {orders}")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise ValueError("orders must be strictly increasing")
        if any(e < 0 or math.isnan(e) for e in eps):
            raise ValueError("epsilons must be nonnegative")
        # (alpha - 1) * eps(alpha) is the log-MGF of the privacy loss and
        # must be non-decreasing; small float slack for computed curves
        g = [(a - 1) * e for a, e in zip(orders, eps)]
        for x, y in zip(g, g[1:]):
            if y < x * (1 - 1e-9) - 1e-12:
                raise ValueError("(alpha-1)*eps(alpha) must be non-decreasing")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "epsilons", eps)

    def epsilon_at(self, order: int) -> float:
        try:
            return self.epsilons[self.orders.index(int(order))]
        except ValueError:
            raise KeyError(f"order {order} not on the curve") from None

    def as_dict(self) -> dict:
        return {"orders": list(self.orders), "epsilons": list(self.epsilons)}


@dataclass(frozen=True)
class MechanismSpec:
    """One per-step, per-client additive noise mechanism.

    `noise_multiplier` is the Gaussian-equivalent noise std in units of the
    clipping norm; for the Skellam family the per-coordinate Poisson
    parameter is mu = (scale * clip * sigma)^2 / 2, so Gaussian and Skellam
    calibrations are interchangeable at large scale.
    """

    family: NoiseFamily
    noise_multiplier: float
    clip_norm: float
    fixedpoint_scale: int = 1
    dimension: int = 1

    def __post_init__(self):
        if self.noise_multiplier <= 0:
            raise ValueError(f"noise_multiplier must be positive, got {self.noise_multiplier}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dimension}")
        if self.family == NoiseFamily.SKELLAM:
            if int(self.fixedpoint_scale) < 1:
                raise ValueError(
                    f"fixedpoint_scale must be >= 1 for Skellam, got {self.fixedpoint_scale}")
            if not math.isfinite(self.poisson_param) or self.poisson_param <= 0:
                raise ValueError("Skellam Poisson parameter must be finite and positive")

    @property
    def poisson_param(self) -> float:
        """Per-coordinate Poisson parameter of the centered Skellam noise."""
        return (self.fixedpoint_scale * self.clip_norm * self.noise_multiplier) ** 2 / 2.0


@dataclass(frozen=True)
class SubsamplingSpec:
    """Poisson subsampling: each sample enters a minibatch with probability rate."""

    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must be in [0, 1], got {self.rate}")


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    relation: NeighbourRelation = NeighbourRelation.ADD_REMOVE

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must be in [0, 1], got {self.delta}")


def gaussian_epsilon(noise_std: float, sensitivity: float, order: float) -> float:
    """RDP of the Gaussian mechanism: alpha * Delta^2 / (2 sigma^2)."""
    if noise_std <= 0:
        raise ValueError(f"noise_std must be positive, got {noise_std}")
    if sensitivity < 0:
        raise ValueError(f"sensitivity must be nonnegative, got {sensitivity}")
    return order * sensitivity**2 / (2.0 * noise_std**2)


def skellam_epsilon(poisson_param: float, l2_sensitivity: float,
                    l1_sensitivity: float, order: int) -> float:
    """Closed-form RDP upper bound for the Skellam mechanism.

    eps(alpha) = alpha d2^2 / (4 mu)
               + min( ((2 alpha - 1) d2^2 + 6 d1) / (16 mu^2), 3 d1 / (4 mu) )

    with sensitivities in the mechanism's integer units. The bound converges
    to the Gaussian curve for variance 2 mu as mu grows.
    """
    if poisson_param <= 0:
        raise ValueError(f"poisson_param must be positive, got {poisson_param}")
    a, mu = float(order), float(poisson_param)
    d2, d1 = float(l2_sensitivity), float(l1_sensitivity)
    lead = a * d2**2 / (4.0 * mu)
    corr = min(((2.0 * a - 1.0) * d2**2 + 6.0 * d1) / (16.0 * mu**2),
               3.0 * d1 / (4.0 * mu))
    return lead + corr


def gaussian_rdp(spec: MechanismSpec, sensitivity: float,
                 orders: Sequence[int]) -> RdpCurve:
    """RDP curve of one Gaussian mechanism with std = noise_multiplier * clip_norm."""
    if spec.family != NoiseFamily.GAUSSIAN:
        raise ValueError(f"expected a Gaussian spec, got {spec.family.value}")
    if sensitivity < 0:
        raise ValueError(f"sensitivity must be nonnegative, got {sensitivity}")
    std = spec.noise_multiplier * spec.clip_norm
    return RdpCurve(tuple(orders),
                    tuple(gaussian_epsilon(std, sensitivity, a) for a in orders))


def skellam_rdp(spec: MechanismSpec, l2_sensitivity: float, l1_sensitivity: float,
                orders: Sequence[int]) -> RdpCurve:
    """RDP curve of one Skellam mechanism; sensitivities in fixed-point units."""
    if spec.family != NoiseFamily.SKELLAM:
        raise ValueError(f"expected a Skellam spec, got {spec.family.value}")
    for name, val in (("l2_sensitivity", l2_sensitivity), ("l1_sensitivity", l1_sensitivity)):
        if val < 0:
            raise ValueError(f"{name} must be nonnegative, got {val}")
        if abs(val - round(val)) > 1e-6:
            raise ValueError(
                f"{name} must be an integer in fixed-point units, got {val}")
    mu = spec.poisson_param
    if l2_sensitivity == 0 and l1_sensitivity == 0:
        return RdpCurve(tuple(orders), tuple(0.0 for _ in orders))
    return RdpCurve(tuple(orders),
                    tuple(skellam_epsilon(mu, l2_sensitivity, l1_sensitivity, a)
                          for a in orders))


def _as_curve_fn(base) -> Callable[[int], float]:
    if callable(base):
        return base
    if isinstance(base, RdpCurve):
        table = dict(zip(base.orders, base.epsilons))

        def fn(k: int) -> float:
            if k not in table:
                raise ValueError(
                    f"base curve must be evaluable at every integer order 2..alpha; "
                    f"missing order {k}")
            return table[k]

        return fn
    raise TypeError("base must be a callable order -> epsilon or an RdpCurve")


def amplify_poisson(base, subsampling: SubsamplingSpec | float,
                    orders: Sequence[int]) -> RdpCurve:
    """Tight RDP amplification of `base` under Poisson subsampling.

    For integer alpha the amplified moment is the exact binomial expansion

      e^{(a-1) eps'(a)} = (1-q)^{a-1} (1 + (a-1) q)
                          + sum_{k=2}^{a} C(a,k) (1-q)^{a-k} q^k e^{(k-1) eps(k)},

    evaluated in log space. It is exact when eps(k) is the exact Renyi
    divergence of the base dominating pair (Gaussian), and remains a valid
    upper bound when eps(k) is itself an upper bound (Skellam).
    """
    q = subsampling.rate if isinstance(subsampling, SubsamplingSpec) else float(subsampling)
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"subsampling rate must be in [0, 1], got {q}")
    base_fn = _as_curve_fn(base)
    orders = [int(a) for a in orders]
    if any(a < 2 for a in orders):
        raise ValueError("amplification is defined on integer orders >= 2")

    if q == 0.0:
        return RdpCurve(tuple(orders), tuple(0.0 for _ in orders))
    if q == 1.0:
        return RdpCurve(tuple(orders), tuple(float(base_fn(a)) for a in orders))

    max_order = max(orders)
    base_eps = np.array([float(base_fn(k)) for k in range(2, max_order + 1)])
    if (base_eps < 0).any():
        raise ValueError("base curve returned a negative epsilon")
    log_q, log_1mq = math.log(q), math.log1p(-q)

    out = []
    for a in orders:
        k = np.arange(2, a + 1)
        log_comb = gammaln(a + 1) - gammaln(k + 1) - gammaln(a - k + 1)
        terms = log_comb + (a - k) * log_1mq + k * log_q + (k - 1) * base_eps[:a - 1]
        head = (a - 1) * log_1mq + math.log1p((a - 1) * q)
        log_moment = logsumexp(np.append(terms, head))
        out.append(max(0.0, log_moment / (a - 1)))
    return RdpCurve(tuple(orders), tuple(out))


def compose(curve: RdpCurve, count: int) -> RdpCurve:
    """RDP of `count` adaptive sequential compositions: epsilons scale linearly."""
    if int(count) != count or count < 1:
        raise ValueError(f"count must be a positive integer, got {count}")
    return RdpCurve(curve.orders, tuple(count * e for e in curve.epsilons))


def rdp_to_adp(curve: RdpCurve, delta: float) -> tuple[PrivacyBudget, int]:
    """Convert an RDP curve to an (epsilon, delta) budget.

    epsilon = min over alpha of eps(alpha) + log(1/delta) / (alpha - 1);
    returns the budget and the minimizing order.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    log_inv_delta = math.log(1.0 / delta)
    candidates = [e + log_inv_delta / (a - 1) for a, e in zip(curve.orders, curve.epsilons)]
    i = int(np.argmin(candidates))
    return (PrivacyBudget(epsilon=float(candidates[i]), delta=float(delta)),
            curve.orders[i])


def adp_delta_exact_gaussian(sigma_eff: float, sensitivity: float, epsilon: float) -> float:
    """Tight delta(epsilon) of the Gaussian dominating pair.

    The hockey-stick divergence H_{e^eps}(N(Delta, sigma^2) || N(0, sigma^2))
    in standard-normal-CDF closed form:
      delta = Phi(Delta/(2 sigma) - eps sigma/Delta)
              - e^eps Phi(-Delta/(2 sigma) - eps sigma/Delta).
    """
    if sigma_eff <= 0:
        raise ValueError(f"sigma_eff must be positive, got {sigma_eff}")
    if sensitivity < 0:
        raise ValueError(f"sensitivity must be nonnegative, got {sensitivity}")
    if sensitivity == 0:
        return 0.0
    r = sensitivity / sigma_eff
    delta = norm.cdf(r / 2.0 - epsilon / r) - math.exp(epsilon) * norm.cdf(-r / 2.0 - epsilon / r)
    return float(max(delta, 0.0))


def make_report(inputs: dict, curve: RdpCurve, budget: PrivacyBudget,
                minimizing_order: int, extras: dict | None = None) -> dict:
    """Structured accounting report: inputs echoed, curve, order, final budget."""
    report = {
        "inputs": inputs,
        "rdp_curve": curve.as_dict(),
        "minimizing_order": int(minimizing_order),
        "epsilon": budget.epsilon,
        "delta": budget.delta,
        "relation": budget.relation.value,
    }
    if extras:
        report.update(extras)
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
