"""Joint noise scaling over clients with multiple local steps.

Builds the per-step mechanism that dominates the sum of all clients'
per-step mechanisms, accounts for a full training run (S local steps times
T rounds, Poisson subsampling, RDP composition, ADP conversion), and
inverts that pipeline to calibrate per-client noise against a target
budget. The heterogeneous generalizations (per-step learning rates,
client learning-rate divisors, per-client clipping/noise, local-step
fusion) all reduce to the same effective (sigma, sensitivity) pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .accounting import (
    MechanismSpec,
    NoiseFamily,
    PrivacyBudget,
    RdpCurve,
    SubsamplingSpec,
    amplify_poisson,
    compose,
    default_orders,
    gaussian_epsilon,
    make_report,
    rdp_to_adp,
    skellam_epsilon,
)

__all__ = [
    "PlanError",
    "CalibrationRangeError",
    "FusionError",
    "TrustModelError",
    "HeterogeneityDescriptor",
    "AccountingPlan",
    "SumDominatingSpec",
    "steps_for_epochs",
    "build_sum_dominating",
    "per_step_curve_fn",
    "account_joint",
    "joint_report",
    "calibrate_joint_noise",
    "naive_multi_step_sensitivity",
    "naive_whole_sum_budget",
    "fuse_steps",
    "hbc_rescale",
]


class PlanError(ValueError):
    """An accounting plan is internally inconsistent."""


class CalibrationRangeError(RuntimeError):
    """The target budget is unreachable within the calibration bracket."""


class FusionError(ValueError):
    """A step-fusion request does not land on the common step count."""


class TrustModelError(ValueError):
    """Trust-model adjustment parameters are inconsistent."""


@dataclass(frozen=True)
class HeterogeneityDescriptor:
    """Per-client / per-step deviations from the homogeneous plan.

    `per_step_lr` has no effect on the privacy arithmetic (public rescaling
    of each step is post-processing) but is validated so plans stay honest.
    `fusion` holds per-client (steps_taken, fusion_factor) pairs; a fused
    client's clipping norm is its fine-grained clip times the factor.
    """

    per_step_lr: tuple[float, ...] | None = None
    client_lr_divisors: tuple[float, ...] | None = None
    per_client_clip: tuple[float, ...] | None = None
    per_client_sigma: tuple[float, ...] | None = None
    fusion: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        for name in ("per_step_lr", "client_lr_divisors", "per_client_clip",
                     "per_client_sigma"):
            val = getattr(self, name)
            if val is not None:
                val = tuple(float(v) for v in val)
                if any(v <= 0 for v in val):
                    raise PlanError(f"{name} entries must be positive")
                object.__setattr__(self, name, val)
        if self.client_lr_divisors is not None and self.client_lr_divisors[0] != 1.0:
            raise PlanError("the first client's learning-rate divisor must be 1")
        if self.fusion is not None:
            object.__setattr__(
                self, "fusion",
                tuple((int(s), int(f)) for s, f in self.fusion))
            if any(s < 1 or f < 1 for s, f in self.fusion):
                raise PlanError("fusion entries must be positive integers")


@dataclass(frozen=True)
class AccountingPlan:
    """Composition structure of one training run.

    N clients each take `local_steps` noised steps per round for `rounds`
    rounds; every per-step mechanism follows the `mechanism` template unless
    overridden by the heterogeneity descriptor.
    """

    n_clients: int
    local_steps: int
    rounds: int
    subsampling: SubsamplingSpec
    mechanism: MechanismSpec
    heterogeneity: HeterogeneityDescriptor | None = None

    def __post_init__(self):
        for name in ("n_clients", "local_steps", "rounds"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise PlanError(f"{name} must be a positive integer, got {v}")
        het = self.heterogeneity
        if het is None:
            return
        n, s = self.n_clients, self.local_steps
        for name in ("client_lr_divisors", "per_client_clip", "per_client_sigma"):
            val = getattr(het, name)
            if val is not None and len(val) != n:
                raise PlanError(f"{name} must have one entry per client ({n})")
        if het.per_step_lr is not None and len(het.per_step_lr) != s:
            raise PlanError(f"per_step_lr must have one entry per local step ({s})")
        if het.fusion is not None:
            if len(het.fusion) != n:
                raise PlanError(f"fusion must have one entry per client ({n})")
            for i, (taken, factor) in enumerate(het.fusion):
                if taken % factor != 0 or taken // factor != s:
                    raise FusionError(
                        f"client {i}: {taken} steps fused by {factor} do not land on "
                        f"the common step count {s}")


@dataclass(frozen=True)
class SumDominatingSpec:
    """Effective per-step mechanism dominating the sum over clients.

    `effective_sigma` is the joint Gaussian-equivalent noise multiplier (std
    in units of the dominating sensitivity); `effective_sensitivity` is the
    dominating per-unit sensitivity in absolute units.
    """

    effective_sigma: float
    effective_sensitivity: float

    def __post_init__(self):
        if self.effective_sigma <= 0 or self.effective_sensitivity <= 0:
            raise ValueError("effective sigma and sensitivity must be positive")


def steps_for_epochs(epochs: int, rate: float) -> int:
    """Expected-coverage convention: one epoch = round(1/rate) Poisson steps."""
    if rate <= 0:
        raise ValueError("epochs require a positive sampling rate")
    if int(epochs) != epochs or epochs < 1:
        raise ValueError(f"epochs must be a positive integer, got {epochs}")
    return int(epochs) * int(round(1.0 / rate))


def build_sum_dominating(plan: AccountingPlan) -> SumDominatingSpec:
    """Construct the per-step sum-dominating mechanism for a plan.

    Homogeneous clients: variance adds, sensitivity stays at C. With
    learning-rate divisors l_i (l_1 = 1) and per-client C_i, sigma_i the
    joint absolute variance is sum_i (C_i' sigma_i / l_i)^2 and the
    sensitivity is max_i C_i' / l_i, where C_i' is the clip after fusing
    the client's local steps. The same arithmetic applies to Skellam via
    its Poisson parameters (mu scales with variance).
    """
    if plan.mechanism.family not in (NoiseFamily.GAUSSIAN, NoiseFamily.SKELLAM):
        raise ValueError(
            f"mechanism family {plan.mechanism.family!r} has no infinitely "
            f"divisible noise; cannot build a sum-dominating mechanism")
    n = plan.n_clients
    het = plan.heterogeneity
    clips = list(het.per_client_clip) if het and het.per_client_clip else \
        [plan.mechanism.clip_norm] * n
    sigmas = list(het.per_client_sigma) if het and het.per_client_sigma else \
        [plan.mechanism.noise_multiplier] * n
    divisors = list(het.client_lr_divisors) if het and het.client_lr_divisors else \
        [1.0] * n
    factors = [f for _, f in het.fusion] if het and het.fusion else [1] * n

    fused_clips = [c * f for c, f in zip(clips, factors)]
    variance = sum((c * s / l) ** 2
                   for c, s, l in zip(fused_clips, sigmas, divisors))
    sensitivity = max(c / l for c, l in zip(fused_clips, divisors))
    return SumDominatingSpec(effective_sigma=math.sqrt(variance) / sensitivity,
                             effective_sensitivity=sensitivity)


def _ceil_int(x: float) -> int:
    # conservative integerization for fixed-point sensitivities: never
    # understate, but don't let float fuzz bump an exact integer up
    return int(math.ceil(x - 1e-9))


def per_step_curve_fn(plan: AccountingPlan):
    """Base (pre-amplification) RDP generator for the plan's joint step."""
    sds = build_sum_dominating(plan)
    mech = plan.mechanism
    if mech.family == NoiseFamily.GAUSSIAN:
        std = sds.effective_sigma * sds.effective_sensitivity

        def fn(order: int) -> float:
            return gaussian_epsilon(std, sds.effective_sensitivity, order)

        return fn, sds
    scale = mech.fixedpoint_scale
    mu = (scale * sds.effective_sensitivity * sds.effective_sigma) ** 2 / 2.0
    d2 = _ceil_int(scale * sds.effective_sensitivity)
    d1 = _ceil_int(min(math.sqrt(mech.dimension) * d2, float(d2) ** 2))

    def fn(order: int) -> float:
        return skellam_epsilon(mu, d2, d1, order)

    return fn, sds


def _joint_curve(plan: AccountingPlan, orders: Sequence[int]) -> tuple[RdpCurve, SumDominatingSpec]:
    base_fn, sds = per_step_curve_fn(plan)
    amplified = amplify_poisson(base_fn, plan.subsampling, orders)
    return compose(amplified, plan.local_steps * plan.rounds), sds


def account_joint(plan: AccountingPlan, delta: float,
                  orders: Sequence[int] | None = None) -> PrivacyBudget:
    """Privacy of the full run released through the trusted aggregator.

    Pipeline: sum-dominating step mechanism -> base RDP -> Poisson
    amplification -> composition over S*T steps -> ADP at `delta`.
    """
    orders = list(orders) if orders is not None else default_orders()
    curve, _ = _joint_curve(plan, orders)
    budget, _ = rdp_to_adp(curve, delta)
    return budget


def joint_report(plan: AccountingPlan, delta: float,
                 orders: Sequence[int] | None = None,
                 colluders_tolerated: int = 0) -> dict:
    """Full accounting report for the plan, including the joint mechanism."""
    orders = list(orders) if orders is not None else default_orders()
    curve, sds = _joint_curve(plan, orders)
    budget, best = rdp_to_adp(curve, delta)
    sigma = plan.mechanism.noise_multiplier
    extras = {
        "sum_dominating": {
            "effective_sigma": sds.effective_sigma,
            "effective_sensitivity": sds.effective_sensitivity,
        },
        "sigma_per_client": sigma,
        "sigma_total": sigma * math.sqrt(plan.n_clients),
        "trust_model": {
            "colluders_tolerated": colluders_tolerated,
            "sigma_per_client_hbc": hbc_rescale(sigma, plan.n_clients,
                                                colluders_tolerated),
        },
    }
    inputs = {
        "n_clients": plan.n_clients,
        "local_steps": plan.local_steps,
        "rounds": plan.rounds,
        "subsampling_rate": plan.subsampling.rate,
        "mechanism": plan.mechanism.family.value,
        "noise_multiplier": plan.mechanism.noise_multiplier,
        "clip_norm": plan.mechanism.clip_norm,
        "fixedpoint_scale": plan.mechanism.fixedpoint_scale,
        "dimension": plan.mechanism.dimension,
        "delta": delta,
    }
    return make_report(inputs, curve, budget, best, extras)


def _with_sigma(plan: AccountingPlan, sigma: float) -> AccountingPlan:
    mech = replace(plan.mechanism, noise_multiplier=sigma)
    het = plan.heterogeneity
    if het is not None and het.per_client_sigma is not None:
        raise PlanError(
            "calibration returns a single shared sigma; remove per_client_sigma "
            "from the heterogeneity descriptor")
    return replace(plan, mechanism=mech)


def calibrate_joint_noise(plan: AccountingPlan, target: PrivacyBudget,
                          orders: Sequence[int] | None = None,
                          lo: float = 1e-3, hi: float = 1e6,
                          max_iter: int = 200) -> float:
    """Smallest shared per-client sigma meeting the target budget.

    Bisection on sigma; the achieved epsilon lands within 1e-3 relative of
    the target from below.
    """
    if target.epsilon <= 0:
        raise ValueError("target epsilon must be positive")
    if not 0.0 < target.delta < 1.0:
        raise ValueError("target delta must be in (0, 1)")

    def eps(sigma: float) -> float:
        return account_joint(_with_sigma(plan, sigma), target.delta, orders).epsilon

    if eps(hi) > target.epsilon:
        raise CalibrationRangeError(
            f"target epsilon {target.epsilon} unreachable even at sigma = {hi}")
    if eps(lo) <= target.epsilon:
        raise CalibrationRangeError(
            f"target epsilon {target.epsilon} already met at sigma = {lo}; "
            f"widen the bracket to calibrate")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if eps(mid) <= target.epsilon:
            hi = mid
        else:
            lo = mid
        if eps(hi) >= target.epsilon * (1.0 - 1e-3):
            break
    return hi


def naive_multi_step_sensitivity(clip_norm: float, steps: int) -> float:
    """Triangle-inequality sensitivity of the summed update: S * C."""
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    return steps * clip_norm


def naive_whole_sum_budget(plan: AccountingPlan, delta: float,
                           orders: Sequence[int] | None = None) -> PrivacyBudget:
    """Single-shot accounting of the whole summed update, for comparison.

    The entire S-step sum is treated as one query with sensitivity S * C and
    the matched total noise std sqrt(S) * sigma * C, amplified at the rate
    1 - (1 - q)^S at which one sample touches the release at all. Per-step
    accounting should beat this whenever subsampling is active; without
    subsampling the two coincide for Gaussian noise.
    """
    orders = list(orders) if orders is not None else default_orders()
    steps = plan.local_steps
    sds = build_sum_dominating(plan)
    naive_sens = naive_multi_step_sensitivity(sds.effective_sensitivity, steps)
    total_std = math.sqrt(steps) * sds.effective_sigma * sds.effective_sensitivity
    mech = plan.mechanism
    if mech.family == NoiseFamily.GAUSSIAN:
        def base_fn(order: int) -> float:
            return gaussian_epsilon(total_std, naive_sens, order)
    else:
        scale = mech.fixedpoint_scale
        mu = (scale * total_std) ** 2 / 2.0
        d2 = _ceil_int(scale * naive_sens)
        d1 = _ceil_int(min(math.sqrt(mech.dimension) * d2, float(d2) ** 2))

        def base_fn(order: int) -> float:
            return skellam_epsilon(mu, d2, d1, order)

    q_eff = 1.0 - (1.0 - plan.subsampling.rate) ** steps
    amplified = amplify_poisson(base_fn, SubsamplingSpec(q_eff), orders)
    budget, _ = rdp_to_adp(compose(amplified, plan.rounds), delta)
    return budget


def fuse_steps(updates: Sequence[np.ndarray], factor: int,
               fused_clip: float) -> list[np.ndarray]:
    """Group consecutive clipped step contributions into fused steps.

    Each input must have L2 norm at most fused_clip / factor so every fused
    contribution is bounded by fused_clip via the triangle inequality.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    if fused_clip <= 0:
        raise ValueError(f"fused_clip must be positive, got {fused_clip}")
    updates = [np.asarray(u, dtype=float) for u in updates]
    if len(updates) % factor != 0:
        raise FusionError(
            f"{len(updates)} steps cannot be fused in groups of {factor}")
    bound = fused_clip / factor
    for i, u in enumerate(updates):
        norm = float(np.linalg.norm(u))
        if norm > bound * (1 + 1e-9):
            raise ValueError(
                f"step {i} violates the clipping contract: norm {norm:.6g} "
                f"exceeds {bound:.6g}")
    return [sum(updates[i:i + factor]) for i in range(0, len(updates), factor)]


def hbc_rescale(sigma_per_client: float, n_clients: int,
                colluders_tolerated: int) -> float:
    """Per-client sigma so the honest clients alone provide the joint noise.

    With c tolerated colluders the remaining N - c honest contributions must
    reach the variance N clients originally supplied:
    sigma' = sigma * sqrt(N / (N - c)).
    """
    if sigma_per_client <= 0:
        raise ValueError(f"sigma_per_client must be positive, got {sigma_per_client}")
    if int(n_clients) != n_clients or n_clients < 1:
        raise ValueError(f"n_clients must be a positive integer, got {n_clients}")
    if colluders_tolerated < 0 or int(colluders_tolerated) != colluders_tolerated:
        raise TrustModelError(
            f"colluders_tolerated must be a nonnegative integer, got {colluders_tolerated}")
    if colluders_tolerated >= n_clients:
        raise TrustModelError(
            f"cannot tolerate {colluders_tolerated} colluders among {n_clients} clients")
    return sigma_per_client * math.sqrt(n_clients / (n_clients - colluders_tolerated))
