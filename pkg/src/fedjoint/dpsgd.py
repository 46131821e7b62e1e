"""Per-client local optimizer: Poisson minibatches, per-sample clipping,
per-step noise, and pseudo-gradient production.

One local round runs S steps of DP-SGD on a private copy of the global
parameters and returns the parameter delta. With Gaussian noise everything
stays real-valued; with Skellam noise the clipped-gradient sum is quantized
to the fixed-point grid, integer noise is added in the ring domain, and the
local update applies the decoded value, so the transmitted integers and the
locally applied updates agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .accounting import MechanismSpec, NoiseFamily
from .data_models import LogisticModel
from .mechanisms import (
    NoiseDraw,
    RingElementVector,
    SeedRecord,
    check_headroom,
    int_to_ring,
    quantize_checked,
    sample_gaussian,
    sample_skellam,
)

__all__ = [
    "LocalConfig",
    "LocalStepRecord",
    "PseudoGradient",
    "clip",
    "poisson_minibatch",
    "local_round",
]


def clip(gradient: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale the vector to L2 norm at most clip_norm: g * min(1, C / ||g||)."""
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    g = np.asarray(gradient, dtype=float)
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy()
    return g * (clip_norm / norm)


def poisson_minibatch(n: int, rate: float, record: SeedRecord) -> np.ndarray:
    """Each of the n indices enters independently with probability rate."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    if rate == 0.0:
        return np.empty(0, dtype=int)
    if rate == 1.0:
        return np.arange(n)
    mask = record.generator().random(n) < rate
    return np.flatnonzero(mask)


@dataclass
class LocalStepRecord:
    """Instrumentation for one local step."""

    step: int
    expected_batch_size: float
    realized_batch_size: int
    grad_sum: np.ndarray
    noise: NoiseDraw
    learning_rate: float
    clipped_norm_max: float


@dataclass
class PseudoGradient:
    """A client's round update: delta = -sum_s gamma_s (g_s + xi_s).

    In discrete mode `ring` carries the noisy integer sum over steps and
    `gamma` the (public, constant) learning rate, with
    delta = -gamma * decode(ring); the trusted aggregator consumes `ring`.
    """

    client_id: int
    round_index: int
    delta: np.ndarray
    ring: RingElementVector | None = None
    gamma: float | None = None
    step_records: list[LocalStepRecord] | None = None


@dataclass(frozen=True)
class LocalConfig:
    """Resolved per-client configuration for one round of local steps."""

    steps: int
    sampling_rate: float
    clip_norm: float
    learning_rate: float | tuple[float, ...]
    mechanism: MechanismSpec
    ring_width: int = 64
    max_clients: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.sampling_rate <= 1.0:
            raise ValueError("sampling_rate must be in [0, 1]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.max_clients < 1:
            raise ValueError("max_clients must be >= 1")

    @property
    def discrete(self) -> bool:
        return self.mechanism.family == NoiseFamily.SKELLAM

    def rates(self) -> list[float]:
        lr = self.learning_rate
        if isinstance(lr, (int, float)):
            return [float(lr)] * self.steps
        lrs = [float(v) for v in lr]
        if len(lrs) != self.steps:
            raise ValueError(f"need {self.steps} learning rates, got {len(lrs)}")
        if self.discrete and len(set(lrs)) > 1:
            raise ValueError(
                "discrete mode keeps pseudo-gradients on the fixed-point grid and "
                "therefore requires a constant learning rate within the round")
        return lrs


def _clipped_grad_sum(model: LogisticModel, theta: np.ndarray,
                      features: np.ndarray, labels: np.ndarray,
                      clip_norm: float) -> tuple[np.ndarray, float]:
    grads = model.per_sample_grads(theta, features, labels)
    norms = np.linalg.norm(grads, axis=1)
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    clipped_norms = norms * factors
    if clipped_norms.size and clipped_norms.max() > clip_norm * (1 + 1e-9):
        raise AssertionError("clipping contract violated")
    return grads.T @ factors, float(clipped_norms.max(initial=0.0))


def local_round(theta_start: np.ndarray, features: np.ndarray, labels: np.ndarray,
                model: LogisticModel, config: LocalConfig, run_seed: int,
                round_index: int, client_id: int,
                collect_records: bool = False) -> PseudoGradient:
    """Run S noised local steps and return the pseudo-gradient.

    Every step samples a fresh Poisson minibatch (an empty batch still
    executes as a noise-only step), sums per-sample clipped gradients, adds
    mechanism noise, and descends. Gradients must stay finite; in discrete
    mode a headroom violation aborts the round.
    """
    theta = np.asarray(theta_start, dtype=float).copy()
    n = len(labels)
    lrs = config.rates()
    mech = config.mechanism
    dim = model.dim
    discrete = config.discrete
    scale = mech.fixedpoint_scale
    acc = np.zeros(dim, dtype=np.int64) if discrete else None
    records: list[LocalStepRecord] = []

    for s in range(config.steps):
        batch = poisson_minibatch(
            n, config.sampling_rate,
            SeedRecord(run_seed, round_index, client_id, s, "batch"))
        if batch.size:
            grad_sum, worst = _clipped_grad_sum(
                model, theta, features[batch], labels[batch], config.clip_norm)
        else:
            grad_sum, worst = np.zeros(dim), 0.0
        if not np.isfinite(grad_sum).all():
            raise FloatingPointError(f"non-finite gradient at local step {s}")

        noise_record = SeedRecord(run_seed, round_index, client_id, s, "noise")
        if discrete:
            g_int = quantize_checked(grad_sum, scale, config.ring_width,
                                     config.max_clients)
            noise = sample_skellam(dim, mech.poisson_param, noise_record)
            noisy = g_int + noise.values
            acc += noisy
            theta -= lrs[s] * (noisy / scale)
        else:
            noise = sample_gaussian(
                dim, mech.noise_multiplier * mech.clip_norm, noise_record)
            noisy = grad_sum + noise.values
            theta -= lrs[s] * noisy
        if collect_records:
            records.append(LocalStepRecord(
                step=s, expected_batch_size=config.sampling_rate * n,
                realized_batch_size=int(batch.size), grad_sum=grad_sum,
                noise=noise, learning_rate=lrs[s], clipped_norm_max=worst))

    if discrete:
        check_headroom(acc, config.ring_width, config.max_clients)
        ring = int_to_ring(acc, scale, config.ring_width)
        delta = -lrs[0] * (acc / scale)
        return PseudoGradient(client_id=client_id, round_index=round_index,
                              delta=delta, ring=ring, gamma=lrs[0],
                              step_records=records if collect_records else None)
    return PseudoGradient(client_id=client_id, round_index=round_index,
                          delta=theta - np.asarray(theta_start, dtype=float),
                          step_records=records if collect_records else None)
