"""Noise samplers and the fixed-point / finite-ring codec.

Every sampler is a pure function of a seed record, so client computations
reproduce bit-for-bit regardless of scheduling. The codec maps reals onto
a two's-complement ring of width 16/32/64 at an integer fixed-point scale;
ring addition of encodings equals the encoding of the sum whenever the
true sum stays inside the decode window.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RingOverflowError",
    "AggregationError",
    "SeedRecord",
    "NoiseDraw",
    "RingElementVector",
    "sample_gaussian",
    "sample_skellam",
    "check_headroom",
    "quantize_checked",
    "int_to_ring",
    "encode_fixed",
    "decode_fixed",
    "aggregate_ring",
]

_RING_WIDTHS = (16, 32, 64)


class RingOverflowError(OverflowError):
    """A value does not fit the declared ring headroom."""


class AggregationError(ValueError):
    """Ring vectors with mismatched shape, width, or scale."""


@dataclass(frozen=True)
class SeedRecord:
    """Where a random draw comes from: (run, round, client, step, purpose).

    The generator seed is a hash of all five fields, so draws are stable
    across thread schedules and immune to accidental stream sharing.
    """

    run_seed: int
    round_index: int = 0
    client_id: int = 0
    step: int = 0
    label: str = "noise"

    def generator(self) -> np.random.Generator:
        key = f"{self.run_seed}|{self.round_index}|{self.client_id}|{self.step}|{self.label}"
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class NoiseDraw:
    values: np.ndarray
    record: SeedRecord


def sample_gaussian(dim: int, std: float, record: SeedRecord) -> NoiseDraw:
    """iid N(0, std^2) per coordinate, deterministic given the record."""
    if std < 0:
        raise ValueError(f"std must be nonnegative, got {std}")
    if std == 0:
        return NoiseDraw(np.zeros(dim), record)
    return NoiseDraw(record.generator().standard_normal(dim) * std, record)


def sample_skellam(dim: int, poisson_param: float, record: SeedRecord) -> NoiseDraw:
    """Difference of two Poisson(mu) draws per coordinate: mean 0, variance 2 mu."""
    if poisson_param < 0:
        raise ValueError(f"poisson_param must be nonnegative, got {poisson_param}")
    if poisson_param == 0:
        return NoiseDraw(np.zeros(dim, dtype=np.int64), record)
    rng = record.generator()
    x = rng.poisson(poisson_param, dim)
    y = rng.poisson(poisson_param, dim)
    return NoiseDraw(x.astype(np.int64) - y.astype(np.int64), record)


@dataclass(frozen=True)
class RingElementVector:
    """Unsigned residues mod 2^width encoding signed fixed-point values."""

    values: np.ndarray
    width: int
    scale: int

    def __post_init__(self):
        if self.width not in _RING_WIDTHS:
            raise ValueError(f"width must be one of {_RING_WIDTHS}, got {self.width}")
        if int(self.scale) < 1:
            raise ValueError(f"scale must be a positive integer, got {self.scale}")
        values = np.asarray(self.values, dtype=np.uint64)
        if self.width < 64 and (values >> np.uint64(self.width)).any():
            raise ValueError(f"values must be below 2^{self.width}")
        object.__setattr__(self, "values", values)

    @property
    def dimension(self) -> int:
        return self.values.size


def _headroom_bound(width: int, headroom_clients: int) -> float:
    # no wraparound is possible when every summand fits one (N_max+1)-th of
    # the signed half-range
    return 2.0 ** (width - 1) / (headroom_clients + 1)


def check_headroom(ints: np.ndarray, width: int, headroom_clients: int) -> None:
    """Verify integer magnitudes stay below 2^(width-1) / (headroom_clients + 1)."""
    if headroom_clients < 0:
        raise ValueError("headroom_clients must be nonnegative")
    bound = _headroom_bound(width, headroom_clients)
    worst = float(np.max(np.abs(ints), initial=0.0))
    if worst >= bound:
        raise RingOverflowError(
            f"fixed-point magnitude {worst:.6g} reaches the headroom bound "
            f"{bound:.6g} (width {width}, {headroom_clients} aggregation slots)")


def quantize_checked(values: np.ndarray, scale: int, width: int,
                     headroom_clients: int = 0) -> np.ndarray:
    """Round to the nearest 1/scale grid point; signed int64 result."""
    if width not in _RING_WIDTHS:
        raise ValueError(f"width must be one of {_RING_WIDTHS}, got {width}")
    if int(scale) < 1:
        raise ValueError(f"scale must be a positive integer, got {scale}")
    scaled = np.round(np.asarray(values, dtype=float) * scale)
    check_headroom(scaled, width, headroom_clients)
    return scaled.astype(np.int64)


def encode_fixed(values: np.ndarray, scale: int, width: int,
                 headroom_clients: int = 0) -> RingElementVector:
    """Round to the nearest 1/scale grid point and map into the ring.

    Raises RingOverflowError if any |x| * scale reaches the declared
    headroom bound 2^(width-1) / (headroom_clients + 1).
    """
    return int_to_ring(quantize_checked(values, scale, width, headroom_clients),
                       scale, width)


def int_to_ring(ints: np.ndarray, scale: int, width: int) -> RingElementVector:
    """Two's-complement wrap of signed integers into the unsigned ring."""
    unsigned = np.asarray(ints, dtype=np.int64).astype(np.uint64)
    if width < 64:
        unsigned = unsigned & np.uint64((1 << width) - 1)
    return RingElementVector(values=unsigned, width=width, scale=int(scale))


def decode_fixed(ring: RingElementVector) -> np.ndarray:
    """Invert the encoding over the window (-2^(w-1)/s, 2^(w-1)/s)."""
    v = ring.values
    if ring.width == 64:
        signed = v.astype(np.int64)
    else:
        half = np.uint64(1 << (ring.width - 1))
        full = 1 << ring.width
        signed = np.where(v >= half, v.astype(np.int64) - full, v.astype(np.int64))
    return signed.astype(float) / ring.scale


def aggregate_ring(vectors: list[RingElementVector]) -> RingElementVector:
    """Coordinate-wise modular sum; the only inter-client data path."""
    if not vectors:
        raise AggregationError("nothing to aggregate")
    first = vectors[0]
    total = first.values.copy()
    with np.errstate(over="ignore"):
        for other in vectors[1:]:
            if (other.width != first.width or other.scale != first.scale
                    or other.dimension != first.dimension):
                raise AggregationError(
                    "all ring vectors must share width, scale, and dimension")
            total = total + other.values
    if first.width < 64:
        total = total & np.uint64((1 << first.width) - 1)
    return RingElementVector(values=total, width=first.width, scale=first.scale)
