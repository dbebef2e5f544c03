"""Lossy quantization stage.

Stochastic fixed-point quantization of L2-normalized vectors (the lossy half
of Federated QSGD), its inverse, an 8-bit float baseline quantizer, and the
closed-form expected variance of a weighted sum of quantized parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class QuantizationError(ValueError):
    """Raised for inputs a quantizer cannot represent."""


@dataclass(frozen=True)
class QuantizedUpdate:
    """Sign/bin representation of a vector quantized at level ``level``.

    ``bins`` are nonnegative integers in ``[0, level]``; ``signs`` are +1 or -1.
    """

    level: int
    norm: float
    signs: np.ndarray
    bins: np.ndarray

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.int64)
        # the sign of a zero bin carries no information; keep it canonical
        signs = np.where(bins == 0, 1, np.asarray(self.signs)).astype(np.int8)
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "bins", bins)
        if self.level < 1:
            raise QuantizationError(f"level must be >= 1, got {self.level}")
        if signs.shape != bins.shape or bins.ndim != 1:
            raise QuantizationError("signs and bins must be 1-D arrays of equal length")
        if not np.isfinite(self.norm) or self.norm < 0:
            raise QuantizationError(f"norm must be finite and >= 0, got {self.norm}")
        if bins.size and (bins.min() < 0 or bins.max() > self.level):
            raise QuantizationError(f"bin outside [0, {self.level}]")
        if signs.size and not np.all(np.abs(signs) == 1):
            raise QuantizationError("signs must be +1 or -1")
        if self.norm == 0 and np.any(bins):
            raise QuantizationError("zero norm with nonzero bins")

    @property
    def dim(self) -> int:
        return int(self.bins.size)

    def __eq__(self, other):
        if not isinstance(other, QuantizedUpdate):
            return NotImplemented
        return (
            self.level == other.level
            and self.norm == other.norm
            and np.array_equal(self.bins, other.bins)
            and np.array_equal(self.signs, other.signs)
        )

    __hash__ = None


def _as_vector(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise QuantizationError(f"expected a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.flatnonzero(~np.isfinite(arr))
        raise QuantizationError(f"non-finite entries at indices {bad[:5].tolist()}")
    return arr


def stochastic_round(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Round nonnegative ``x`` to floor(x) + Bernoulli(frac(x)), elementwise.

    Draws exactly one uniform per element, so the result is unbiased.
    """
    x = np.asarray(x, dtype=np.float64)
    low = np.floor(x)
    frac = x - low
    return (low + (rng.random(x.shape) < frac)).astype(np.int64)


def quantize_fixed_point(p, q: int, rng: np.random.Generator) -> QuantizedUpdate:
    """Quantize ``p / ||p||_2`` into ``q`` stochastic bins per sign.

    A zero vector maps to all-zero bins with positive signs. The stored norm is
    rounded to binary32, the precision it travels with on the wire.
    """
    if int(q) != q or q < 1:
        raise QuantizationError(f"quantization level must be a positive integer, got {q}")
    q = int(q)
    p = _as_vector(p)
    norm = float(np.linalg.norm(p))
    signs = np.where(p < 0, -1, 1).astype(np.int8)
    if norm == 0.0:
        return QuantizedUpdate(q, 0.0, np.ones(p.size, dtype=np.int8), np.zeros(p.size, dtype=np.int64))
    # multiply before dividing so integer-valued magnitudes stay exact
    scaled = np.minimum(np.abs(p) * q / norm, q)
    bins = stochastic_round(scaled, rng)
    return QuantizedUpdate(q, float(np.float32(norm)), signs, bins)


def dequantize(u: QuantizedUpdate) -> np.ndarray:
    if u.bins.size and u.bins.max() > u.level:
        raise QuantizationError("corrupt update: bin exceeds level")
    return u.signs * (u.norm * u.bins) / u.level


# 1-5-2 float: bias 15, subnormals, exponent field 31 reserved for inf/nan.
FP8_MANTISSA_BITS = 2
FP8_EXPONENT_BIAS = 15
FP8_MIN_NORMAL_EXP = 1 - FP8_EXPONENT_BIAS
FP8_MAX = (2.0 - 2.0**-FP8_MANTISSA_BITS) * 2.0**15


def quantize_fp8(p) -> np.ndarray:
    """Round each entry to the nearest 1-5-2 float (ties to even), saturating."""
    p = _as_vector(p)
    mag = np.abs(p)
    _, exp = np.frexp(mag)
    # frexp gives mag = m * 2**exp with m in [0.5, 1)
    exp = np.maximum(exp - 1, FP8_MIN_NORMAL_EXP)
    quantum = np.ldexp(1.0, exp - FP8_MANTISSA_BITS)
    rounded = np.minimum(np.round(mag / quantum) * quantum, FP8_MAX)
    return np.copysign(rounded, p) + 0.0


FP8_PAYLOAD_BYTES_PER_COORD = 1


@dataclass(frozen=True)
class VarianceSpec:
    weights: Sequence[float]
    levels: Sequence[int]
    halfrange: float

    def __post_init__(self):
        if len(self.weights) != len(self.levels):
            raise QuantizationError("weights and levels differ in length")
        if len(self.weights) == 0:
            raise QuantizationError("empty variance spec")
        if any(w <= 0 for w in self.weights):
            raise QuantizationError("weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise QuantizationError(f"weights sum to {sum(self.weights)}, expected 1")
        if any(q <= 0 for q in self.levels):
            raise QuantizationError("levels must be positive")
        if self.halfrange <= 0:
            raise QuantizationError("halfrange must be positive")


def accumulation_variance(spec: VarianceSpec) -> float:
    """Expected variance of the weighted sum of independently quantized
    parameters drawn uniformly from ``[-t, t]``: ``t**2 / 6 * sum(w**2 / q**2)``.
    """
    w = np.asarray(spec.weights, dtype=np.float64)
    q = np.asarray(spec.levels, dtype=np.float64)
    return float(spec.halfrange**2 / 6.0 * np.sum(w**2 / q**2))


def quantize_in_range(p: np.ndarray, q: int, halfrange: float, rng: np.random.Generator) -> np.ndarray:
    """Fixed-point quantize values in ``[-halfrange, halfrange]`` onto the grid
    of step ``halfrange / q``, returning the quantized real values.

    This is the per-parameter quantizer analysed by ``accumulation_variance``.
    """
    p = np.asarray(p, dtype=np.float64)
    step = halfrange / q
    return np.sign(p) * stochastic_round(np.abs(p) / step, rng) * step
