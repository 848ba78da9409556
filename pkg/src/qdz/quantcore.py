"""Bucketed linear scaling, uniform/non-uniform quantizers and the
quantization-point gradient.

Every function here is pure: randomness only enters through an explicit
``numpy.random.Generator`` argument. All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"
UNIFORM = "uniform"
NONUNIFORM = "nonuniform"


class QuantizationError(ValueError):
    """Raised when an input violates a quantizer's contract."""


class CorruptionError(QuantizationError):
    """Raised when a quantized vector holds out-of-range indices."""


@dataclass(frozen=True)
class BucketScaling:
    bucket_size: int
    alphas: np.ndarray
    betas: np.ndarray
    original_len: int

    @property
    def n_buckets(self) -> int:
        return len(self.alphas)

    def per_element(self, values: np.ndarray) -> np.ndarray:
        """Broadcast a per-bucket array to one entry per element."""
        return np.repeat(values, self.bucket_size)[: self.original_len]


@dataclass(frozen=True)
class ScaledVector:
    values: np.ndarray
    scaling: BucketScaling


@dataclass(frozen=True)
class UniformScheme:
    levels: int
    mode: str = DETERMINISTIC

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.mode not in (DETERMINISTIC, STOCHASTIC):
            raise ValueError(f"unknown rounding mode {self.mode!r}")

    @classmethod
    def from_bits(cls, bits: int, mode: str = DETERMINISTIC) -> "UniformScheme":
        # s = 2^b - 1 intervals -> 2^b grid points, indices fit in b bits
        return cls(2**bits - 1, mode)


@dataclass
class QuantizedVector:
    """Level indices plus everything needed to reconstruct ``Q(v)``.

    ``levels`` is the interval count ``s`` for uniform schemes and the
    number of points for non-uniform ones.
    """

    indices: np.ndarray
    scaling: BucketScaling
    scheme: str
    levels: int
    points: np.ndarray | None = None
    bits: int = field(default=0)

    def __post_init__(self):
        if not self.bits:
            self.bits = index_bits(self.scheme, self.levels)

    @property
    def n_symbols(self) -> int:
        return self.levels + 1 if self.scheme == UNIFORM else self.levels


def index_bits(scheme: str, levels: int) -> int:
    """Fixed width needed to store one level index."""
    n_symbols = levels + 1 if scheme == UNIFORM else levels
    return max(1, math.ceil(math.log2(n_symbols)))


def linear_scale(v, bucket_size: int) -> ScaledVector:
    """Map each bucket of ``v`` affinely onto [0, 1] using its min and range."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot scale an empty vector")
    if bucket_size < 1:
        raise ValueError(f"bucket_size must be >= 1, got {bucket_size}")
    n = v.size
    n_buckets = -(-n // bucket_size)
    pad = n_buckets * bucket_size - n
    padded = np.concatenate([v, np.full(pad, np.nan)]).reshape(n_buckets, bucket_size)
    betas = np.nanmin(padded, axis=1)
    alphas = np.nanmax(padded, axis=1) - betas
    scaling = BucketScaling(bucket_size, alphas, betas, n)

    a = scaling.per_element(alphas)
    b = scaling.per_element(betas)
    safe = np.where(a > 0, a, 1.0)
    values = np.where(a > 0, (v - b) / safe, 0.0)
    return ScaledVector(np.clip(values, 0.0, 1.0), scaling)


def inverse_scale(sv: ScaledVector) -> np.ndarray:
    sc = sv.scaling
    values = np.asarray(sv.values, dtype=np.float64)
    if values.size != sc.original_len:
        raise ValueError("scaled values do not match scaling length")
    return sc.per_element(sc.alphas) * values + sc.per_element(sc.betas)


def _check_unit_interval(values: np.ndarray) -> None:
    if values.size and (np.any(values < 0.0) or np.any(values > 1.0) or np.any(np.isnan(values))):
        raise QuantizationError("scaled values must lie in [0, 1]")


def uniform_quantize(sv: ScaledVector, scheme: UniformScheme,
                     rng: np.random.Generator | None = None) -> QuantizedVector:
    """Round scaled values onto the grid {0, 1/s, ..., 1}.

    Deterministic mode rounds up only when the fractional part is strictly
    above one half. Stochastic mode rounds up with probability equal to the
    fractional part, drawing element ``i`` from the ``i``-th variate of ``rng``.
    """
    values = np.asarray(sv.values, dtype=np.float64)
    _check_unit_interval(values)
    s = scheme.levels
    scaled = values * s
    lower = np.floor(scaled)
    frac = scaled - lower
    if scheme.mode == DETERMINISTIC:
        xi = frac > 0.5
    else:
        if rng is None:
            raise QuantizationError("stochastic quantization requires an rng")
        xi = rng.random(values.size) < frac
    indices = lower.astype(np.int64) + xi
    return QuantizedVector(indices, sv.scaling, UNIFORM, s)


def nonuniform_quantize(sv: ScaledVector, points) -> QuantizedVector:
    """Assign every scaled value to its nearest point (lowest index on ties)."""
    p = np.asarray(points, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("need at least one quantization point")
    values = np.asarray(sv.values, dtype=np.float64)
    # argmin returns the first minimum, which gives the lowest-index tie rule
    indices = np.abs(values[:, None] - p[None, :]).argmin(axis=1)
    return QuantizedVector(indices.astype(np.int64), sv.scaling, NONUNIFORM, p.size, p.copy())


def quantize(v, bucket_size: int, scheme: UniformScheme | None = None, *,
             points=None, rng: np.random.Generator | None = None) -> QuantizedVector:
    """Scale then quantize, uniformly (``scheme``) or onto ``points``."""
    sv = linear_scale(v, bucket_size)
    if points is not None:
        return nonuniform_quantize(sv, points)
    if scheme is None:
        raise ValueError("either a uniform scheme or points must be given")
    return uniform_quantize(sv, scheme, rng)


def scaled_levels(qv: QuantizedVector) -> np.ndarray:
    """The quantized values in scaled [0, 1] space."""
    idx = np.asarray(qv.indices)
    if idx.size and (idx.min() < 0 or idx.max() >= qv.n_symbols):
        raise CorruptionError(
            f"level index out of range [0, {qv.n_symbols}) in quantized vector")
    if qv.scheme == UNIFORM:
        return idx / qv.levels
    return np.asarray(qv.points, dtype=np.float64)[idx]


def dequantize(qv: QuantizedVector) -> np.ndarray:
    return inverse_scale(ScaledVector(scaled_levels(qv), qv.scaling))


def quant_point_gradient(qv: QuantizedVector, grad_wq) -> np.ndarray:
    """Gradient of the loss with respect to the non-uniform points.

    Each weight quantized to point ``j`` contributes its bucket range times
    the gradient flowing into its dequantized value; points nobody uses get
    exactly zero.
    """
    if qv.scheme != NONUNIFORM:
        raise ValueError("point gradient is only defined for non-uniform quantization")
    g = np.asarray(grad_wq, dtype=np.float64).ravel()
    if g.size != qv.scaling.original_len:
        raise ValueError(
            f"gradient length {g.size} does not match vector length {qv.scaling.original_len}")
    alpha = qv.scaling.per_element(qv.scaling.alphas)
    return np.bincount(qv.indices, weights=alpha * g, minlength=qv.levels)


def quantile_init(v, s: int, bucket_size: int) -> np.ndarray:
    """Starting points at the (j - 1/2)/s quantiles of the scaled weights."""
    if s < 1:
        raise ValueError(f"need at least one point, got s={s}")
    values = linear_scale(v, bucket_size).values
    probs = (np.arange(1, s + 1) - 0.5) / s
    return np.clip(np.quantile(values, probs, method="linear"), 0.0, 1.0)


def uniform_init(s: int) -> np.ndarray:
    """Evenly spaced starting points including both endpoints."""
    if s < 1:
        raise ValueError(f"need at least one point, got s={s}")
    if s == 1:
        return np.array([0.5])
    return np.linspace(0.0, 1.0, s)
