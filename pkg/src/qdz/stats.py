"""Monte-Carlo checks on stochastic-rounding noise in scalar products.

For fixed weights ``v`` and inputs ``x`` the error
``eps = Q(v) @ x - v @ x`` is a sum of independent zero-mean terms, so
``eps / s_n`` should look standard normal once ``n`` is large. ``s_n`` is
computed exactly from the two-point law of each rounded element.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .quantcore import linear_scale
from .rng import stream


class DegenerateVarianceError(ValueError):
    """The analytic noise variance is zero (every element sits on the grid)."""


@dataclass(frozen=True)
class NoiseStudyConfig:
    """``distribution`` is ``("uniform", low, high)`` or
    ``("gaussian", mean, std)``; gaussians are clipped at four standard
    deviations so every element stays bounded."""

    n: int = 10_000
    s: int = 15
    bucket_size: int = 256
    trials: int = 10_000
    quantize_inputs: bool = False
    distribution: tuple = ("uniform", -1.0, 1.0)
    resample: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.s < 1 or self.trials < 1 or self.bucket_size < 1:
            raise ValueError("n, s, trials and bucket_size must all be positive")
        if self.distribution[0] not in ("uniform", "gaussian"):
            raise ValueError(f"unknown distribution {self.distribution[0]!r}")

    @property
    def label(self) -> str:
        kind, a, b = self.distribution
        return f"{kind}({a:g},{b:g})"


def draw(cfg: NoiseStudyConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    kind, a, b = cfg.distribution
    if kind == "uniform":
        return rng.uniform(a, b, cfg.n), rng.uniform(a, b, cfg.n)
    lo, hi = a - 4 * b, a + 4 * b
    return (np.clip(rng.normal(a, b, cfg.n), lo, hi), np.clip(rng.normal(a, b, cfg.n), lo, hi))


@dataclass(frozen=True)
class _TwoPoint:
    """Per-element law of stochastic rounding: ``low`` or ``low + step``,
    the latter with probability ``frac``."""

    low: np.ndarray
    step: np.ndarray
    frac: np.ndarray

    @classmethod
    def of(cls, v: np.ndarray, s: int, bucket_size: int) -> "_TwoPoint":
        sv = linear_scale(v, bucket_size)
        sc = sv.scaling
        alpha = sc.per_element(sc.alphas)
        scaled = sv.values * s
        lower = np.floor(scaled)
        return cls(alpha * lower / s + sc.per_element(sc.betas), alpha / s, scaled - lower)

    @property
    def mean(self) -> np.ndarray:
        return self.low + self.step * self.frac

    @property
    def var(self) -> np.ndarray:
        return self.step**2 * self.frac * (1.0 - self.frac)

    def sample(self, u: np.ndarray) -> np.ndarray:
        return self.low + self.step * (u < self.frac)


def analytic_sn(v, x, s: int, bucket_size: int, quantize_inputs: bool = False) -> float:
    """Standard deviation of ``eps`` from the exact per-element variances."""
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    qv = _TwoPoint.of(v, s, bucket_size)
    if not quantize_inputs:
        return float(np.sqrt(np.sum(x * x * qv.var)))
    qx = _TwoPoint.of(x, s, bucket_size)
    # Var[AB] = E[A^2] E[B^2] - (E[A] E[B])^2 for independent A, B
    ea2 = qv.var + qv.mean**2
    eb2 = qx.var + qx.mean**2
    return float(np.sqrt(np.sum(ea2 * eb2 - (qv.mean * qx.mean) ** 2)))


def noise_samples(cfg: NoiseStudyConfig) -> np.ndarray:
    """Standardized noise ``eps / s_n`` for each trial.

    Trial ``t`` draws from the stream keyed by ``(seed, t)``. Raises
    ``DegenerateVarianceError`` when ``s_n`` is zero.
    """
    out = np.empty(cfg.trials)
    fixed = None if cfg.resample else draw(cfg, stream(cfg.seed, 0xF1E1D))
    state = None
    for t in range(cfg.trials):
        rng = stream(cfg.seed, 0x7E57, t)
        if fixed is None:
            v, x = draw(cfg, rng)
            state = None
        else:
            v, x = fixed
        if state is None:
            sn = analytic_sn(v, x, cfg.s, cfg.bucket_size, cfg.quantize_inputs)
            if sn == 0.0:
                raise DegenerateVarianceError(
                    "noise variance is zero: every element already lies on the quantization grid")
            qv = _TwoPoint.of(v, cfg.s, cfg.bucket_size)
            qx = _TwoPoint.of(x, cfg.s, cfg.bucket_size) if cfg.quantize_inputs else None
            exact = float(v @ x)
            state = (sn, qv, qx, exact)
        sn, qv, qx, exact = state
        u = rng.random(2 * cfg.n if cfg.quantize_inputs else cfg.n)
        a = qv.sample(u[: cfg.n])
        b = qx.sample(u[cfg.n :]) if qx is not None else x
        out[t] = (a @ b - exact) / sn
    return out


@dataclass(frozen=True)
class Diagnostics:
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    ks_statistic: float
    n_samples: int


def normality_diagnostics(samples, min_samples: int = 1000) -> Diagnostics:
    """Sample moments plus the KS distance to the exact standard normal."""
    z = np.asarray(samples, dtype=np.float64).ravel()
    if z.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {z.size}")
    var = z.var()
    # rounding leaves a tiny residual variance on constant input
    if not var > 1e-24 * max(1.0, float(np.mean(z * z))):
        raise DegenerateVarianceError("samples have zero variance")
    return Diagnostics(
        mean=float(z.mean()),
        variance=float(var),
        skewness=float(sps.skew(z)),
        excess_kurtosis=float(sps.kurtosis(z, fisher=True)),
        ks_statistic=float(sps.kstest(z, "norm").statistic),
        n_samples=int(z.size),
    )


@dataclass(frozen=True)
class MomentReport:
    second: np.ndarray
    third: np.ndarray
    second_bounds: tuple[np.ndarray, np.ndarray]
    third_bounds: tuple[np.ndarray, np.ndarray]
    violations: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def moment_bound_check(scaled, s: int) -> MomentReport:
    """Exact second and third moments of stochastic rounding on [0, 1].

    Written as ``l^m + k * ((l+1)^m - l^m)`` with ``0 <= k < 1`` so the
    bounds ``l^m/s^m <= E <= (l+1)^m/s^m`` survive floating-point rounding.
    """
    v = np.asarray(scaled, dtype=np.float64).ravel()
    if v.size and (v.min() < 0 or v.max() > 1):
        raise ValueError("scaled values must lie in [0, 1]")
    l = np.floor(v * s)
    k = v * s - l
    second = (l * l + k * (2 * l + 1)) / s**2
    third = (l**3 + k * (3 * l * l + 3 * l + 1)) / s**3
    lo2, hi2 = l * l / s**2, (l + 1) ** 2 / s**2
    lo3, hi3 = l**3 / s**3, (l + 1) ** 3 / s**3
    bad = (second < lo2) | (second > hi2) | (third < lo3) | (third > hi3)
    return MomentReport(second, third, (lo2, hi2), (lo3, hi3), int(bad.sum()))


REPORT_HEADER = ["n", "s", "bucket_size", "distribution", "quantize_inputs", "trials",
                 "mean", "variance", "skewness", "excess_kurtosis", "ks_statistic"]


def study_report(cells) -> str:
    """CSV with one row per ``(NoiseStudyConfig, Diagnostics)`` pair."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for cfg, d in cells:
        w.writerow([cfg.n, cfg.s, cfg.bucket_size, cfg.label, int(cfg.quantize_inputs), cfg.trials,
                    f"{d.mean:.6g}", f"{d.variance:.6g}", f"{d.skewness:.6g}",
                    f"{d.excess_kurtosis:.6g}", f"{d.ks_statistic:.6g}"])
    return buf.getvalue()
