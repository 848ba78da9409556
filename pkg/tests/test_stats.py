import math

import numpy as np
import pytest
from scipy.special import ndtri

from qdz.stats import (
    DegenerateVarianceError,
    NoiseStudyConfig,
    analytic_sn,
    moment_bound_check,
    noise_samples,
    normality_diagnostics,
    study_report,
)


def ks_by_hand(z):
    z = np.sort(z)
    n = len(z)
    cdf = np.array([0.5 * (1 + math.erf(v / math.sqrt(2))) for v in z])
    return max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))


class TestNoiseSamples:
    def test_on_grid_is_degenerate(self, monkeypatch):
        import qdz.stats as st

        s = 4
        rng = np.random.default_rng(0)
        v = rng.integers(0, s + 1, 64) / s
        v[0], v[1] = 0.0, 1.0
        monkeypatch.setattr(st, "draw", lambda cfg, rng_: (v, rng.normal(size=64)))
        with pytest.raises(DegenerateVarianceError):
            noise_samples(NoiseStudyConfig(n=64, s=s, trials=10))

    def test_single_random_term(self, monkeypatch):
        # n=1 (or 2) always scales to the grid endpoints, so the smallest
        # non-degenerate case is one interior element among three
        import qdz.stats as st

        v = np.array([0.0, 0.3, 1.0])
        x = np.array([0.7, -1.3, 2.0])
        monkeypatch.setattr(st, "draw", lambda cfg, rng_: (v, x))
        z = noise_samples(NoiseStudyConfig(n=3, s=4, trials=4000))
        values = np.unique(np.round(z, 12))
        assert len(values) == 2
        k = 0.2
        # standardized Bernoulli(k): (xi - k) / sqrt(k(1-k)), sign follows x
        up, down = np.sign(x[1]) * np.array([1 - k, -k]) / math.sqrt(k * (1 - k))
        np.testing.assert_allclose(values, sorted([up, down]), atol=1e-9)
        # exact two-point law has mean 0 and variance 1
        assert k * up + (1 - k) * down == pytest.approx(0, abs=1e-12)
        assert k * up**2 + (1 - k) * down**2 == pytest.approx(1)
        p_up = np.mean(np.isclose(z, up))
        assert abs(p_up - k) <= 4 * math.sqrt(k * (1 - k) / len(z))

    def test_moments_at_scale(self):
        cfg = NoiseStudyConfig(n=2000, s=15, trials=4000, seed=3)
        z = noise_samples(cfg)
        assert abs(z.mean()) <= 4 / math.sqrt(cfg.trials)
        assert abs(z.var() - 1) <= 0.08

    def test_quantized_inputs_sn_matches_empirical(self):
        cfg = NoiseStudyConfig(n=500, s=7, trials=6000, quantize_inputs=True, seed=5)
        z = noise_samples(cfg)
        assert abs(z.std() - 1) <= 0.03
        assert abs(z.mean()) <= 4 / math.sqrt(cfg.trials)

    def test_reproducible_and_resample(self):
        cfg = NoiseStudyConfig(n=100, s=3, trials=50, seed=9)
        np.testing.assert_array_equal(noise_samples(cfg), noise_samples(cfg))
        cfg = NoiseStudyConfig(n=100, s=3, trials=50, seed=9, resample=True, distribution=("gaussian", 0.0, 1.0))
        z = noise_samples(cfg)
        assert np.all(np.isfinite(z))

    def test_analytic_sn_against_enumeration(self):
        # tiny case: enumerate all 2^n rounding outcomes
        rng = np.random.default_rng(1)
        v, x = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
        s, k = 3, 6
        from qdz.quantcore import linear_scale

        sv = linear_scale(v, k)
        a = sv.scaling.per_element(sv.scaling.alphas)
        b = sv.scaling.per_element(sv.scaling.betas)
        lower = np.floor(sv.values * s)
        frac = sv.values * s - lower
        mean = second = 0.0
        for bits in range(2**6):
            xi = np.array([(bits >> i) & 1 for i in range(6)])
            prob = np.prod(np.where(xi, frac, 1 - frac))
            eps = (a * (lower + xi) / s + b) @ x - v @ x
            mean += prob * eps
            second += prob * eps * eps
        assert abs(mean) < 1e-12
        assert analytic_sn(v, x, s, k) == pytest.approx(math.sqrt(second), rel=1e-10)


class TestDiagnostics:
    def test_normal_quantile_grid(self):
        n = 20_000
        z = ndtri((np.arange(1, n + 1) - 0.5) / n)
        d = normality_diagnostics(z)
        assert abs(d.skewness) < 1e-10
        assert abs(d.excess_kurtosis) < 0.01
        assert d.ks_statistic <= 1 / n

    def test_ks_matches_hand_computation(self):
        z = np.random.default_rng(2).normal(size=3000) * 1.1 + 0.05
        assert normality_diagnostics(z).ks_statistic == pytest.approx(ks_by_hand(z), abs=1e-9)

    def test_constant_samples(self):
        with pytest.raises(DegenerateVarianceError):
            normality_diagnostics(np.full(2000, 0.3))

    def test_too_few(self):
        with pytest.raises(ValueError):
            normality_diagnostics(np.zeros(10))

    def test_report_csv(self):
        cfg = NoiseStudyConfig(n=200, s=3, trials=1000)
        d = normality_diagnostics(noise_samples(cfg))
        lines = study_report([(cfg, d)]).splitlines()
        assert lines[0] == "n,s,bucket_size,distribution,quantize_inputs,trials,mean,variance,skewness,excess_kurtosis,ks_statistic"
        assert lines[1].startswith('200,3,256,"uniform(-1,1)",0,1000,')


class TestMomentBounds:
    def test_on_grid(self):
        v = np.array([0, 1, 2, 3, 4]) / 4
        r = moment_bound_check(v, 4)
        np.testing.assert_array_equal(r.second, v**2)
        np.testing.assert_array_equal(r.second_bounds[0], v**2)

    def test_two_point_example(self):
        r = moment_bound_check([0.3], 4)
        assert r.second[0] == pytest.approx(0.8 * 0.0625 + 0.2 * 0.25)
        assert r.second[0] == pytest.approx(0.1)
        assert r.ok

    def test_closed_forms(self):
        v = np.random.default_rng(0).random(1000)
        s = 7
        r = moment_bound_check(v, s)
        l = np.floor(v * s)
        np.testing.assert_allclose(r.second, (v * s * (1 + 2 * l) - l * (l + 1)) / s**2, atol=1e-12)
        np.testing.assert_allclose(r.third, (v * s * (3 * l**2 + 3 * l + 1) - l * (2 * l**2 + 3 * l + 1)) / s**3, atol=1e-12)

    @pytest.mark.parametrize("s", [1, 3, 15, 255])
    def test_sweep(self, s):
        rng = np.random.default_rng(s)
        v = np.concatenate([rng.random(100_000 - 3), [0.0, 1.0, np.nextafter(1.0, 0)]])
        assert moment_bound_check(v, s).violations == 0

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            moment_bound_check([1.5], 3)
