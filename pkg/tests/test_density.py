import numpy as np
import pytest
from scipy import integrate
from scipy.stats import kstest, norm

from auctiondemand.density import (
    MarketSizeParams,
    ValuationParams,
    market_size_pmf,
    normalizing_constant,
    sample_market_size,
    sample_valuations,
    valuation_cdf,
    valuation_pdf,
    valuation_quantile,
)
from auctiondemand.errors import DomainError, InvalidParameterError


def unnormalized_pdf(p, v):
    z = (v - p.mu) / p.sigma
    poly = 1.0 + sum(a * z ** (k + 1) for k, a in enumerate(p.alphas))
    return poly**2 * norm.pdf(v, loc=p.mu, scale=p.sigma)


def quad_cdf(p, v):
    val, _ = integrate.quad(
        lambda t: valuation_pdf(p, t), p.mu - 12 * p.sigma, v, limit=400
    )
    return val


def random_params(rng, kappa=None):
    k = int(rng.integers(0, 7)) if kappa is None else kappa
    return ValuationParams(
        mu=float(rng.uniform(-3, 3)),
        sigma=float(rng.uniform(0.3, 2.5)),
        alphas=rng.uniform(-2, 2, size=k),
    )


class TestNormalizingConstant:
    def test_gaussian_reduction(self):
        p = ValuationParams(mu=1.0, sigma=2.0, alphas=np.zeros(0))
        assert normalizing_constant(p) == 1.0

    def test_kappa1_closed_form(self):
        # quadrature oracle for the unnormalized mass, cross-checked vs 1/(1+a^2)
        for a in (-1.5, -0.3, 0.5, 2.0):
            p = ValuationParams(mu=0.3, sigma=1.2, alphas=[a])
            mass, _ = integrate.quad(
                lambda v: unnormalized_pdf(p, v), p.mu - 14 * p.sigma, p.mu + 14 * p.sigma
            )
            assert normalizing_constant(p) == pytest.approx(1.0 / mass, abs=1e-10)
            assert normalizing_constant(p) == pytest.approx(1.0 / (1.0 + a**2), abs=1e-12)

    def test_kappa2_closed_form(self):
        for a1, a2 in ((0.3, -0.2), (1.0, 0.5), (-0.7, 0.9)):
            p = ValuationParams(mu=-1.0, sigma=0.7, alphas=[a1, a2])
            expect = 1.0 / (1.0 + a1**2 + 2 * a2 + 3 * a2**2)
            mass, _ = integrate.quad(
                lambda v: unnormalized_pdf(p, v), p.mu - 14 * p.sigma, p.mu + 14 * p.sigma
            )
            assert normalizing_constant(p) == pytest.approx(expect, abs=1e-12)
            assert normalizing_constant(p) == pytest.approx(1.0 / mass, abs=1e-9)

    def test_extreme_alphas_rejected(self):
        with pytest.raises(InvalidParameterError):
            normalizing_constant(ValuationParams(0.0, 1.0, alphas=[1e200] * 4))

    def test_invalid_sigma(self):
        with pytest.raises(InvalidParameterError):
            ValuationParams(mu=0.0, sigma=0.0)
        with pytest.raises(InvalidParameterError):
            ValuationParams(mu=0.0, sigma=-1.0)


class TestPdf:
    def test_gaussian_reduction(self):
        p = ValuationParams(mu=2.0, sigma=1.5)
        v = np.linspace(-4, 8, 50)
        np.testing.assert_allclose(valuation_pdf(p, v), norm.pdf(v, 2.0, 1.5), atol=1e-12)

    def test_kappa1_point_value(self):
        p = ValuationParams(mu=0.0, sigma=1.0, alphas=[0.5])
        assert valuation_pdf(p, 0.0) == pytest.approx((1 / 1.25) * norm.pdf(0.0), abs=1e-7)

    def test_normalization_property(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = random_params(rng)
            mass, _ = integrate.quad(
                lambda v: valuation_pdf(p, v),
                p.mu - 12 * p.sigma,
                p.mu + 12 * p.sigma,
                limit=400,
            )
            assert mass == pytest.approx(1.0, abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            p = random_params(rng)
            v = np.linspace(p.mu - 10 * p.sigma, p.mu + 10 * p.sigma, 400)
            assert np.all(valuation_pdf(p, v) >= 0.0)


class TestCdf:
    def test_gaussian_median(self):
        p = ValuationParams(mu=3.0, sigma=0.5)
        assert valuation_cdf(p, 3.0) == pytest.approx(0.5, abs=1e-12)

    def test_tail_limits(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            p = random_params(rng)
            assert valuation_cdf(p, p.mu - 12 * p.sigma) < 1e-8
            assert valuation_cdf(p, p.mu + 12 * p.sigma) > 1 - 1e-8

    def test_matches_quadrature(self):
        p = ValuationParams(mu=1.0, sigma=2.0, alphas=[0.3, -0.2])
        assert valuation_cdf(p, 1.5) == pytest.approx(quad_cdf(p, 1.5), abs=1e-8)

    def test_quadrature_agreement_randomized(self):
        rng = np.random.default_rng(19)
        for _ in range(5):
            p = random_params(rng)
            grid = np.linspace(p.mu - 4 * p.sigma, p.mu + 4 * p.sigma, 101)
            closed = valuation_cdf(p, grid)
            brute = np.array([quad_cdf(p, v) for v in grid])
            np.testing.assert_allclose(closed, brute, atol=1e-7)

    def test_monotone(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            p = random_params(rng)
            grid = np.linspace(p.mu - 8 * p.sigma, p.mu + 8 * p.sigma, 300)
            assert np.all(np.diff(valuation_cdf(p, grid)) >= -1e-14)


class TestQuantile:
    def test_gaussian_median(self):
        p = ValuationParams(mu=-2.0, sigma=3.0)
        assert valuation_quantile(p, 0.5) == pytest.approx(-2.0, abs=1e-9)

    def test_gaussian_reduction_exact(self):
        p = ValuationParams(mu=0.8, sigma=1.7)
        for u in (0.05, 0.3, 0.5, 0.77, 0.99):
            assert valuation_quantile(p, u) == pytest.approx(
                norm.ppf(u, 0.8, 1.7), abs=1e-8
            )

    def test_round_trip(self):
        rng = np.random.default_rng(31)
        for _ in range(8):
            p = random_params(rng)
            u = np.array([0.01, 0.1, 0.5, 0.9, 0.99])
            back = valuation_cdf(p, valuation_quantile(p, u))
            np.testing.assert_allclose(back, u, atol=1e-9)

    def test_against_bisection_oracle(self):
        p = ValuationParams(mu=0.0, sigma=1.0, alphas=[0.5])
        u = 0.5
        lo, hi = -12.0, 12.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if quad_cdf(p, mid) < u:
                lo = mid
            else:
                hi = mid
        assert valuation_quantile(p, u) == pytest.approx(0.5 * (lo + hi), abs=1e-6)

    def test_domain_errors(self):
        p = ValuationParams(mu=0.0, sigma=1.0)
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(DomainError):
                valuation_quantile(p, bad)


class TestMarketSizePmf:
    def test_uniform(self):
        m = MarketSizeParams(logits=np.zeros(5), n_min=1)
        np.testing.assert_allclose(market_size_pmf(m), 0.2, atol=1e-15)

    def test_two_point(self):
        m = MarketSizeParams(logits=[0.0, np.log(2.0)], n_min=1)
        np.testing.assert_allclose(market_size_pmf(m), [1 / 3, 2 / 3], atol=1e-14)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=12)
        a = market_size_pmf(MarketSizeParams(logits=logits, n_min=2))
        b = market_size_pmf(MarketSizeParams(logits=logits + 57.3, n_min=2))
        assert np.max(np.abs(a - b)) < 1e-12

    def test_sums_to_one_and_argmax(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            logits = rng.normal(scale=5.0, size=int(rng.integers(2, 30)))
            m = MarketSizeParams(logits=logits, n_min=1)
            pmf = market_size_pmf(m)
            assert abs(pmf.sum() - 1.0) < 1e-12
            assert np.all(pmf > 0)
            assert np.argmax(pmf) == np.argmax(logits)

    def test_grid_validation(self):
        with pytest.raises(InvalidParameterError):
            MarketSizeParams(logits=[0.0, 1.0], n_min=0)


class TestSampling:
    def test_gaussian_ks(self):
        p = ValuationParams(mu=0.0, sigma=1.0)
        draws = sample_valuations(p, 10_000, np.random.default_rng(42))
        stat = kstest(draws, "norm").statistic
        assert stat < 0.02

    def test_hermite_ks_against_own_cdf(self):
        p = ValuationParams(mu=1.0, sigma=0.8, alphas=[0.4, -0.1])
        draws = sample_valuations(p, 10_000, np.random.default_rng(8))
        stat = kstest(draws, lambda v: valuation_cdf(p, v)).statistic
        assert stat < 0.02

    def test_zero_count_rejected(self):
        p = ValuationParams(mu=0.0, sigma=1.0)
        with pytest.raises(DomainError):
            sample_valuations(p, 0, np.random.default_rng(0))

    def test_sample_mean(self):
        p = ValuationParams(mu=5.0, sigma=0.5)
        draws = sample_valuations(p, 100_000, np.random.default_rng(17))
        assert draws.mean() == pytest.approx(5.0, abs=0.01)

    def test_market_size_point_mass(self):
        logits = np.zeros(6)
        logits[3] = 50.0
        m = MarketSizeParams(logits=logits, n_min=1)
        rng = np.random.default_rng(1)
        assert all(sample_market_size(m, rng) == 4 for _ in range(200))

    def test_market_size_frequencies_uniform(self):
        m = MarketSizeParams(logits=np.zeros(4), n_min=1)
        rng = np.random.default_rng(2)
        draws = np.array([sample_market_size(m, rng) for _ in range(100_000)])
        for n in range(1, 5):
            assert np.mean(draws == n) == pytest.approx(0.25, abs=0.01)

    def test_market_size_frequencies_match_pmf(self):
        m = MarketSizeParams(logits=[0.0, 1.0, 2.0], n_min=1)
        pmf = market_size_pmf(m)
        rng = np.random.default_rng(3)
        draws = np.array([sample_market_size(m, rng) for _ in range(100_000)])
        for idx, n in enumerate(m.grid):
            assert np.mean(draws == n) == pytest.approx(pmf[idx], abs=0.01)
