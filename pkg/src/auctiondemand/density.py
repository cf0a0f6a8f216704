"""Semi-nonparametric demand primitives.

Two distribution families drive everything downstream:

* a valuation density over log dollars: a Gaussian base carrying location
  ``mu`` and scale ``sigma``, multiplied by the square of a polynomial
  ``1 + sum_k alpha_k z^k`` in the standardized variable ``z = (v - mu)/sigma``
  and renormalized, so the shape weights ``alpha`` bend the density away from
  normality while squaring keeps it non-negative;
* a market-size mass function: softmax over unnormalized likelihoods on an
  integer grid of potential bidder counts.

The normalizing constant, CDF, and quantile of the valuation family are exact
(closed-form moments and an incomplete-moment recursion), so sampling and the
downstream order-statistic quadrature never rely on generic numerical
integration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DomainError, InvalidParameterError

MAX_SHAPE_ORDER = 8

# E[Z^m] for standard normal Z: 0 for odd m, (m-1)!! for even m.
# Precomputed through order 2 * MAX_SHAPE_ORDER, the largest moment a squared
# expansion of order MAX_SHAPE_ORDER can touch.
_GAUSS_MOMENTS = np.zeros(2 * MAX_SHAPE_ORDER + 1)
_GAUSS_MOMENTS[0] = 1.0
for _m in range(2, 2 * MAX_SHAPE_ORDER + 1, 2):
    _GAUSS_MOMENTS[_m] = _GAUSS_MOMENTS[_m - 2] * (_m - 1)

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


def _as_readonly(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ValuationParams:
    """Location/scale/shape of the log-valuation density.

    ``alphas`` may be empty (``kappa = 0``), in which case the family reduces
    exactly to the Gaussian.
    """

    mu: float
    sigma: float
    alphas: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "alphas", _as_readonly(np.atleast_1d(self.alphas)))
        if not np.isfinite(self.mu):
            raise InvalidParameterError("mu must be finite")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise InvalidParameterError(f"sigma must be positive, got {self.sigma}")
        if self.alphas.ndim != 1 or self.kappa > MAX_SHAPE_ORDER:
            raise InvalidParameterError(
                f"alphas must be a vector of length <= {MAX_SHAPE_ORDER}"
            )
        if not np.all(np.isfinite(self.alphas)):
            raise InvalidParameterError("alphas must be finite")

    @property
    def kappa(self) -> int:
        return self.alphas.shape[0]

    def poly_coeffs(self) -> np.ndarray:
        """Coefficients of 1 + sum_k alpha_k z^k, ascending order."""
        return np.concatenate(([1.0], self.alphas))


@dataclass(frozen=True, eq=False)
class MarketSizeParams:
    """Unnormalized likelihoods over the bidder-count grid {n_min..n_max}."""

    logits: np.ndarray
    n_min: int = 1

    def __post_init__(self):
        object.__setattr__(self, "logits", _as_readonly(np.atleast_1d(self.logits)))
        object.__setattr__(self, "n_min", int(self.n_min))
        if self.logits.ndim != 1 or self.logits.shape[0] < 1:
            raise InvalidParameterError("logits must be a non-empty vector")
        if not np.all(np.isfinite(self.logits)):
            raise InvalidParameterError("logits must be finite")
        if self.n_min < 1:
            raise InvalidParameterError(f"n_min must be >= 1, got {self.n_min}")

    @property
    def n_max(self) -> int:
        return self.n_min + self.logits.shape[0] - 1

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n_min, self.n_max + 1)


def _squared_poly_coeffs(p: ValuationParams) -> np.ndarray:
    a = p.poly_coeffs()
    return np.convolve(a, a)


def _poly_data(p: ValuationParams) -> tuple[np.ndarray, float]:
    """(squared polynomial coefficients, normalizing constant), cached per
    instance; the quantile solver re-evaluates pdf/cdf many times on one
    parameter set."""
    cached = getattr(p, "_poly_cache", None)
    if cached is not None:
        return cached
    q = _squared_poly_coeffs(p)
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(q @ _GAUSS_MOMENTS[: q.shape[0]])
    if not np.isfinite(total) or total <= 0.0:
        raise InvalidParameterError(
            f"polynomial second moment is {total}; shape weights too extreme"
        )
    c = 1.0 / total
    if not np.isfinite(c):
        raise InvalidParameterError("normalizing constant overflowed")
    object.__setattr__(p, "_poly_cache", (q, c))
    return q, c


def normalizing_constant(p: ValuationParams) -> float:
    """Constant that makes the squared-polynomial-weighted Gaussian a density.

    Closed form: 1 / E[P(Z)^2] with P the expansion polynomial and the
    expectation taken under the standard normal via its moment table.
    """
    return _poly_data(p)[1]


def valuation_pdf(p: ValuationParams, v) -> np.ndarray | float:
    """Density at ``v`` (scalar or array), in log-dollar space."""
    v_arr = np.asarray(v, dtype=float)
    z = (v_arr - p.mu) / p.sigma
    poly = np.polynomial.polynomial.polyval(z, p.poly_coeffs())
    phi = np.exp(-0.5 * z * z) / (p.sigma * _SQRT_2PI)
    out = _poly_data(p)[1] * poly * poly * phi
    return out if v_arr.shape else float(out)


def _incomplete_moments(z: np.ndarray, order: int) -> np.ndarray:
    """I_m(z) = integral of t^m phi(t) over (-inf, z], for m = 0..order.

    Recursion: I_m = -z^(m-1) phi(z) + (m-1) I_(m-2), anchored at
    I_0 = Phi(z), I_1 = -phi(z). Returns an array of shape (order+1,) + z.shape.
    """
    phi = np.exp(-0.5 * z * z) / _SQRT_2PI
    out = np.empty((order + 1,) + z.shape)
    out[0] = ndtr(z)
    if order >= 1:
        out[1] = -phi
    for m in range(2, order + 1):
        out[m] = -(z ** (m - 1)) * phi + (m - 1) * out[m - 2]
    return out


def valuation_cdf(p: ValuationParams, v) -> np.ndarray | float:
    """Exact CDF via the incomplete-moment recursion; in [0, 1]."""
    v_arr = np.asarray(v, dtype=float)
    z = np.atleast_1d((v_arr - p.mu) / p.sigma)
    q, c = _poly_data(p)
    moments = _incomplete_moments(z, q.shape[0] - 1)
    cdf = c * np.tensordot(q, moments, axes=(0, 0))
    cdf = np.clip(cdf, 0.0, 1.0)
    return cdf.reshape(v_arr.shape) if v_arr.shape else float(cdf[0])


def valuation_quantile(p: ValuationParams, u) -> np.ndarray | float:
    """Inverse CDF on (0, 1), accurate to |cdf(v) - u| < 1e-10.

    Bracket-guarded Newton on [mu - 12 sigma, mu + 12 sigma], started from
    the Gaussian quantile (exact when kappa = 0) and capped at 100
    iterations. Newton runs on log F (left half) or log(1 - F) (right half)
    so steps stay sane in the flat tails; any step that would leave the
    shrinking bracket, or lands where the density vanishes, falls back to
    bisection. Converged entries drop out of later iterations.
    """
    u_arr = np.asarray(u, dtype=float)
    flat = np.atleast_1d(u_arr).astype(float).ravel()
    if flat.size == 0:
        return np.zeros(u_arr.shape)
    if np.any((flat <= 0.0) | (flat >= 1.0) | ~np.isfinite(flat)):
        raise DomainError("quantile argument must lie strictly inside (0, 1)")
    v = _quantile_core(p, flat)
    return v.reshape(u_arr.shape) if u_arr.shape else float(v[0])


def _quantile_core(p: ValuationParams, u: np.ndarray,
                   v0: np.ndarray | None = None) -> np.ndarray:
    n = u.shape[0]
    lo = np.full(n, p.mu - 12.0 * p.sigma)
    hi = np.full(n, p.mu + 12.0 * p.sigma)
    if v0 is None:
        v0 = p.mu + p.sigma * ndtri(u)
    v = np.clip(v0, lo + 1e-9 * p.sigma, hi - 1e-9 * p.sigma)
    idx = np.arange(n)
    for _ in range(100):
        cdf = np.asarray(valuation_cdf(p, v[idx]))
        diff = cdf - u[idx]
        below = diff < 0
        lo[idx] = np.where(below, v[idx], lo[idx])
        hi[idx] = np.where(below, hi[idx], v[idx])
        keep = np.abs(diff) >= 1e-10
        idx = idx[keep]
        if idx.size == 0:
            break
        cdf = cdf[keep]
        deriv = np.asarray(valuation_pdf(p, v[idx]))
        left = u[idx] <= 0.5
        with np.errstate(divide="ignore", invalid="ignore"):
            gap = np.where(
                left,
                np.log(cdf) - np.log(u[idx]),
                np.log1p(-cdf) - np.log1p(-u[idx]),
            )
            slope = np.where(left, deriv / cdf, -deriv / (1.0 - cdf))
            cand = v[idx] - gap / slope
        bad = (deriv <= 0.0) | ~np.isfinite(cand) | (cand <= lo[idx]) | (cand >= hi[idx])
        v[idx] = np.where(bad, 0.5 * (lo[idx] + hi[idx]), cand)
    return v


def market_size_pmf(m: MarketSizeParams) -> np.ndarray:
    """Softmax of the likelihoods, max-subtracted for stability; sums to 1."""
    shifted = m.logits - np.max(m.logits)
    w = np.exp(shifted)
    return w / np.sum(w)


def sample_valuations(p: ValuationParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. log-valuation draws via inverse-CDF transform."""
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    u = rng.random(n)
    np.clip(u, 1e-12, 1.0 - 1e-12, out=u)
    return np.asarray(valuation_quantile(p, u))


def sample_market_size(m: MarketSizeParams, rng: np.random.Generator) -> int:
    """One categorical draw of the bidder count from the softmax PMF."""
    pmf = market_size_pmf(m)
    return int(m.n_min + rng.choice(pmf.shape[0], p=pmf))
