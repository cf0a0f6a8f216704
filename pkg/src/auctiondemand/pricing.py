"""Order-statistic pricing model for English auctions.

Under the equilibrium revelation assumption, losing bidders' last bids equal
their valuations, so observed bid ranks are order statistics of i.i.d. draws
from the valuation density, with the number of draws taken from the
market-size PMF. This module turns demand primitives into expected log bids
per rank:

* the conditional density of the j-th largest of n valuations;
* its expectation via deterministic low-discrepancy quadrature in the
  probability domain (substituting u = F(v) reduces the integral to
  quantile(u) against a Beta kernel in u);
* the mixture over market size, collected into a per-rank prediction vector;
* a finite-difference Jacobian of those predictions, which is what trainers
  backpropagate through.

The top rank is computed but carries only advisory weight downstream: the
winner pays one increment over the runner-up, so the winning bid understates
the winning valuation and is excluded from losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from .density import MarketSizeParams, ValuationParams, market_size_pmf, valuation_cdf, valuation_pdf, valuation_quantile
from .errors import ConfigError, DomainError, NumericalError

SCHEMES = ("sobol_1d", "uniform_midpoint")
CENSORING_RULES = ("lowest", "renormalize")


@dataclass(frozen=True)
class QuadratureConfig:
    """Deterministic point set for expectations in the probability domain."""

    points: int = 512
    scheme: str = "sobol_1d"
    epsilon_clip: float = 1e-6

    def __post_init__(self):
        if self.points < 16:
            raise ConfigError(f"quadrature needs >= 16 points, got {self.points}")
        if not (0.0 < self.epsilon_clip < 0.01):
            raise ConfigError(f"epsilon_clip must lie in (0, 0.01), got {self.epsilon_clip}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")


@dataclass(frozen=True, eq=False)
class BidPrediction:
    """Expected log bids for ranks 2..j_max, plus the advisory top rank.

    ``rank1_advisory`` is the expectation of the winning valuation; it is
    reported for diagnostics but never enters a training loss because the
    winning bid only reveals a lower bound shifted by one increment.
    """

    ranks: tuple[int, ...]
    expected_log_bids: np.ndarray
    rank1_advisory: float

    def __post_init__(self):
        arr = np.asarray(self.expected_log_bids, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "expected_log_bids", arr)
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if len(self.ranks) != arr.shape[0]:
            raise DomainError("ranks and expected_log_bids lengths differ")
        if not np.all(np.isfinite(arr)) or not np.isfinite(self.rank1_advisory):
            raise NumericalError("non-finite expected bids")


def _radical_inverse_base2(k: np.ndarray) -> np.ndarray:
    out = np.zeros(k.shape[0])
    kk = k.astype(np.uint64).copy()
    scale = 0.5
    while np.any(kk):
        out += scale * (kk & 1)
        kk >>= 1
        scale *= 0.5
    return out


@lru_cache(maxsize=32)
def quadrature_points(config: QuadratureConfig) -> np.ndarray:
    """Shared immutable point set in (0, 1) for the given config.

    ``sobol_1d`` takes the first ``points`` values of the base-2 radical
    inverse (the first Sobol dimension) plus a half-cell digital shift, which
    symmetrizes the set; at power-of-two counts it coincides with the
    midpoint grid. Fewer than 32 points falls back to the midpoint rule.
    """
    p = config.points
    if config.scheme == "uniform_midpoint" or p < 32:
        u = (np.arange(p) + 0.5) / p
    else:
        shift = 0.5 / (2.0 ** np.ceil(np.log2(p)))
        u = _radical_inverse_base2(np.arange(p)) + shift
    u = np.clip(u, config.epsilon_clip, 1.0 - config.epsilon_clip)
    u.setflags(write=False)
    return u


def _log_rank_coeff(n: int, j: int) -> float:
    # n! / ((j-1)! (n-j)!)
    return float(gammaln(n + 1) - gammaln(j) - gammaln(n - j + 1))


def order_stat_pdf(p: ValuationParams, n: int, j: int, v) -> np.ndarray | float:
    """Density of the j-th largest of n i.i.d. valuations at ``v``."""
    n, j = int(n), int(j)
    if j < 1 or j > n:
        raise DomainError(f"rank j={j} must satisfy 1 <= j <= n={n}")
    v_arr = np.asarray(v, dtype=float)
    f = np.asarray(valuation_pdf(p, v_arr))
    cdf = np.asarray(valuation_cdf(p, v_arr))
    coeff = np.exp(_log_rank_coeff(n, j))
    out = coeff * f * cdf ** (n - j) * (1.0 - cdf) ** (j - 1)
    return out if v_arr.shape else float(out)


def _beta_kernel_matrix(n_values: tuple[int, ...], j_values: tuple[int, ...],
                        u: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """Rank-kernel rows k(u; n, j) = C(n,j) u^(n-j) (1-u)^(j-1), row-normalized.

    Each row is divided by its point-set mean so the kernel carries exactly
    unit mass under the quadrature; this keeps expectations exactly
    location-equivariant instead of equivariant only up to the point-set's
    kernel-mass error.
    """
    out = {}
    log_u = np.log(u)
    log_1mu = np.log1p(-u)
    for n in n_values:
        for j in j_values:
            if j > n:
                continue
            row = np.exp(_log_rank_coeff(n, j) + (n - j) * log_u + (j - 1) * log_1mu)
            out[(n, j)] = row / np.mean(row)
    return out


@lru_cache(maxsize=32)
def _kernel_table(n_min: int, n_max: int, j_max: int,
                  config: QuadratureConfig) -> tuple[np.ndarray, np.ndarray]:
    """Kernel rows for every (n in grid, j' in 1..min(j_max, n)).

    Returns (table, valid): table[n - n_min, j - 1] is the kernel row over the
    point set, valid marks the (n, j) pairs where the rank exists.
    """
    u = quadrature_points(config)
    n_values = tuple(range(n_min, n_max + 1))
    j_values = tuple(range(1, j_max + 1))
    rows = _beta_kernel_matrix(n_values, j_values, u)
    table = np.zeros((n_max - n_min + 1, j_max, u.shape[0]))
    valid = np.zeros((n_max - n_min + 1, j_max), dtype=bool)
    for (n, j), row in rows.items():
        table[n - n_min, j - 1] = row
        valid[n - n_min, j - 1] = True
    table.setflags(write=False)
    valid.setflags(write=False)
    return table, valid


def _std_quantiles(p: ValuationParams, config: QuadratureConfig,
                   v0: np.ndarray | None = None) -> np.ndarray:
    """Quantiles of the standardized (mu=0, sigma=1) family at the point set.

    ``v0`` warm-starts the solver; useful when the shape weights move by a
    finite-difference step.
    """
    from .density import _quantile_core

    std = ValuationParams(mu=0.0, sigma=1.0, alphas=p.alphas)
    u = quadrature_points(config)
    return _quantile_core(std, np.asarray(u), v0=v0)


def _std_cond_table(p: ValuationParams, n_min: int, n_max: int, j_max: int,
                    config: QuadratureConfig,
                    std_q: np.ndarray | None = None) -> np.ndarray:
    """S[n - n_min, j - 1] = E[Z_(j) | n] for the standardized family.

    The dollar-scale table is mu + sigma * S: the family is affine in
    location/scale, so S only depends on the shape weights.
    """
    if std_q is None:
        std_q = _std_quantiles(p, config)
    table, _ = _kernel_table(n_min, n_max, j_max, config)
    return table @ std_q / std_q.shape[0]


def expected_order_stat_given_n(p: ValuationParams, n: int, j: int,
                                q: QuadratureConfig = QuadratureConfig()) -> float:
    """E[V_(j) | n] by quadrature of quantile(u) against the rank kernel."""
    n, j = int(n), int(j)
    if j < 1 or j > n:
        raise DomainError(f"rank j={j} must satisfy 1 <= j <= n={n}")
    std = _std_cond_table(p, n, n, j, q)
    return float(p.mu + p.sigma * std[0, j - 1])


def expected_order_stats_unconditional(
    p: ValuationParams,
    m: MarketSizeParams,
    j_max: int = 5,
    q: QuadratureConfig = QuadratureConfig(),
    censoring: str = "lowest",
) -> BidPrediction:
    """Per-rank expected log bids, mixing E[V_(j')|n] over the market-size PMF.

    For grid points with n < j' the rank does not exist; under the default
    ``lowest`` rule such terms contribute E[V_(n)|n] (the lowest realized
    order statistic), keeping the mixture weights at unit mass. Under
    ``renormalize`` they are dropped and the remaining weights rescaled.
    """
    j_max = int(j_max)
    if j_max < 2:
        raise ConfigError(f"j_max must be >= 2, got {j_max}")
    if j_max > m.n_max:
        raise ConfigError(f"j_max={j_max} exceeds the largest grid count {m.n_max}")
    if censoring not in CENSORING_RULES:
        raise ConfigError(f"unknown censoring rule {censoring!r}")

    std = _std_cond_table(p, m.n_min, m.n_max, j_max, q)
    expectations = p.mu + p.sigma * _mix_std(market_size_pmf(m), std, m, j_max, censoring)
    if not np.all(np.isfinite(expectations)):
        raise NumericalError("non-finite order-statistic expectation")
    return BidPrediction(
        ranks=tuple(range(2, j_max + 1)),
        expected_log_bids=expectations[1:],
        rank1_advisory=float(expectations[0]),
    )


def _censored_std_table(std: np.ndarray, m: MarketSizeParams, j_max: int) -> np.ndarray:
    """Copy of S where missing ranks (n < j) carry E[Z_(n)|n], the lowest
    realized order statistic for that row."""
    out = std.copy()
    n_grid = m.grid
    for j in range(2, j_max + 1):
        short = n_grid < j
        out[short, j - 1] = std[n_grid[short] - m.n_min, n_grid[short] - 1]
    return out


def _mix_std(pmf: np.ndarray, std: np.ndarray, m: MarketSizeParams, j_max: int,
             censoring: str) -> np.ndarray:
    """Standardized expectation per rank 1..j_max under the market-size
    mixture; dollar scale is mu + sigma * result."""
    if censoring == "lowest":
        return pmf @ _censored_std_table(std, m, j_max)
    n_grid = m.grid
    out = np.empty(j_max)
    for j in range(1, j_max + 1):
        keep = n_grid >= j
        out[j - 1] = (pmf[keep] @ std[keep, j - 1]) / np.sum(pmf[keep])
    return out


def parameter_vector(p: ValuationParams, m: MarketSizeParams) -> np.ndarray:
    """Flat parameter order used by the gradient: mu, sigma, alphas, logits."""
    return np.concatenate(([p.mu, p.sigma], p.alphas, m.logits))


def unpack_parameter_vector(theta: np.ndarray, kappa: int, n_min: int) -> tuple[ValuationParams, MarketSizeParams]:
    p = ValuationParams(mu=theta[0], sigma=theta[1], alphas=theta[2 : 2 + kappa])
    m = MarketSizeParams(logits=theta[2 + kappa :], n_min=n_min)
    return p, m


def predict_and_gradient(
    p: ValuationParams,
    m: MarketSizeParams,
    j_max: int = 5,
    q: QuadratureConfig = QuadratureConfig(),
    censoring: str = "lowest",
) -> tuple[BidPrediction, np.ndarray]:
    """Expected log bids plus their finite-difference Jacobian.

    The Jacobian is central differences over the full (mu, sigma, alphas,
    logits) vector with per-coordinate step 1e-4 * max(1, |theta|), every
    evaluation reusing the same fixed point set so the estimator is smooth
    in the parameters. Two exploits keep it cheap without changing any
    value: the standardized conditional table depends only on the shape
    weights (so perturbing mu, sigma, or a logit reuses it bit-for-bit), and
    perturbed shape weights warm-start their quantile solve from the base
    solution. Jacobian shape: (j_max - 1, kappa + 2 + |B|).
    """
    if censoring not in CENSORING_RULES:
        raise ConfigError(f"unknown censoring rule {censoring!r}")
    j_max = int(j_max)
    if j_max < 2:
        raise ConfigError(f"j_max must be >= 2, got {j_max}")
    if j_max > m.n_max:
        raise ConfigError(f"j_max={j_max} exceeds the largest grid count {m.n_max}")
    kappa = p.kappa
    theta0 = parameter_vector(p, m)
    dim = theta0.shape[0]

    base_std_q = _std_quantiles(p, q)
    table_cache: dict[bytes, np.ndarray] = {}

    def std_table(pp: ValuationParams) -> np.ndarray:
        key = pp.alphas.tobytes()
        cached = table_cache.get(key)
        if cached is None:
            std_q = _std_quantiles(pp, q, v0=base_std_q)
            cached = _std_cond_table(pp, m.n_min, m.n_max, j_max, q, std_q=std_q)
            if censoring == "lowest":
                cached = _censored_std_table(cached, m, j_max)
            table_cache[key] = cached
        return cached

    def evaluate(theta: np.ndarray) -> np.ndarray:
        pp, mm = unpack_parameter_vector(theta, kappa, m.n_min)
        pmf = market_size_pmf(mm)
        table = std_table(pp)
        if censoring == "lowest":
            mixed = pmf @ table
        else:
            mixed = _mix_std(pmf, table, mm, j_max, censoring)
        return pp.mu + pp.sigma * mixed

    base = evaluate(theta0)
    if not np.all(np.isfinite(base)):
        raise NumericalError("non-finite order-statistic expectation")
    prediction = BidPrediction(
        ranks=tuple(range(2, j_max + 1)),
        expected_log_bids=base[1:],
        rank1_advisory=float(base[0]),
    )

    jac = np.empty((j_max, dim))
    for i in range(dim):
        h = 1e-4 * max(1.0, abs(theta0[i]))
        plus = theta0.copy()
        plus[i] += h
        minus = theta0.copy()
        minus[i] -= h
        jac[:, i] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        if not np.all(np.isfinite(jac[:, i])):
            raise NumericalError(f"non-finite gradient in parameter index {i}")
    return prediction, jac[1:, :]


def structural_gradient(
    p: ValuationParams,
    m: MarketSizeParams,
    j_max: int = 5,
    q: QuadratureConfig = QuadratureConfig(),
    censoring: str = "lowest",
) -> np.ndarray:
    """Jacobian of expected_log_bids w.r.t. (mu, sigma, alphas, logits);
    see predict_and_gradient for the construction."""
    return predict_and_gradient(p, m, j_max, q, censoring)[1]
