"""Synthetic English-auction marketplace with known demand primitives.

A fixed smooth map takes listing features to true valuation/market-size
parameters; auctions are then simulated under equilibrium bidding: every
losing bidder's last bid equals their valuation, and the winner pays one
increment over the runner-up. Because the generating primitives are stored on
each record, estimators trained on these datasets can be scored against
ground truth, not just against noisy outcomes.

Conventions: valuations live in log dollars inside the primitives and are
exponentiated to dollar bids at simulation time; engagement counts are
monotone in the realized bidder count with lognormal noise; records that fail
the five-unique-bidders inclusion criterion are kept but flagged excluded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density import (
    MarketSizeParams,
    ValuationParams,
    sample_market_size,
    sample_valuations,
)
from .encoder import DEFAULT_BODY_STYLES, DEFAULT_BRANDS, FeatureSchema, ListingFeatures
from .errors import ConfigError, DataError, DomainError

BUYER_FEE_RATE = 0.05
BUYER_FEE_FLOOR = 250.0
BUYER_FEE_CAP = 5000.0

MIN_UNIQUE_BIDDERS = 5
EXCLUSION_REASON = f"fewer than {MIN_UNIQUE_BIDDERS} unique bidders"


def buyer_fee(b1: float) -> float:
    """Winner's transaction fee: 5% of the winning bid, floored and capped."""
    if b1 <= 0:
        raise DomainError(f"winning bid must be positive, got {b1}")
    return min(max(BUYER_FEE_RATE * b1, BUYER_FEE_FLOOR), BUYER_FEE_CAP)


@dataclass(frozen=True)
class ReservePolicy:
    """Secret reserve drawn as exp(mu + (shift + scale * z) * sigma), z ~ N(0,1).

    The positive default shift pushes reserves toward the upper valuation
    range so a realistic share of auctions fails the reserve.
    """

    shift: float = 0.75
    scale: float = 0.5

    def draw(self, p: ValuationParams, rng: np.random.Generator) -> float:
        z = rng.normal()
        return float(np.exp(p.mu + (self.shift + self.scale * z) * p.sigma))


@dataclass(frozen=True)
class GroundTruthMap:
    """Coefficients of the smooth map from features to true demand primitives.

    All feature effects act through the same normalized coordinates the
    encoder schema uses. Location falls with mileage and age and rises with
    horsepower; scale rises with age only; the market-size mode rises with
    horsepower and falls with mileage, so expected bids at every rank are
    strictly decreasing in mileage by construction.
    """

    schema: FeatureSchema = field(default_factory=FeatureSchema)

    mu_base: float = 10.3
    mu_mileage: float = -0.25
    mu_horsepower: float = 0.28
    mu_age: float = -0.18
    mu_automatic: float = -0.12
    brand_offsets: tuple[float, ...] = (0.30, 0.10, -0.25, 0.05)
    body_offsets: tuple[float, ...] = (0.10, 0.0, -0.08)

    sigma_floor: float = 0.18
    sigma_span: float = 0.30
    sigma_age: float = 0.9
    sigma_intercept: float = -0.2

    alpha_scales: tuple[float, ...] = (0.35, 0.20, 0.08, 0.04)

    size_mode_base: float = 4.5
    size_mode_span: float = 13.0
    size_mode_horsepower: float = 0.55
    size_mode_mileage: float = -0.45
    size_mode_intercept: float = -0.2
    size_width_base: float = 2.6
    size_width_span: float = 1.4
    n_min: int = 1
    n_max: int = 40

    views_intercept: float = 8.0
    views_slope: float = 0.09
    views_noise_sd: float = 0.18
    watchers_intercept: float = 5.0
    watchers_slope: float = 0.11
    watchers_noise_sd: float = 0.22

    mileage_range: tuple[float, float] = (1_000.0, 400_000.0)
    horsepower_range: tuple[float, float] = (40.0, 900.0)
    age_range: tuple[float, float] = (0.0, 60.0)

    def __post_init__(self):
        if len(self.brand_offsets) != len(self.schema.brands):
            raise ConfigError("one brand offset per schema brand required")
        if len(self.body_offsets) != len(self.schema.body_styles):
            raise ConfigError("one body offset per schema body style required")

    @property
    def kappa(self) -> int:
        return len(self.alpha_scales)

    def _normalized(self, f: ListingFeatures) -> tuple[float, float, float]:
        lo, hi = self.mileage_range
        if not (lo <= f.mileage <= hi):
            raise DomainError(f"mileage {f.mileage} outside map range [{lo}, {hi}]")
        lo, hi = self.horsepower_range
        if not (lo <= f.horsepower <= hi):
            raise DomainError(f"horsepower {f.horsepower} outside map range [{lo}, {hi}]")
        lo, hi = self.age_range
        if not (lo <= f.age <= hi):
            raise DomainError(f"age {f.age} outside map range [{lo}, {hi}]")
        s = self.schema
        x_m = (np.log1p(f.mileage) - s.log_mileage_center) / s.log_mileage_scale
        x_h = (np.log(f.horsepower) - s.log_horsepower_center) / s.log_horsepower_scale
        x_a = (f.age - s.age_center) / s.age_scale
        return float(x_m), float(x_h), float(x_a)

    def primitives(self, f: ListingFeatures) -> tuple[ValuationParams, MarketSizeParams]:
        x_m, x_h, x_a = self._normalized(f)
        s = self.schema
        mu = (
            self.mu_base
            + self.mu_mileage * x_m
            + self.mu_horsepower * x_h
            + self.mu_age * x_a
            + self.brand_offsets[s.brands.index(f.brand)]
            + self.body_offsets[s.body_styles.index(f.body_style)]
            + (self.mu_automatic if f.automatic else 0.0)
        )
        sigma = self.sigma_floor + self.sigma_span * _sigmoid(
            self.sigma_age * x_a + self.sigma_intercept
        )
        alphas = np.array(
            [
                self.alpha_scales[0] * np.tanh(0.8 * x_h - 0.1),
                self.alpha_scales[1] * np.tanh(0.5 * x_a + 0.2),
                self.alpha_scales[2] * np.tanh(0.6 * x_m),
                self.alpha_scales[3] * np.tanh(0.4 * x_h - 0.3),
            ][: self.kappa]
        )
        mode = self.size_mode_base + self.size_mode_span * _sigmoid(
            self.size_mode_horsepower * x_h
            + self.size_mode_mileage * x_m
            + self.size_mode_intercept
        )
        width = self.size_width_base + self.size_width_span * _sigmoid(0.5 * x_h)
        grid = np.arange(self.n_min, self.n_max + 1, dtype=float)
        logits = -((grid - mode) ** 2) / (2.0 * width**2)
        return (
            ValuationParams(mu=mu, sigma=float(sigma), alphas=alphas),
            MarketSizeParams(logits=logits, n_min=self.n_min),
        )


def _sigmoid(x: float) -> float:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


DEFAULT_MAP = GroundTruthMap()

# Frozen fixture: the default map evaluated at this reference listing must
# reproduce these values exactly (regression guard for the map's algebra).
REFERENCE_FEATURES = ListingFeatures(
    mileage=60_000.0, horsepower=300.0, age=10.0, brand="borealis",
    body_style="coupe", automatic=False,
)
REFERENCE_MU = 10.800589058874467
REFERENCE_SIGMA = 0.28802517097867975
REFERENCE_ALPHAS = (
    0.1741443873272324,
    -0.0016666280874913964,
    0.00010159231652562384,
    0.000920876446493671,
)
REFERENCE_SIZE_MODE = 12  # grid argmax of the market-size PMF


def map_self_test(g: GroundTruthMap = DEFAULT_MAP) -> None:
    """Regression guard: the default map must reproduce the frozen fixture."""
    from .density import market_size_pmf

    vp, mp = g.primitives(REFERENCE_FEATURES)
    if abs(vp.mu - REFERENCE_MU) > 1e-12 or abs(vp.sigma - REFERENCE_SIGMA) > 1e-12:
        raise ConfigError("ground-truth map location/scale drifted from fixture")
    if np.max(np.abs(vp.alphas - np.array(REFERENCE_ALPHAS))) > 1e-12:
        raise ConfigError("ground-truth map shape weights drifted from fixture")
    pmf = market_size_pmf(mp)
    if int(mp.grid[int(np.argmax(pmf))]) != REFERENCE_SIZE_MODE:
        raise ConfigError("ground-truth map market-size mode drifted from fixture")


def ground_truth_primitives(g: GroundTruthMap, f: ListingFeatures) -> tuple[ValuationParams, MarketSizeParams]:
    return g.primitives(f)


@dataclass
class AuctionRecord:
    """One simulated listing: features, outcome, and (optionally) the truth."""

    listing_id: str
    features: ListingFeatures
    final_bids: np.ndarray
    n_bidders: int
    reserve_price: float
    reserve_met: bool
    views: int
    watchers: int
    sale_time: float
    truth: tuple[ValuationParams, MarketSizeParams] | None = None
    excluded: bool = False
    exclusion_reason: str | None = None

    def __post_init__(self):
        bids = np.asarray(self.final_bids, dtype=float)
        self.final_bids = bids
        if bids.shape[0] != self.n_bidders:
            raise DataError(
                f"{self.listing_id}: {bids.shape[0]} bids vs n_bidders={self.n_bidders}"
            )
        if np.any(bids <= 0) or np.any(np.diff(bids) > 0):
            raise DataError(f"{self.listing_id}: bids must be positive and non-increasing")
        if self.reserve_met != bool(bids[0] >= self.reserve_price):
            raise DataError(f"{self.listing_id}: reserve flag inconsistent with bids")

    def log_bid(self, rank: int) -> float:
        """Natural log of the rank-th largest bid (rank 1 = winning bid)."""
        if rank < 1 or rank > self.n_bidders:
            raise DomainError(f"rank {rank} outside 1..{self.n_bidders}")
        return float(np.log(self.final_bids[rank - 1]))

    def to_json(self) -> dict:
        truth = None
        if self.truth is not None:
            vp, mp = self.truth
            truth = {
                "mu": vp.mu,
                "sigma": vp.sigma,
                "alphas": [float(a) for a in vp.alphas],
                "logits": [float(r) for r in mp.logits],
                "n_min": mp.n_min,
            }
        return {
            "listing_id": self.listing_id,
            "features": self.features.to_dict(),
            "final_bids": [float(b) for b in self.final_bids],
            "n_bidders": self.n_bidders,
            "reserve_price": self.reserve_price,
            "reserve_met": self.reserve_met,
            "views": self.views,
            "watchers": self.watchers,
            "sale_time": self.sale_time,
            "excluded": self.excluded,
            "exclusion_reason": self.exclusion_reason,
            "truth": truth,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AuctionRecord":
        truth = None
        if d.get("truth") is not None:
            t = d["truth"]
            truth = (
                ValuationParams(mu=t["mu"], sigma=t["sigma"], alphas=np.array(t["alphas"])),
                MarketSizeParams(logits=np.array(t["logits"]), n_min=t["n_min"]),
            )
        return cls(
            listing_id=d["listing_id"],
            features=ListingFeatures.from_dict(d["features"]),
            final_bids=np.array(d["final_bids"], dtype=float),
            n_bidders=int(d["n_bidders"]),
            reserve_price=float(d["reserve_price"]),
            reserve_met=bool(d["reserve_met"]),
            views=int(d["views"]),
            watchers=int(d["watchers"]),
            sale_time=float(d["sale_time"]),
            truth=truth,
            excluded=bool(d.get("excluded", False)),
            exclusion_reason=d.get("exclusion_reason"),
        )


def simulate_auction(
    listing_id: str,
    features: ListingFeatures,
    truth: tuple[ValuationParams, MarketSizeParams],
    reserve_policy: ReservePolicy,
    b_inc: float,
    rng: np.random.Generator,
    g: GroundTruthMap = DEFAULT_MAP,
    sale_time: float = 0.0,
    keep_truth: bool = True,
) -> AuctionRecord:
    """Simulate one English auction from known primitives.

    Bidder count and valuations are drawn from the primitives; the losing
    bidders' final bids reveal their valuations in dollars, and the winning
    bid sits one increment above the runner-up. With a single bidder there is
    no runner-up, so the lone bid is that bidder's valuation (such records
    fail the inclusion criterion anyway).
    """
    if b_inc <= 0:
        raise DomainError(f"bid increment must be positive, got {b_inc}")
    vp, mp = truth
    n = sample_market_size(mp, rng)
    log_vals = np.sort(sample_valuations(vp, n, rng))[::-1]
    dollars = np.exp(log_vals)
    if n == 1:
        bids = dollars.copy()
    else:
        bids = dollars.copy()
        bids[0] = dollars[1] + b_inc
    reserve = reserve_policy.draw(vp, rng)
    views = int(round(np.exp(g.views_intercept + g.views_slope * n + g.views_noise_sd * rng.normal())))
    watchers = int(round(np.exp(g.watchers_intercept + g.watchers_slope * n + g.watchers_noise_sd * rng.normal())))
    excluded = n < MIN_UNIQUE_BIDDERS
    return AuctionRecord(
        listing_id=listing_id,
        features=features,
        final_bids=bids,
        n_bidders=n,
        reserve_price=reserve,
        reserve_met=bool(bids[0] >= reserve),
        views=views,
        watchers=watchers,
        sale_time=sale_time,
        truth=truth if keep_truth else None,
        excluded=excluded,
        exclusion_reason=EXCLUSION_REASON if excluded else None,
    )


def draw_features(g: GroundTruthMap, rng: np.random.Generator,
                  brand_weights: tuple[float, ...] | None = None) -> ListingFeatures:
    """Sample listing features inside the map's supported ranges."""
    s = g.schema
    if brand_weights is None:
        brand_weights = _default_brand_weights(s.brands)
    brand = s.brands[int(rng.choice(len(s.brands), p=np.asarray(brand_weights)))]
    body = s.body_styles[int(rng.choice(len(s.body_styles), p=_default_body_weights(s.body_styles)))]
    return ListingFeatures(
        mileage=float(np.exp(rng.uniform(np.log(6_000.0), np.log(155_000.0)))),
        horsepower=float(np.exp(rng.uniform(np.log(75.0), np.log(580.0)))),
        age=float(rng.integers(1, 39)),
        brand=brand,
        body_style=body,
        automatic=bool(rng.random() < 0.45),
    )


def _default_brand_weights(brands: tuple[str, ...]) -> np.ndarray:
    # last brand kept rare so a zero-shot holdout does not starve training
    base = np.ones(len(brands))
    base[-1] = 0.15
    return base / base.sum()


def _default_body_weights(styles: tuple[str, ...]) -> np.ndarray:
    w = np.array([0.45, 0.35, 0.20][: len(styles)])
    return w / w.sum()


@dataclass(frozen=True)
class SplitSpec:
    """Validation fraction of the non-zero-shot pool; remainder trains."""

    val_fraction: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError(f"val_fraction must be in (0,1), got {self.val_fraction}")


@dataclass
class Dataset:
    train: list[AuctionRecord]
    validation: list[AuctionRecord]
    zero_shot: list[AuctionRecord]

    def all_records(self) -> list[AuctionRecord]:
        return self.train + self.validation + self.zero_shot


def _simulate_indexed(task) -> AuctionRecord:
    g, seed, index, reserve_policy, b_inc, keep_truth = task
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    features = draw_features(g, rng)
    truth = g.primitives(features)
    return simulate_auction(
        listing_id=f"L{index:06d}",
        features=features,
        truth=truth,
        reserve_policy=reserve_policy,
        b_inc=b_inc,
        rng=rng,
        g=g,
        sale_time=float(rng.random()),
        keep_truth=keep_truth,
    )


def generate_dataset(
    g: GroundTruthMap,
    count: int,
    split_spec: SplitSpec,
    zero_shot_brand: str,
    seed: int,
    reserve_policy: ReservePolicy = ReservePolicy(),
    b_inc: float = 250.0,
    keep_truth: bool = True,
    workers: int = 1,
) -> Dataset:
    """Simulate `count` listings and split them train/validation/zero-shot.

    Every listing with the withheld brand lands in the zero-shot slice, so
    that brand never appears in training. The remaining listings are shuffled
    deterministically; floor(val_fraction * rest) go to validation and the
    remainder to train. Per-listing RNG streams are derived from (seed,
    index), so the dataset is reproducible record by record and identical at
    any worker count.
    """
    if count < 10:
        raise ConfigError(f"dataset needs at least 10 listings, got {count}")
    if zero_shot_brand not in g.schema.brands:
        raise ConfigError(
            f"zero-shot brand {zero_shot_brand!r} not in schema brands {g.schema.brands}"
        )
    tasks = [(g, seed, i, reserve_policy, b_inc, keep_truth) for i in range(count)]
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            records = pool.map(_simulate_indexed, tasks, chunksize=64)
    else:
        records = [_simulate_indexed(t) for t in tasks]
    zero_shot = [r for r in records if r.features.brand == zero_shot_brand]
    rest = [r for r in records if r.features.brand != zero_shot_brand]
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, count, 1]))
    order = shuffle_rng.permutation(len(rest))
    n_val = int(np.floor(split_spec.val_fraction * len(rest)))
    val_idx = set(order[:n_val].tolist())
    validation = [rest[i] for i in sorted(val_idx)]
    train = [rest[i] for i in range(len(rest)) if i not in val_idx]
    return Dataset(train=train, validation=validation, zero_shot=zero_shot)


def write_records(path, records: list[AuctionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_records(path) -> list[AuctionRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(AuctionRecord.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad record ({exc})") from exc
    return out


def write_dataset(out_dir, dataset: Dataset, manifest_extra: dict | None = None) -> dict[str, str]:
    """Write the three split files plus a small manifest; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": str(out_dir / "train.jsonl"),
        "validation": str(out_dir / "validation.jsonl"),
        "zero_shot": str(out_dir / "zero_shot.jsonl"),
    }
    write_records(paths["train"], dataset.train)
    write_records(paths["validation"], dataset.validation)
    write_records(paths["zero_shot"], dataset.zero_shot)
    manifest = {
        "counts": {
            "train": len(dataset.train),
            "validation": len(dataset.validation),
            "zero_shot": len(dataset.zero_shot),
            "train_included": sum(not r.excluded for r in dataset.train),
            "validation_included": sum(not r.excluded for r in dataset.validation),
            "zero_shot_included": sum(not r.excluded for r in dataset.zero_shot),
        },
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(out_dir / "dataset_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["manifest"] = str(out_dir / "dataset_manifest.json")
    return paths


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    for name in ("train.jsonl", "validation.jsonl", "zero_shot.jsonl"):
        if not (data_dir / name).exists():
            raise DataError(f"missing dataset file {data_dir / name}")
    return Dataset(
        train=load_records(data_dir / "train.jsonl"),
        validation=load_records(data_dir / "validation.jsonl"),
        zero_shot=load_records(data_dir / "zero_shot.jsonl"),
    )
