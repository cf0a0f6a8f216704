"""Trainable feature encoder standing in for a text encoder.

Listings are described by a small structured feature set (mileage,
horsepower, age, transmission, brand, body style). The encoder maps the
normalized feature vector to a q-dimensional embedding; downstream training
consumes embeddings through one interface whether they come from this
encoder or from an external embedding-matrix file, so a real text encoder
can be swapped in without touching the estimation code.

Embedding-matrix file format (shared contract with the external adapter):

    DEV v1 <count> <q>
    <listing_id>\t<q space-separated decimal floats>

Floats are written with shortest round-trip precision, so write -> read is
lossless.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, DomainError, FormatError
from .nn import NetworkSpec, NetworkState, forward, init_state

Embedding = np.ndarray

DEFAULT_BRANDS = ("apex", "borealis", "cascade", "dune")
DEFAULT_BODY_STYLES = ("coupe", "sedan", "wagon")

DEFAULT_EMBEDDING_DIM = 64
DEFAULT_HIDDEN_DIM = 128


@dataclass(frozen=True)
class ListingFeatures:
    """One listing's structured features, stored in level units."""

    mileage: float
    horsepower: float
    age: float
    brand: str
    body_style: str
    automatic: bool = False

    def to_dict(self) -> dict:
        return {
            "mileage": self.mileage,
            "horsepower": self.horsepower,
            "age": self.age,
            "brand": self.brand,
            "body_style": self.body_style,
            "automatic": self.automatic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ListingFeatures":
        return cls(
            mileage=float(d["mileage"]),
            horsepower=float(d["horsepower"]),
            age=float(d["age"]),
            brand=str(d["brand"]),
            body_style=str(d["body_style"]),
            automatic=bool(d["automatic"]),
        )

    def with_value(self, feature: str, value) -> "ListingFeatures":
        if feature not in self.to_dict():
            raise DomainError(f"unknown feature {feature!r}")
        return replace(self, **{feature: value})


@dataclass(frozen=True)
class FeatureSchema:
    """Feature-vector layout plus fixed normalization constants.

    Normalization is affine with constants chosen for the generator's
    feature ranges (not estimated from data), so vectors are O(1) and the
    mapping is identical across splits and runs.
    """

    brands: tuple[str, ...] = DEFAULT_BRANDS
    body_styles: tuple[str, ...] = DEFAULT_BODY_STYLES
    log_mileage_center: float = 11.0
    log_mileage_scale: float = 1.0
    log_horsepower_center: float = 5.3
    log_horsepower_scale: float = 0.5
    age_center: float = 15.0
    age_scale: float = 12.0

    @property
    def dim(self) -> int:
        return 4 + len(self.brands) + len(self.body_styles)

    def vector(self, f: ListingFeatures) -> np.ndarray:
        if f.mileage < 0 or f.horsepower <= 0 or f.age < 0:
            raise DomainError(f"features out of range: {f}")
        if f.brand not in self.brands:
            raise DomainError(f"unknown brand {f.brand!r}")
        if f.body_style not in self.body_styles:
            raise DomainError(f"unknown body style {f.body_style!r}")
        numeric = [
            (np.log1p(f.mileage) - self.log_mileage_center) / self.log_mileage_scale,
            (np.log(f.horsepower) - self.log_horsepower_center) / self.log_horsepower_scale,
            (f.age - self.age_center) / self.age_scale,
            1.0 if f.automatic else 0.0,
        ]
        brand_hot = [1.0 if b == f.brand else 0.0 for b in self.brands]
        body_hot = [1.0 if s == f.body_style else 0.0 for s in self.body_styles]
        return np.array(numeric + brand_hot + body_hot)


def encoder_spec(schema: FeatureSchema, q: int = DEFAULT_EMBEDDING_DIM,
                 hidden: int = DEFAULT_HIDDEN_DIM) -> NetworkSpec:
    """Default architecture: input -> hidden -> q with LayerNorm + SiLU."""
    return NetworkSpec(
        (schema.dim, hidden, q), ("silu", "identity"), (True, False)
    )


@dataclass
class Encoder:
    """Bundle of schema, architecture, and weights; a pure function of both."""

    schema: FeatureSchema
    spec: NetworkSpec
    state: NetworkState

    @property
    def q(self) -> int:
        return self.spec.layer_dims[-1]

    @classmethod
    def initialize(cls, schema: FeatureSchema | None = None,
                   q: int = DEFAULT_EMBEDDING_DIM, hidden: int = DEFAULT_HIDDEN_DIM,
                   rng: np.random.Generator | None = None) -> "Encoder":
        schema = schema or FeatureSchema()
        spec = encoder_spec(schema, q=q, hidden=hidden)
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(schema, spec, init_state(spec, rng))

    def encode(self, f: ListingFeatures) -> Embedding:
        return encode(self, f)


def encode(encoder: Encoder, f: ListingFeatures) -> Embedding:
    """Deterministic forward pass from features to the embedding."""
    x = encoder.schema.vector(f)
    if x.shape[0] != encoder.spec.layer_dims[0]:
        raise DimensionError(
            f"feature dim {x.shape[0]} does not match encoder input "
            f"{encoder.spec.layer_dims[0]}"
        )
    out, _ = forward(encoder.spec, encoder.state, x)
    return out


def write_embedding_file(path, embeddings: dict[str, np.ndarray]) -> None:
    """Write the id -> vector map in the DEV v1 text format."""
    dims = {np.asarray(v).shape for v in embeddings.values()}
    if len(dims) > 1:
        raise DimensionError(f"inconsistent embedding dims: {sorted(dims)}")
    q = next(iter(dims))[0] if dims else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"DEV v1 {len(embeddings)} {q}\n")
        for listing_id, vec in embeddings.items():
            values = " ".join(repr(float(x)) for x in np.asarray(vec))
            fh.write(f"{listing_id}\t{values}\n")


def load_external_embeddings(path) -> dict[str, np.ndarray]:
    """Read and validate a DEV v1 embedding-matrix file."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        parts = header.split()
        if len(parts) != 4 or parts[0] != "DEV" or parts[1] != "v1":
            raise FormatError(f"{path}: bad header {header!r}")
        try:
            count, q = int(parts[2]), int(parts[3])
        except ValueError:
            raise FormatError(f"{path}: non-integer count/dimension in header") from None
        if count < 0 or q < 0:
            raise FormatError(f"{path}: negative count/dimension in header")

        out: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) != 2:
                raise FormatError(f"{path}:{lineno}: expected '<id>\\t<floats>'")
            listing_id, payload = cells
            if listing_id in out:
                raise FormatError(f"{path}:{lineno}: duplicate id {listing_id!r}")
            try:
                vec = np.array([float(x) for x in payload.split()], dtype=float)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value") from None
            if vec.shape[0] != q:
                raise FormatError(
                    f"{path}:{lineno}: row has {vec.shape[0]} values, header says {q}"
                )
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"{path}:{lineno}: non-finite value for id {listing_id!r}")
            out[listing_id] = vec
    if len(out) != count:
        raise FormatError(f"{path}: header declares {count} rows, found {len(out)}")
    return out
