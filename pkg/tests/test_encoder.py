import numpy as np
import pytest

from auctiondemand.encoder import (
    Encoder,
    FeatureSchema,
    ListingFeatures,
    encode,
    load_external_embeddings,
    write_embedding_file,
)
from auctiondemand.errors import DomainError, FormatError
from auctiondemand.nn import zeros_like_state

FEATURES = ListingFeatures(
    mileage=42_000.0, horsepower=220.0, age=8.0, brand="apex",
    body_style="sedan", automatic=True,
)


class TestEncode:
    def test_identical_features_identical_embeddings(self):
        enc = Encoder.initialize(rng=np.random.default_rng(5))
        a = encode(enc, FEATURES)
        b = encode(enc, FEATURES)
        np.testing.assert_array_equal(a, b)

    def test_zero_encoder_zero_embedding(self):
        enc = Encoder.initialize(rng=np.random.default_rng(0))
        enc.state = zeros_like_state(enc.spec)
        np.testing.assert_array_equal(encode(enc, FEATURES), np.zeros(enc.q))

    def test_feature_perturbation_moves_embedding(self):
        enc = Encoder.initialize(rng=np.random.default_rng(1))
        base = encode(enc, FEATURES)
        moved = encode(enc, FEATURES.with_value("mileage", 120_000.0))
        assert np.linalg.norm(base - moved) > 0

    def test_embedding_dim(self):
        enc = Encoder.initialize(q=16, hidden=32, rng=np.random.default_rng(2))
        assert encode(enc, FEATURES).shape == (16,)

    def test_unknown_brand_rejected(self):
        enc = Encoder.initialize(rng=np.random.default_rng(3))
        with pytest.raises(DomainError):
            encode(enc, FEATURES.with_value("brand", "tucker"))


class TestFeatureSchema:
    def test_vector_layout(self):
        schema = FeatureSchema()
        vec = schema.vector(FEATURES)
        assert vec.shape == (schema.dim,)
        # one-hot blocks carry exactly one active entry each
        assert vec[4 : 4 + len(schema.brands)].sum() == 1.0
        assert vec[4 + len(schema.brands) :].sum() == 1.0

    def test_normalized_magnitudes(self):
        schema = FeatureSchema()
        vec = schema.vector(FEATURES)
        assert np.all(np.abs(vec[:3]) < 5.0)


class TestEmbeddingFile:
    def test_round_trip_full_precision(self, tmp_path):
        rng = np.random.default_rng(0)
        table = {f"L{i:04d}": rng.normal(size=7) for i in range(25)}
        path = tmp_path / "emb.dev"
        write_embedding_file(path, table)
        back = load_external_embeddings(path)
        assert set(back) == set(table)
        for key in table:
            np.testing.assert_array_equal(back[key], table[key])

    def test_empty_file_valid_header(self, tmp_path):
        path = tmp_path / "empty.dev"
        path.write_text("DEV v1 0 64\n")
        assert load_external_embeddings(path) == {}

    def test_dimension_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.dev"
        path.write_text("DEV v1 1 3\nL0\t1.0 2.0\n")
        with pytest.raises(FormatError):
            load_external_embeddings(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "dup.dev"
        path.write_text("DEV v1 2 1\nL0\t1.0\nL0\t2.0\n")
        with pytest.raises(FormatError):
            load_external_embeddings(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "hdr.dev"
        path.write_text("VEC v9 1 1\nL0\t1.0\n")
        with pytest.raises(FormatError):
            load_external_embeddings(path)

    def test_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "count.dev"
        path.write_text("DEV v1 3 1\nL0\t1.0\n")
        with pytest.raises(FormatError):
            load_external_embeddings(path)

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "nan.dev"
        path.write_text("DEV v1 1 2\nL0\t1.0 nan\n")
        with pytest.raises(FormatError):
            load_external_embeddings(path)
