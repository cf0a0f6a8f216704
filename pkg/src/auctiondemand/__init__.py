"""Structural demand estimation for English auctions from listing embeddings."""

__version__ = "0.1.0"
