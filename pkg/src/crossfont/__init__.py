"""Cross-font glyph retrieval: siamese dual-resolution encoding, multiscale
feature fusion, metric-learning training, exact retrieval evaluation, and a
query service for matching unknown glyphs against a gallery font."""

__version__ = "0.1.0"
