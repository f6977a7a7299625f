"""Rank-aware EM training of cross-lingual sentence encoders, at desk scale."""
__version__ = "0.1.0"
