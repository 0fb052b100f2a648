"""Hierarchical multi-modal contrastive pre-training on synthetic human data."""

__version__ = "0.1.0"
