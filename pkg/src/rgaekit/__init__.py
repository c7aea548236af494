"""Relevance maps for toy multimodal pipelines and adaptive-pooling projectors."""

__version__ = "0.1.0"
