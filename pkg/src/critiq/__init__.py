"""Conversational recommender engine: a multimodal VAE over interactions
and keyphrase usage, with a self-supervised gated critiquing module."""

__version__ = "0.1.0"
