"""Temporal QoS prediction with target-prompt graph attention and a Transformer encoder."""

__version__ = "0.1.0"
