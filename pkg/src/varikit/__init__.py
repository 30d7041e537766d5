"""Plug-and-play sequence-compression plugins for a frozen Transformer encoder."""

__version__ = "0.1.0"
