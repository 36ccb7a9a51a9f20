"""Encode a knowledge graph into a Graph Convolution Transformer and read it back."""

__version__ = "0.1.0"
