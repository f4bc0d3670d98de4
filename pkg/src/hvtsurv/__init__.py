"""Hierarchical windowed-attention survival prediction over patch-feature bags."""

__version__ = "0.1.0"
