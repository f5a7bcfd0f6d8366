"""irforge: build portable IR containers once, specialize them at deployment."""

__version__ = "0.1.0"
