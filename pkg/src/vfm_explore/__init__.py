"""Multi-agent grid-world exploration with visit-frequency maps."""

__version__ = "0.1.0"
