"""Graph-guided test-time adaptation, numpy only."""

__version__ = "0.1.0"
