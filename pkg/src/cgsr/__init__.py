"""Session-based recommendation from causality and correlation graphs."""

__version__ = "0.1.0"

from . import evaluate, explain, graphs, ingest, kernels, model, numcore, stats, trainer  # noqa: E402,F401
