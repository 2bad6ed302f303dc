"""Few-shot prototype segmentation with query-predicted thresholds."""

__version__ = "0.1.0"
