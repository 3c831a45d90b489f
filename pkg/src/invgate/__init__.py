"""Invariance-gated two-modality ensemble training on a synthetic testbed."""

__version__ = "0.1.0"
