"""Dynamically gated inter/intra-modality attention fusion on a small autodiff core."""

__version__ = "0.1.0"
