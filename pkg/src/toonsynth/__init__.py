"""Synthetic cartoon segmentation data: chroma-key extraction, scene composition,
color harmonization, AP evaluation and reference loss kernels."""
from __future__ import annotations

__version__ = "0.1.0"
