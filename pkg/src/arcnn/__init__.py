"""Aligned two-stream region detection for weakly aligned image pairs.

Submodules: ``geom`` (boxes, shift targets, NMS), ``tensornet`` (numeric
layers and RoIAlign), ``annot`` (paired annotations), ``detector`` (the
region detector), ``synthtrain`` (synthetic data and training),
``evaluation`` (miss rate and shift sweeps), ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
