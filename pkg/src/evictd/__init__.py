"""Learned token eviction for hybrid linear-attention models.

The package provides a per-head retention scorer, a constant-size two-segment
KV cache with lazy scoring, tiled sparse attention kernels, straight-through
training utilities with an adaptive sparsity controller, and reference
implementations of a gated delta-rule mixer and blockwise sparse attention.
"""

__version__ = "0.1.0"
