"""Rotary position embeddings with exact inversion.

Keys are cached after rotation, but the retention scorer wants position-free
inputs, so this module provides both directions: ``apply_rope`` applies the usual
interleaved-pair rotation and ``invert_rope`` undoes it exactly by reusing the
same table entries with the sine negated.  Because every angle is a table
lookup rather than a recomputation, un-rotating a cached key recovers the
pre-rotation vector with only the rounding of the four multiplies involved,
independent of when or in which batch the rotation happened.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, _wrap


class SinusoidTable:
    """Append-only table of cos/sin at integer positions.

    Frequencies follow the standard geometric schedule ``base ** (-2i/d)``
    for pair index i, or may be given explicitly via ``freqs`` (one entry
    per pair).  The table grows on demand; rows once computed are never
    recomputed, so lookups are reproducible across calls.
    """

    def __init__(
        self,
        d_head: int,
        base: float = 10000.0,
        freqs: np.ndarray | None = None,
        initial_capacity: int = 64,
    ):
        if d_head < 2 or d_head % 2 != 0:
            raise ValueError(f"d_head must be a positive even number, got {d_head}")
        if freqs is None:
            freqs = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
        else:
            freqs = np.asarray(freqs, dtype=np.float64)
            if freqs.shape != (d_head // 2,):
                raise ValueError(
                    f"freqs must have one entry per pair ({d_head // 2}), got {freqs.shape}"
                )
        self.d_head = d_head
        self.freqs = freqs
        self._cos = np.zeros((0, d_head // 2))
        self._sin = np.zeros((0, d_head // 2))
        self._ensure(initial_capacity)

    def __len__(self) -> int:
        return self._cos.shape[0]

    def _ensure(self, n: int) -> None:
        have = self._cos.shape[0]
        if n <= have:
            return
        pos = np.arange(have, n, dtype=np.float64)
        angles = np.outer(pos, self.freqs)
        self._cos = np.concatenate([self._cos, np.cos(angles)], axis=0)
        self._sin = np.concatenate([self._sin, np.sin(angles)], axis=0)

    def cos_sin(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return cos/sin rows for the given non-negative integer positions."""
        positions = np.asarray(positions)
        if positions.size and positions.min() < 0:
            raise ValueError("positions must be non-negative")
        if positions.size:
            self._ensure(int(positions.max()) + 1)
        return self._cos[positions], self._sin[positions]


def _split_pairs(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x[..., 0::2], x[..., 1::2]


def _merge_pairs(even: np.ndarray, odd: np.ndarray) -> np.ndarray:
    out = np.empty(even.shape[:-1] + (even.shape[-1] * 2,), dtype=even.dtype)
    out[..., 0::2] = even
    out[..., 1::2] = odd
    return out


def apply_rope(x: np.ndarray, positions: np.ndarray, table: SinusoidTable) -> np.ndarray:
    """Rotate each interleaved pair of ``x[..., t, :]`` by ``positions[t] * freq``.

    ``x`` has shape [..., T, d_head] and ``positions`` shape [T].
    """
    c, s = table.cos_sin(positions)
    even, odd = _split_pairs(x)
    return _merge_pairs(even * c - odd * s, even * s + odd * c)


def invert_rope(
    x: np.ndarray,
    positions: np.ndarray,
    table: SinusoidTable,
    offset: int = 0,
) -> np.ndarray:
    """Exact inverse of :func:`apply_rope` at ``positions + offset``.

    Implemented as rotation by the negated angle, i.e. the same table rows
    with the sign of the sine flipped.  ``offset`` lets callers hold
    window-relative positions and supply the window origin separately.
    """
    c, s = table.cos_sin(np.asarray(positions) + offset)
    even, odd = _split_pairs(x)
    return _merge_pairs(even * c + odd * s, odd * c - even * s)


def rope(
    x: Tensor,
    positions: np.ndarray,
    table: SinusoidTable,
    tape: Tape | None = None,
) -> Tensor:
    """Differentiable rotary embedding.

    The backward pass rotates the incoming gradient by the negated angles,
    which is the transpose of the (orthogonal) forward rotation.
    """
    positions = np.asarray(positions)
    out = _wrap(apply_rope(x.data, positions, table))
    if tape is not None:
        def backward(g: np.ndarray):
            return (invert_rope(g, positions, table),)

        tape.record(out, (x,), backward)
    return out
