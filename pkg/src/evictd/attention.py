"""Causal attention kernels and the eviction index-set they must agree on.

The admission rule lives in exactly one place (:func:`admission_mask`):
a key j is visible to query i when it is a protected sink token, inside the
recent window, or carries a retention score above threshold.  The dense
reference path, the training-time masked attention, and the tiled two-stage
kernel all consume masks produced by the same rule, so a window off-by-one
cannot diverge silently between them.

Positions are 0-based throughout this package.  The recent window of query i
is ``j >= i - w``, which admits w+1 keys including the query itself.  The
plain sliding-window kernel (:func:`swa_attention`) uses the narrower
"w most recent including self" convention common for SWA baselines; the two
conventions are distinct on purpose and each is pinned by its own tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, _wrap

RETAIN_THRESHOLD = 0.5


def causal_mask(t: int) -> np.ndarray:
    """Boolean [t, t] lower-triangular mask: key j visible to query i iff j <= i."""
    return np.tril(np.ones((t, t), dtype=bool))


def band_mask(t: int, w: int) -> np.ndarray:
    """SWA mask: query i sees the w most recent keys including itself."""
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    return (j <= i) & (j >= i - w + 1)


def admission_mask(
    t: int,
    r_head: np.ndarray | None,
    s: int,
    w: int,
    retain_all: bool = False,
) -> np.ndarray:
    """Eviction admission rule as a boolean [t, t] mask for one head.

    Key j is admitted for query i iff j <= i and (j < s, or j >= i - w, or
    r_head[j] > 0.5).  ``retain_all`` short-circuits to the full causal mask,
    used by dense baselines and by the degenerate no-eviction configuration.
    """
    if retain_all:
        return causal_mask(t)
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    keep = (j < s) | (j >= i - w)
    if r_head is not None:
        r_head = np.asarray(r_head)
        if r_head.shape != (t,):
            raise ValueError(f"r_head must have shape ({t},), got {r_head.shape}")
        keep = keep | (r_head > RETAIN_THRESHOLD)[None, :]
    return keep & (j <= i)


def build_index_set(
    t: int, head: int, r: np.ndarray, s: int, w: int
) -> list[np.ndarray]:
    """Admitted key indices per query for one head, sorted ascending.

    ``r`` is the [t, heads] retention-score matrix; thresholding and the
    sink / window unions follow :func:`admission_mask` exactly.
    """
    r = np.asarray(r)
    if r.ndim != 2 or r.shape[0] != t:
        raise ValueError(f"r must be [t, heads] with t={t}, got {r.shape}")
    mask = admission_mask(t, r[:, head], s, w)
    return [np.flatnonzero(mask[i]) for i in range(t)]


def mask_from_index_set(index_set: list[np.ndarray]) -> np.ndarray:
    t = len(index_set)
    mask = np.zeros((t, t), dtype=bool)
    for i, idx in enumerate(index_set):
        mask[i, idx] = True
    return mask


def _softmax_masked(scores: np.ndarray, mask: np.ndarray, empty_rows: str) -> np.ndarray:
    """Row softmax with masked entries at -inf.

    Rows with no admitted key either raise (default) or come out all zero,
    which downstream turns into a zero output vector.
    """
    neg = np.where(mask, scores, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(rowmax)
    if empty.any():
        if empty_rows == "error":
            raise ValueError("attention row admits no keys")
        rowmax = np.where(empty, 0.0, rowmax)
    e = np.exp(neg - rowmax)
    e = np.where(mask, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


def dense_causal_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float | None = None
) -> np.ndarray:
    """Full causal softmax attention for a single head, [T, d] arrays."""
    t, d = q.shape
    if t == 0:
        return np.zeros((0, d))
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    p = _softmax_masked(q @ k.T * scale, causal_mask(t), "error")
    return p @ v


def masked_attention_oracle(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    index_set: list[np.ndarray],
    scale: float | None = None,
) -> np.ndarray:
    """Per-row reference: softmax restricted to the admitted indices.

    Deliberately written as an explicit per-query loop over gathered keys so
    it shares no code with the kernels it checks.
    """
    t, d = q.shape
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    out = np.zeros((t, d))
    for i in range(t):
        idx = np.asarray(index_set[i])
        if idx.size == 0:
            raise ValueError(f"query {i} admits no keys")
        if idx.max() > i:
            raise ValueError(f"query {i} admits future key {idx.max()}")
        s = q[i] @ k[idx].T * scale
        s = s - s.max()
        e = np.exp(s)
        out[i] = (e / e.sum()) @ v[idx]
    return out


def swa_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, w: int, scale: float | None = None
) -> np.ndarray:
    """Sliding-window attention: query i sees keys max(0, i-w+1)..i."""
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    t, d = q.shape
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    p = _softmax_masked(q @ k.T * scale, band_mask(t, w), "error")
    return p @ v


def masked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray,
    scale: float | None = None,
    tape: Tape | None = None,
    ste_scores: Tensor | None = None,
    empty_rows: str = "error",
) -> Tensor:
    """Batched multi-head attention under an arbitrary boolean mask.

    Shapes: q is [B, H, T, d]; k and v are [B, H, S, d] (S may differ from T
    for cross-attention onto a compressed segment); ``mask`` broadcasts to
    [B, H, T, S].  The forward uses np.matmul throughout so a [1, 1, T, d]
    call is bitwise identical to the corresponding single-head 2-D kernel.

    ``ste_scores`` (shape [B, S, H]) opts into the straight-through trick for
    training the retention scorer: the mask itself is a non-differentiable
    function of the scores, so instead the backward pass hands each score the
    inner product of its token's value vector with that value's incoming
    gradient.  A score therefore learns how useful its token's value would be
    to the queries that read it, without the threshold blocking the signal.
    """
    b, h, t, d = q.shape
    s_len = k.shape[2]
    if k.shape != (b, h, s_len, d) or v.shape != (b, h, s_len, d):
        raise ValueError("k, v must be [B, H, S, d] matching q's batch, heads, width")
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), (b, h, t, s_len))
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    p = _softmax_masked(scores, mask, empty_rows)
    out = _wrap(np.matmul(p, v.data))
    if tape is not None:
        inputs = [q, k, v]
        if ste_scores is not None:
            if ste_scores.shape != (b, s_len, h):
                raise ValueError(
                    f"ste_scores must be [B, S, H]=({b}, {s_len}, {h}), got {ste_scores.shape}"
                )
            inputs.append(ste_scores)

        def backward(go: np.ndarray):
            gp = np.matmul(go, np.swapaxes(v.data, -1, -2))
            gv = np.matmul(np.swapaxes(p, -1, -2), go)
            inner = (gp * p).sum(axis=-1, keepdims=True)
            gs = p * (gp - inner)
            gq = np.matmul(gs, k.data) * scale
            gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) * scale
            grads = [gq, gk, gv]
            if ste_scores is not None:
                grads.append(np.einsum("bhjd,bhjd->bjh", v.data, gv))
            return tuple(grads)

        tape.record(out, tuple(inputs), backward)
    return out


@dataclass
class TileEntry:
    """One (query tile, KV tile) pairing in the execution plan."""

    stage: str          # "swa" or "sparse"
    q_start: int        # query-row range [q_start, q_stop)
    q_stop: int
    kv_start: int       # slot range within the stage's segment
    kv_stop: int
    skipped: bool


@dataclass
class TilePlan:
    """Audit record of which tiles the two-stage kernel touched or skipped."""

    tile: int
    w: int
    q_positions: np.ndarray
    window_positions: np.ndarray
    compact_positions: np.ndarray
    entries: list[TileEntry] = field(default_factory=list)

    def processed(self, stage: str) -> list[TileEntry]:
        return [e for e in self.entries if e.stage == stage and not e.skipped]

    def skipped(self, stage: str) -> list[TileEntry]:
        return [e for e in self.entries if e.stage == stage and e.skipped]


def _stage1_admit(qpos: np.ndarray, kpos: np.ndarray, w: int) -> np.ndarray:
    i = qpos[:, None]
    j = kpos[None, :]
    return (j <= i) & (j >= i - w)


def _stage2_admit(qpos: np.ndarray, kpos: np.ndarray, w: int) -> np.ndarray:
    return kpos[None, :] < qpos[:, None] - w


def two_stage_sparse_attention(
    q: np.ndarray,
    k_window: np.ndarray,
    v_window: np.ndarray,
    window_positions: np.ndarray,
    k_compact: np.ndarray,
    v_compact: np.ndarray,
    compact_positions: np.ndarray,
    w: int,
    q_positions: np.ndarray | None = None,
    tile: int = 16,
    scale: float | None = None,
) -> tuple[np.ndarray, TilePlan]:
    """Tiled attention over a recent window plus a compacted retained segment.

    Stage one scans the window segment under the band rule ``i-w <= j <= i``;
    stage two scans the compacted segment, admitting only positions strictly
    older than the window (``j < i - w``), so a position duplicated across
    both segments is never double counted.  A softmax accumulator (running
    max, normalizer, weighted value sum) carries across both stages, the same
    scheme a fused kernel would use.  Tiles whose position ranges cannot
    admit any (query, key) pair are skipped, and every skip or visit is
    recorded in the returned :class:`TilePlan`.

    All arrays are single-head: q [Tq, d], segments [n, d] with their original
    token positions.  Compacted slot order is irrelevant; only positions
    enter the masking.
    """
    tq, d = q.shape
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    if q_positions is None:
        q_positions = np.arange(tq)
    q_positions = np.asarray(q_positions)
    window_positions = np.asarray(window_positions)
    compact_positions = np.asarray(compact_positions)
    if np.unique(compact_positions).size != compact_positions.size:
        raise ValueError("compacted segment holds duplicate positions")
    plan = TilePlan(tile, w, q_positions, window_positions, compact_positions)

    m = np.full(tq, -np.inf)
    l = np.zeros(tq)
    acc = np.zeros((tq, d))

    def visit(stage, i0, i1, kv0, kv1, kmat, vmat, kpos, admit):
        qp = q_positions[i0:i1]
        kp = kpos[kv0:kv1]
        mask = admit(qp, kp, w)
        if not mask.any():
            plan.entries.append(TileEntry(stage, i0, i1, kv0, kv1, True))
            return
        plan.entries.append(TileEntry(stage, i0, i1, kv0, kv1, False))
        s = q[i0:i1] @ kmat[kv0:kv1].T * scale
        s = np.where(mask, s, -np.inf)
        m_old = m[i0:i1]
        m_new = np.maximum(m_old, s.max(axis=-1))
        finite = np.isfinite(m_new)
        shift = np.where(finite, m_new, 0.0)
        e = np.where(mask, np.exp(s - shift[:, None]), 0.0)
        corr = np.where(np.isfinite(m_old), np.exp(m_old - shift), 0.0)
        l[i0:i1] = l[i0:i1] * corr + e.sum(axis=-1)
        acc[i0:i1] = acc[i0:i1] * corr[:, None] + e @ vmat[kv0:kv1]
        m[i0:i1] = m_new

    # tile-level skip tests use position extrema, so they are exact: a tile is
    # dropped only when no pair inside it can be admitted
    for i0 in range(0, tq, tile):
        i1 = min(i0 + tile, tq)
        qlo, qhi = q_positions[i0:i1].min(), q_positions[i0:i1].max()
        for kv0 in range(0, len(window_positions), tile):
            kv1 = min(kv0 + tile, len(window_positions))
            kp = window_positions[kv0:kv1]
            if kp.min() > qhi or kp.max() < qlo - w:
                plan.entries.append(TileEntry("swa", i0, i1, kv0, kv1, True))
                continue
            visit("swa", i0, i1, kv0, kv1, k_window, v_window, window_positions, _stage1_admit)
        for kv0 in range(0, len(compact_positions), tile):
            kv1 = min(kv0 + tile, len(compact_positions))
            kp = compact_positions[kv0:kv1]
            if kp.min() >= qhi - w:
                plan.entries.append(TileEntry("sparse", i0, i1, kv0, kv1, True))
                continue
            visit(
                "sparse", i0, i1, kv0, kv1, k_compact, v_compact, compact_positions, _stage2_admit
            )

    if not (l > 0).all():
        raise ValueError("some query admitted no keys across both stages")
    return acc / l[:, None], plan
