"""Query-aware block-sparse attention with gated branch combination.

Keys are grouped into fixed-size blocks and each block is compressed to one
(key, value) pair, by mean pooling or by a small learned MLP over the
flattened block.  Per query, three branches are computed and mixed by gates:

  * selection: ordinary attention over the tokens of the top-K scoring
    complete blocks that end before the query, plus the local window;
  * compression: attention over the compressed pairs of every block whose
    last token is causal for the query;
  * window: plain sliding-window attention.

The query's own in-progress block is never a selection candidate (local
coverage is the window branch's job), and only the block-selected tokens
count toward the per-query M*K token budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import band_mask, masked_attention
from .autodiff import Tape, Tensor


@dataclass
class PoolParams:
    """Two-layer MLP compressing a flattened block of M vectors to one."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class NsaParams:
    d_head: int
    block_size: int
    top_k: int
    w_swa: int
    pool_mode: str = "mean"
    key_pool: PoolParams | None = None
    value_pool: PoolParams | None = None
    gate_w: Tensor | None = None
    gate_b: Tensor | None = None


@dataclass
class NsaBranches:
    """Per-branch outputs and selection audit data from one forward pass."""

    a_slc: np.ndarray
    a_cmp: np.ndarray
    a_swa: np.ndarray
    gates: np.ndarray                  # [T, 3] in (slc, cmp, swa) order
    selected_blocks: list[np.ndarray]  # per query, ascending block indices
    selected_token_counts: np.ndarray  # per query, block-selected tokens only


def _init_pool(rng, m: int, d: int, hidden: int) -> PoolParams:
    def u(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape))

    return PoolParams(
        u(m * d, (m * d, hidden)), Tensor(np.zeros(hidden)),
        u(hidden, (hidden, d)), Tensor(np.zeros(d)),
    )


def init_nsa_params(
    d_head: int,
    block_size: int = 8,
    top_k: int = 4,
    w_swa: int = 8,
    pool_mode: str = "mean",
    seed: int = 0,
    hidden: int | None = None,
) -> NsaParams:
    if min(block_size, top_k, w_swa) < 1:
        raise ValueError("block_size, top_k and w_swa must all be >= 1")
    if pool_mode not in ("mean", "learned_mlp"):
        raise ValueError(f"unknown pool mode {pool_mode!r}")
    rng = np.random.default_rng(seed)
    p = NsaParams(d_head, block_size, top_k, w_swa, pool_mode)
    if pool_mode == "learned_mlp":
        hidden = hidden or block_size * d_head
        p.key_pool = _init_pool(rng, block_size, d_head, hidden)
        p.value_pool = _init_pool(rng, block_size, d_head, hidden)
    bound = 1.0 / np.sqrt(d_head)
    p.gate_w = Tensor(rng.uniform(-bound, bound, size=(d_head, 3)))
    p.gate_b = Tensor(np.zeros(3))
    return p


def block_pool(
    block: np.ndarray,
    mode: str,
    params: PoolParams | None = None,
    block_size: int | None = None,
) -> np.ndarray:
    """Compress one block of [m, d] vectors (1 <= m <= block_size) to [d]."""
    block = np.asarray(block)
    if block.ndim != 2 or block.shape[0] < 1:
        raise ValueError("block must be a non-empty [m, d] matrix")
    if mode == "mean":
        return block.mean(axis=0)
    if mode != "learned_mlp":
        raise ValueError(f"unknown pool mode {mode!r}")
    if params is None:
        raise ValueError("learned pooling needs parameters")
    m_full = block_size if block_size is not None else block.shape[0]
    flat = np.zeros(m_full * block.shape[1])
    flat[: block.size] = block.ravel()  # short tail blocks are zero-padded
    hidden = np.maximum(flat @ params.w1.data + params.b1.data, 0.0)
    return hidden @ params.w2.data + params.b2.data


def candidate_blocks(query_pos: int, n_complete: int, block_size: int) -> np.ndarray:
    """Complete blocks whose last token lies strictly before the query."""
    ends = (np.arange(n_complete) + 1) * block_size - 1
    return np.flatnonzero(ends < query_pos)


def block_scores(
    q_i: np.ndarray, pooled_keys: np.ndarray, query_pos: int, block_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Inner-product scores against each candidate block's pooled key.

    Returns (candidate block indices, scores aligned with them).
    """
    cand = candidate_blocks(query_pos, pooled_keys.shape[0], block_size)
    return cand, pooled_keys[cand] @ q_i


def select_topk_blocks(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K highest scores, ties won by the lower index.

    The result is sorted ascending; fewer than K entries means everything
    was selected.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")[:k]
    return np.sort(order)


def _pool_segments(k: Tensor, v: Tensor, n_cmp: int, p: NsaParams, tape):
    m, d = p.block_size, p.d_head
    if p.pool_mode == "mean":
        pool = np.zeros((n_cmp, k.shape[0]))
        for b in range(n_cmp):
            pool[b, b * m:(b + 1) * m] = 1.0 / m
        pool_t = Tensor(pool)
        return ad.matmul(pool_t, k, tape), ad.matmul(pool_t, v, tape)
    rows = np.arange(n_cmp * m)
    out = []
    for x, pp in ((k, p.key_pool), (v, p.value_pool)):
        flat = ad.reshape(ad.gather_rows(x, rows, tape), (n_cmp, m * d), tape)
        h = ad.relu(ad.linear(flat, pp.w1, pp.b1, tape), tape)
        out.append(ad.linear(h, pp.w2, pp.b2, tape))
    return out[0], out[1]


def nsa_forward(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: NsaParams,
    tape: Tape | None = None,
    fixed_gates: tuple[float, float, float] | None = None,
) -> tuple[Tensor, NsaBranches]:
    """Gated three-branch block-sparse attention for one head, [T, d] inputs.

    With ``fixed_gates`` the learned gate projection is bypassed; a gate of
    zero contributes exactly nothing, so (0, 0, 1) reproduces the window
    branch bit for bit.
    """
    t, d = q.shape
    m, big_k, w = params.block_size, params.top_k, params.w_swa
    n_cmp = t // m
    q4 = ad.reshape(q, (1, 1, t, d), tape)
    k4 = ad.reshape(k, (1, 1, t, d), tape)
    v4 = ad.reshape(v, (1, 1, t, d), tape)

    a_swa = masked_attention(q4, k4, v4, band_mask(t, w), tape=tape)

    # compression branch over complete causal blocks; queries inside the
    # first block see nothing and get zero rows
    if n_cmp > 0:
        k_cmp, v_cmp = _pool_segments(k, v, n_cmp, params, tape)
        kc4 = ad.reshape(k_cmp, (1, 1, n_cmp, d), tape)
        vc4 = ad.reshape(v_cmp, (1, 1, n_cmp, d), tape)
        ends = (np.arange(n_cmp) + 1) * m - 1
        cmp_mask = ends[None, :] <= np.arange(t)[:, None]
        a_cmp = masked_attention(q4, kc4, vc4, cmp_mask, tape=tape, empty_rows="zero")
        pooled_data = k_cmp.data
    else:
        a_cmp = Tensor(np.zeros((1, 1, t, d)))
        pooled_data = np.zeros((0, d))

    # selection: discrete top-K over pooled-key scores, then plain masked
    # attention over the winners' tokens plus the local window
    slc_mask = band_mask(t, w)
    selected: list[np.ndarray] = []
    counts = np.zeros(t, dtype=int)
    for i in range(t):
        cand, scores = block_scores(q.data[i], pooled_data, i, m)
        if cand.size:
            win = cand[select_topk_blocks(scores, big_k)]
            selected.append(win)
            counts[i] = win.size * m
            for bidx in win:
                slc_mask[i, bidx * m:(bidx + 1) * m] = True
        else:
            selected.append(np.zeros(0, dtype=int))
    a_slc = masked_attention(q4, k4, v4, slc_mask, tape=tape)

    if fixed_gates is not None:
        gates = np.tile(np.asarray(fixed_gates, dtype=float), (t, 1))
        mix = ad.add(
            ad.add(
                ad.scale(a_slc, fixed_gates[0], tape),
                ad.scale(a_cmp, fixed_gates[1], tape),
                tape,
            ),
            ad.scale(a_swa, fixed_gates[2], tape),
            tape,
        )
        out = ad.reshape(mix, (t, d), tape)
    else:
        g = ad.sigmoid(ad.linear(q, params.gate_w, params.gate_b, tape), tape)
        gates = g.data
        parts = []
        for col, branch in enumerate((a_slc, a_cmp, a_swa)):
            gc = ad.slice_axis(g, 1, col, col + 1, tape)  # [T, 1]
            parts.append(ad.mul(ad.reshape(branch, (t, d), tape), gc, tape))
        out = ad.add(ad.add(parts[0], parts[1], tape), parts[2], tape)

    aux = NsaBranches(
        a_slc.data.reshape(t, d), a_cmp.data.reshape(t, d), a_swa.data.reshape(t, d),
        gates, selected, counts,
    )
    return out, aux


def nsa_query_gather(
    q_i: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    pooled_k: np.ndarray,
    pooled_v: np.ndarray,
    query_pos: int,
    params: NsaParams,
    gates: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> np.ndarray:
    """Single-query path that touches only the tokens it attends to.

    This is the decode-style kernel used for cost measurements: its work per
    query is bounded by M*K + w + #blocks regardless of sequence length.
    """
    m, w = params.block_size, params.w_swa
    d = q_i.shape[0]
    scale = 1.0 / np.sqrt(d)
    i = query_pos

    def soft_attend(keys, values):
        s = keys @ q_i * scale
        e = np.exp(s - s.max())
        return (e / e.sum()) @ values

    lo = max(0, i - w + 1)
    a_swa = soft_attend(k[lo:i + 1], v[lo:i + 1])

    cand, scores = block_scores(q_i, pooled_k, i, m)
    idx = np.arange(lo, i + 1)
    if cand.size:
        win = cand[select_topk_blocks(scores, params.top_k)]
        tok = np.concatenate([np.arange(b * m, (b + 1) * m) for b in win])
        idx = np.unique(np.concatenate([tok, idx]))
    a_slc = soft_attend(k[idx], v[idx])

    ends = (np.arange(pooled_k.shape[0]) + 1) * m - 1
    vis = np.flatnonzero(ends <= i)
    a_cmp = soft_attend(pooled_k[vis], pooled_v[vis]) if vis.size else np.zeros(d)

    return gates[0] * a_slc + gates[1] * a_cmp + gates[2] * a_swa
