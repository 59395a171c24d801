"""Per-head retention scorer: a small grouped dilated CNN over (K, V) pairs.

Each KV head gets its own convolutional group, so a head's scores depend on
that head's keys and values only.  Three kernel-3 dilation-2 layers give a
receptive field of 13 tokens (six on each side), and a final kernel-1 map
squeezes to one sigmoid score per token per head.

Padding happens once, on the raw (K, V) sequence, never between layers.
A score therefore depends on exactly the 13-token input slab around its
position, and the decode-time path (:func:`score_center`) that feeds one such
slab at a time reproduces batch-computed scores bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConvParams, Tape, Tensor

KERNEL = 3
DILATION = 2
N_CONV_LAYERS = 3
RECEPTIVE_FIELD = 1 + N_CONV_LAYERS * (KERNEL - 1) * DILATION  # 13
HALF_FIELD = RECEPTIVE_FIELD // 2  # 6

_PADDING = {
    "train": (HALF_FIELD, HALF_FIELD),  # scores for every position
    "deferred": (HALF_FIELD, 0),        # scores only where the future is known
    "valid": (0, 0),                    # caller supplies the full slab
}


@dataclass
class RetentionScorerParams:
    """Weights of the scorer: three dilated convs plus the kernel-1 head map.

    Channel widths per group: 2*d_head in, then d_head, d_head/2, d_head/4,
    then the scalar output.  All biases start at zero so an all-zero input
    scores exactly sigmoid(0) = 0.5.
    """

    n_heads: int
    d_head: int
    convs: list[ConvParams]
    dropout_p: float = 0.1

    def param_count(self) -> int:
        return sum(p.weight.size + p.bias.size for p in self.convs)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, p in enumerate(self.convs):
            out[f"{prefix}.conv{i}.weight"] = p.weight
            out[f"{prefix}.conv{i}.bias"] = p.bias
        return out


def scorer_channel_widths(d_head: int) -> list[int]:
    if d_head % 4 != 0:
        raise ValueError(f"d_head must be divisible by 4, got {d_head}")
    return [2 * d_head, d_head, d_head // 2, d_head // 4, 1]


def scorer_param_count(n_heads: int, d_head: int) -> int:
    """Parameter count without materializing weights (for size reports)."""
    widths = scorer_channel_widths(d_head)
    total = 0
    for i in range(N_CONV_LAYERS):
        total += n_heads * (widths[i + 1] * widths[i] * KERNEL + widths[i + 1])
    total += n_heads * (widths[-1] * widths[-2] + widths[-1])
    return total


def init_scorer_params(
    n_heads: int, d_head: int, seed: int, dropout_p: float = 0.1
) -> RetentionScorerParams:
    """Fan-in uniform weights, zero biases (training starts at r = 0.5)."""
    widths = scorer_channel_widths(d_head)
    rng = np.random.default_rng(seed)
    convs = []
    kernels = [KERNEL] * N_CONV_LAYERS + [1]
    for i, k in enumerate(kernels):
        cin, cout = widths[i], widths[i + 1]
        bound = 1.0 / np.sqrt(cin * k)
        w = rng.uniform(-bound, bound, size=(n_heads, cout, cin, k))
        convs.append(ConvParams(Tensor(w), Tensor(np.zeros((n_heads, cout)))))
    return RetentionScorerParams(n_heads, d_head, convs, dropout_p)


def score_tokens(
    k_pre_rope: Tensor,
    v_pre_rope: Tensor,
    params: RetentionScorerParams,
    mode: str,
    seed: int | None = None,
    tape: Tape | None = None,
    dropout_mode: str = "eval",
) -> Tensor:
    """Retention scores in (0, 1) for a batch of pre-rotation (K, V) pairs.

    Inputs are [T, H, d] or [B, T, H, d]; both must be pre-rotation values so
    the scores are position-free.  Output is [.., T', H] where T' depends on
    ``mode``: "train" pads both ends and scores every token, "deferred" pads
    only the left so the last six positions (whose right context is still
    unwritten) stay unscored, "valid" applies no padding at all.
    """
    if mode not in _PADDING:
        raise ValueError(f"mode must be one of {sorted(_PADDING)}, got {mode!r}")
    if k_pre_rope.shape != v_pre_rope.shape:
        raise ValueError("K and V must have identical shapes")
    squeeze = k_pre_rope.ndim == 3
    if squeeze:
        k_pre_rope = ad.reshape(k_pre_rope, (1,) + k_pre_rope.shape, tape)
        v_pre_rope = ad.reshape(v_pre_rope, (1,) + v_pre_rope.shape, tape)
    b, t, h, d = k_pre_rope.shape
    if h != params.n_heads or d != params.d_head:
        raise ValueError(
            f"expected heads={params.n_heads}, d_head={params.d_head}, got ({h}, {d})"
        )
    if t < 1:
        raise ValueError("need at least one token")
    left, right = _PADDING[mode]
    span = N_CONV_LAYERS * (KERNEL - 1) * DILATION
    if t + left + right - span < 1:
        return Tensor(np.zeros((b, 0, h)) if not squeeze else np.zeros((0, h)))

    x = ad.concat([k_pre_rope, v_pre_rope], -1, tape)  # [B, T, H, 2d]
    x = ad.transpose(x, (0, 2, 3, 1), tape)                     # [B, H, 2d, T]
    use_dropout = dropout_mode == "train" and params.dropout_p > 0.0
    if use_dropout and seed is None:
        raise ValueError("training-mode dropout needs a seed")
    for i in range(N_CONV_LAYERS):
        pads = (left, right) if i == 0 else (0, 0)
        x = ad.grouped_dilated_conv1d(x, params.convs[i], DILATION, *pads, tape=tape)
        x = ad.swish(x, tape)
        if use_dropout:
            x = ad.dropout(x, params.dropout_p, "train", seed=(seed, i), tape=tape)
    x = ad.grouped_dilated_conv1d(x, params.convs[-1], 1, 0, 0, tape=tape)  # [B, H, 1, T']
    t_out = x.shape[-1]
    x = ad.reshape(x, (b, h, t_out), tape)
    x = ad.transpose(x, (0, 2, 1), tape)  # [B, T', H]
    r = ad.sigmoid(x, tape)
    if squeeze:
        r = ad.reshape(r, (t_out, h), tape)
    return r


def score_center(
    k_slab: np.ndarray, v_slab: np.ndarray, params: RetentionScorerParams
) -> np.ndarray:
    """Score the middle token of one full 13-token slab, returning [H].

    The slab must contain the receptive field exactly; the caller zero-fills
    slots for positions before the sequence start.  No dropout, no tape.
    """
    if k_slab.shape[0] != RECEPTIVE_FIELD:
        raise ValueError(
            f"slab must hold exactly {RECEPTIVE_FIELD} tokens, got {k_slab.shape[0]}"
        )
    r = score_tokens(Tensor(k_slab), Tensor(v_slab), params, mode="valid")
    return r.data[0]


def binarize(r: np.ndarray) -> np.ndarray:
    """Keep decision per score: strictly greater than 0.5 retains the token."""
    return np.asarray(r) > 0.5


def scorer_receptive_bounds(j: int) -> tuple[int, int]:
    """Token range a score depends on, in 1-based indexing, left-clamped to 1.

    This is the one deliberately 1-based function in the package, matching
    the human-facing convention of "token number j"; everything internal is
    0-based.
    """
    if j < 1:
        raise ValueError("token numbers are 1-based")
    return (max(1, j - HALF_FIELD), j + HALF_FIELD)
