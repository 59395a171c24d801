"""Hybrid decoder stack and its decoding session.

Layers alternate per the config pattern between gated delta-rule mixers and
attention mixers (eviction-scored, plain sliding-window, or full causal),
each followed by a gated MLP, with pre-norm residuals throughout.  To keep
parameter draws aligned across patterns, every attention-family layer draws
its retention-scorer weights at init even when the layer kind never uses
them; swapping "lte" for "dense" at the same position therefore yields a
bit-identical initialization.

Training uses full-sequence masked attention; decoding runs token by token
against per-layer caches (constant-size two-segment cache for eviction
layers), which is what the replay verification exercises.
"""

from __future__ import annotations

import numpy as np

from . import attention as at
from . import autodiff as ad
from . import gdn as gd
from . import rope as rp
from . import scorer as sc
from .autodiff import Tape, Tensor
from .cache import DenseCache, LayerKvCache, SlidingWindowCache
from .config import ModelConfig


def make_table(cfg: ModelConfig) -> rp.SinusoidTable:
    return rp.SinusoidTable(cfg.d_head, base=cfg.rope_base)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Draw all parameters in a fixed, pattern-independent order per layer."""
    rng = np.random.default_rng(seed)
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    params: dict[str, Tensor] = {}
    params["embed.weight"] = Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.vocab_size, d))
    )
    for i, kind in enumerate(cfg.pattern):
        L = f"layer{i}"
        params[f"{L}.norm1.gain"] = Tensor(np.ones(d))
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{L}.{name}"] = _uniform(rng, d, (d, d))
        if kind == "gdn":
            params[f"{L}.gate_a.weight"] = _uniform(rng, d, (d, h))
            params[f"{L}.gate_a.bias"] = Tensor(np.full(h, 2.0))
            params[f"{L}.gate_b.weight"] = _uniform(rng, d, (d, h))
            params[f"{L}.gate_b.bias"] = Tensor(np.zeros(h))
        else:
            scorer_seed = int(rng.integers(2**63))
            sp = sc.init_scorer_params(h, dh, scorer_seed, dropout_p=cfg.dropout_p)
            for j, conv in enumerate(sp.convs):
                params[f"{L}.scorer.conv{j}.weight"] = conv.weight
                params[f"{L}.scorer.conv{j}.bias"] = conv.bias
        params[f"{L}.norm2.gain"] = Tensor(np.ones(d))
        r = cfg.mlp_ratio
        params[f"{L}.mlp.w1"] = _uniform(rng, d, (d, r * d))
        params[f"{L}.mlp.b1"] = Tensor(np.zeros(r * d))
        params[f"{L}.mlp.w2"] = _uniform(rng, r * d, (r * d, d))
        params[f"{L}.mlp.b2"] = Tensor(np.zeros(d))
    params["final_norm.gain"] = Tensor(np.ones(d))
    params["unembed.weight"] = _uniform(rng, d, (d, cfg.vocab_size))
    return params


def scorer_params_view(
    params: dict[str, Tensor], cfg: ModelConfig, layer: int
) -> sc.RetentionScorerParams:
    """The scorer weights of one layer, sharing tensors with the flat dict."""
    convs = [
        sc.ConvParams(
            params[f"layer{layer}.scorer.conv{j}.weight"],
            params[f"layer{layer}.scorer.conv{j}.bias"],
        )
        for j in range(4)
    ]
    return sc.RetentionScorerParams(cfg.n_heads, cfg.d_head, convs, cfg.dropout_p)


def _split_heads(x: Tensor, b, t, h, dh, tape):
    x4 = ad.reshape(x, (b, t, h, dh), tape)
    return ad.transpose(x4, (0, 2, 1, 3), tape), x4


def _merge_heads(x: Tensor, b, t, d, tape):
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3), tape), (b, t, d), tape)


def retention_mask(r_values: np.ndarray, t: int, w: int, s: int) -> np.ndarray:
    """Eviction-attention admission mask [B, H, T, T] from score values.

    A key j is visible to query i when causal and either sink (j < s),
    recent (j >= i - w), or scored above threshold.  Built from raw score
    values, so no gradient flows through the mask.
    """
    tt = np.arange(t)[:, None]
    jj = np.arange(t)[None, :]
    causal = jj <= tt
    static = (jj < s) | (jj >= tt - w)
    retained = np.transpose(r_values > at.RETAIN_THRESHOLD, (0, 2, 1))  # [B, H, T]
    return (static[None, None] | retained[:, :, None, :]) & causal[None, None]


def _attention_mixer(
    params, cfg, layer, kind, xn, table, tape, dropout_seed, training
):
    b, t, d = xn.shape
    h, dh = cfg.n_heads, cfg.d_head
    L = f"layer{layer}"
    q = ad.linear(xn, params[f"{L}.wq"], None, tape)
    k = ad.linear(xn, params[f"{L}.wk"], None, tape)
    v = ad.linear(xn, params[f"{L}.wv"], None, tape)
    qh, _ = _split_heads(q, b, t, h, dh, tape)
    kh, k_pre = _split_heads(k, b, t, h, dh, tape)
    vh, v4 = _split_heads(v, b, t, h, dh, tape)
    positions = np.arange(t)
    qr = rp.rope(qh, positions, table, tape)
    kr = rp.rope(kh, positions, table, tape)

    r = None
    ste = None
    if kind == "lte" and cfg.retention_override != "retain_all":
        scorer_seed = None
        dropout_mode = "eval"
        if training and cfg.dropout_p > 0.0:
            scorer_seed = 1_000_003 * (dropout_seed or 0) + layer
            dropout_mode = "train"
        r = sc.score_tokens(
            k_pre,
            v4,
            scorer_params_view(params, cfg, layer),
            mode="train",
            seed=scorer_seed,
            tape=tape,
            dropout_mode=dropout_mode,
        )
        mask = retention_mask(r.data, t, cfg.window_w, cfg.sink_s)
        ste = r if tape is not None else None
    elif kind == "swa":
        mask = at.band_mask(t, cfg.window_w)[None, None]
    else:  # dense, or lte with retention overridden
        mask = at.causal_mask(t)[None, None]

    att = at.masked_attention(qr, kr, vh, mask, tape=tape, ste_scores=ste)
    merged = _merge_heads(att, b, t, d, tape)
    return ad.linear(merged, params[f"{L}.wo"], None, tape), r


def _gdn_mixer(params, cfg, layer, xn, tape):
    b, t, d = xn.shape
    h, dh = cfg.n_heads, cfg.d_head
    L = f"layer{layer}"
    q = ad.linear(xn, params[f"{L}.wq"], None, tape)
    k = ad.linear(xn, params[f"{L}.wk"], None, tape)
    v = ad.linear(xn, params[f"{L}.wv"], None, tape)
    qh, _ = _split_heads(q, b, t, h, dh, tape)
    kh, _ = _split_heads(k, b, t, h, dh, tape)
    vh, _ = _split_heads(v, b, t, h, dh, tape)
    qn = ad.l2_normalize(qh, tape)
    kn = ad.l2_normalize(kh, tape)
    alpha = ad.sigmoid(
        ad.linear(xn, params[f"{L}.gate_a.weight"], params[f"{L}.gate_a.bias"], tape),
        tape,
    )
    beta = ad.sigmoid(
        ad.linear(xn, params[f"{L}.gate_b.weight"], params[f"{L}.gate_b.bias"], tape),
        tape,
    )
    alpha = ad.transpose(alpha, (0, 2, 1), tape)  # [B, H, T]
    beta = ad.transpose(beta, (0, 2, 1), tape)
    out = gd.gdn_layer_forward(qn, kn, vh, alpha, beta, tape)
    merged = _merge_heads(out, b, t, d, tape)
    return ad.linear(merged, params[f"layer{layer}.wo"], None, tape)


def forward_train(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    tokens: np.ndarray,
    tape: Tape | None = None,
    dropout_seed: int | None = None,
    training: bool = False,
    table: rp.SinusoidTable | None = None,
) -> tuple[Tensor, dict]:
    """Full-sequence forward pass; returns logits [B, T, V] and aux data.

    aux["retention"] maps layer index to that layer's score tensor
    [B, T, H] (present only for active eviction layers).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be [B, T]")
    if table is None:
        table = make_table(cfg)
    x = ad.embedding(params["embed.weight"], tokens, tape)
    aux: dict = {"retention": {}}
    for i, kind in enumerate(cfg.pattern):
        L = f"layer{i}"
        xn = ad.rmsnorm(x, params[f"{L}.norm1.gain"], tape)
        if kind == "gdn":
            mix = _gdn_mixer(params, cfg, i, xn, tape)
        else:
            mix, r = _attention_mixer(
                params, cfg, i, kind, xn, table, tape, dropout_seed, training
            )
            if r is not None:
                aux["retention"][i] = r
        x = ad.add(x, mix, tape)
        xn2 = ad.rmsnorm(x, params[f"{L}.norm2.gain"], tape)
        h1 = ad.swish(
            ad.linear(xn2, params[f"{L}.mlp.w1"], params[f"{L}.mlp.b1"], tape), tape
        )
        mlp_out = ad.linear(h1, params[f"{L}.mlp.w2"], params[f"{L}.mlp.b2"], tape)
        x = ad.add(x, mlp_out, tape)
    xf = ad.rmsnorm(x, params["final_norm.gain"], tape)
    logits = ad.linear(xf, params["unembed.weight"], None, tape)
    return logits, aux


# ---------------------------------------------------------------------------
# decoding


class DecodeSession:
    """Single-stream token-by-token decoding against per-layer caches.

    With record_trace=True the session keeps, for every eviction layer, the
    full per-position key/value history plus each decode step's query and
    attention output, enabling an independent replay check against a
    from-scratch reference.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], record_trace=False):
        self.cfg = cfg
        self.params = params
        self.table = make_table(cfg)
        self.record_trace = record_trace
        self.n = 0
        self.caches: list = []
        self.trace: dict[int, dict] = {}
        for i, kind in enumerate(cfg.pattern):
            if kind == "gdn":
                self.caches.append(
                    np.zeros((cfg.n_heads, cfg.d_head, cfg.d_head))
                )
            elif kind == "lte" and cfg.retention_override != "retain_all":
                self.caches.append(
                    LayerKvCache(
                        cfg.n_heads,
                        cfg.d_head,
                        cfg.window_w,
                        cfg.cap_b,
                        cfg.sink_s,
                        scorer_params_view(params, cfg, i),
                        self.table,
                        record_scores=record_trace,
                    )
                )
                if record_trace:
                    self.trace[i] = {"k": [], "v": [], "q": [], "out": []}
            elif kind == "swa":
                self.caches.append(
                    SlidingWindowCache(cfg.n_heads, cfg.d_head, cfg.window_w)
                )
            else:
                self.caches.append(DenseCache(cfg.n_heads, cfg.d_head))

    # -- helpers -----------------------------------------------------------

    def _row_norm(self, x: np.ndarray, gain: Tensor) -> np.ndarray:
        return ad.rmsnorm(Tensor(x), gain).data

    def _project_heads(self, xn: np.ndarray, layer: int):
        L = f"layer{layer}"
        h, dh = self.cfg.n_heads, self.cfg.d_head
        q = (xn @ self.params[f"{L}.wq"].data).reshape(h, dh)
        k = (xn @ self.params[f"{L}.wk"].data).reshape(h, dh)
        v = (xn @ self.params[f"{L}.wv"].data).reshape(h, dh)
        return q, k, v

    def _rotate_row(self, x: np.ndarray, position: int) -> np.ndarray:
        return rp.apply_rope(x[:, None, :], np.array([position]), self.table)[:, 0, :]

    # -- prefill -----------------------------------------------------------

    def prefill(self, tokens: np.ndarray) -> np.ndarray:
        """Consume a prompt; returns its logits [T0, V]."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("prompt must be a non-empty 1-d token array")
        if self.n:
            raise RuntimeError("prefill on a started session")
        cfg = self.cfg
        t0 = tokens.size
        positions = np.arange(t0)
        x = ad.embedding(self.params["embed.weight"], tokens[None]).data  # [1,T0,D]
        for i, kind in enumerate(cfg.pattern):
            L = f"layer{i}"
            xn = ad.rmsnorm(Tensor(x), self.params[f"{L}.norm1.gain"]).data
            if kind == "gdn":
                mix = self._prefill_gdn(i, xn)
            else:
                mix = self._prefill_attention(i, kind, xn, positions)
            x = x + mix
            xn2 = ad.rmsnorm(Tensor(x), self.params[f"{L}.norm2.gain"]).data
            h1 = ad.swish(
                ad.linear(
                    Tensor(xn2), self.params[f"{L}.mlp.w1"], self.params[f"{L}.mlp.b1"]
                )
            ).data
            x = x + h1 @ self.params[f"{L}.mlp.w2"].data + self.params[f"{L}.mlp.b2"].data
        xf = ad.rmsnorm(Tensor(x), self.params["final_norm.gain"]).data
        logits = xf @ self.params["unembed.weight"].data
        self.n = t0
        return logits[0]

    def _prefill_gdn(self, layer, xn):
        cfg = self.cfg
        L = f"layer{layer}"
        b, t0, d = xn.shape
        h, dh = cfg.n_heads, cfg.d_head
        q = (xn @ self.params[f"{L}.wq"].data).reshape(t0, h, dh)
        k = (xn @ self.params[f"{L}.wk"].data).reshape(t0, h, dh)
        v = (xn @ self.params[f"{L}.wv"].data).reshape(t0, h, dh)
        q = ad.l2_normalize(Tensor(q)).data
        k = ad.l2_normalize(Tensor(k)).data
        alpha = ad.sigmoid(
            ad.linear(
                Tensor(xn[0]), self.params[f"{L}.gate_a.weight"],
                self.params[f"{L}.gate_a.bias"],
            )
        ).data
        beta = ad.sigmoid(
            ad.linear(
                Tensor(xn[0]), self.params[f"{L}.gate_b.weight"],
                self.params[f"{L}.gate_b.bias"],
            )
        ).data
        state = self.caches[layer]
        out = np.empty((t0, h, dh))
        for t in range(t0):
            for hh in range(h):
                state[hh], out[t, hh] = gd.gdn_step(
                    state[hh], q[t, hh], k[t, hh], v[t, hh],
                    alpha[t, hh], beta[t, hh],
                )
        return (out.reshape(t0, h * dh) @ self.params[f"{L}.wo"].data)[None]

    def _prefill_attention(self, layer, kind, xn, positions):
        cfg = self.cfg
        L = f"layer{layer}"
        t0 = xn.shape[1]
        h, dh = cfg.n_heads, cfg.d_head
        q = (xn[0] @ self.params[f"{L}.wq"].data).reshape(t0, h, dh)
        k_pre = (xn[0] @ self.params[f"{L}.wk"].data).reshape(t0, h, dh)
        v = (xn[0] @ self.params[f"{L}.wv"].data).reshape(t0, h, dh)
        q_rot = rp.apply_rope(q.transpose(1, 0, 2), positions, self.table)
        k_rot = rp.apply_rope(k_pre.transpose(1, 0, 2), positions, self.table)
        v_h = v.transpose(1, 0, 2)  # [H, T0, d]
        cache = self.caches[layer]
        active_lte = kind == "lte" and cfg.retention_override != "retain_all"
        if active_lte:
            scores_t = sc.score_tokens(
                Tensor(k_pre[None]), Tensor(v[None]),
                scorer_params_view(self.params, cfg, layer), mode="deferred",
            )
            scores = scores_t.data[0]
            cache.prefill(k_rot, v_h, scores)
            out = np.empty((h, t0, dh))
            for hh in range(h):
                pos_out, out_k, out_v, _, _ = cache.heads[hh].out_rows()
                out[hh], _ = at.two_stage_sparse_attention(
                    q_rot[hh], k_rot[hh], v_h[hh], positions,
                    out_k, out_v, pos_out, cfg.window_w,
                )
            if self.record_trace:
                self.trace[layer]["k"].extend(k_rot.transpose(1, 0, 2))
                self.trace[layer]["v"].extend(v_h.transpose(1, 0, 2))
        else:
            if kind == "swa":
                mask = at.band_mask(t0, cfg.window_w)[None, None]
            else:
                mask = at.causal_mask(t0)[None, None]
            att = at.masked_attention(
                Tensor(q_rot[None]), Tensor(k_rot[None]), Tensor(v_h[None]), mask
            )
            out = att.data[0]
            cache.prefill(k_rot, v_h)
        merged = out.transpose(1, 0, 2).reshape(t0, h * dh)
        return (merged @ self.params[f"{L}.wo"].data)[None]

    # -- decode -------------------------------------------------------------

    def step(self, token: int) -> np.ndarray:
        """Decode one token; returns next-token logits [V]."""
        cfg = self.cfg
        x = self.params["embed.weight"].data[token].copy()
        for i, kind in enumerate(cfg.pattern):
            L = f"layer{i}"
            xn = self._row_norm(x, self.params[f"{L}.norm1.gain"])
            if kind == "gdn":
                mix = self._step_gdn(i, xn)
            else:
                mix = self._step_attention(i, kind, xn)
            x = x + mix
            xn2 = self._row_norm(x, self.params[f"{L}.norm2.gain"])
            h1 = ad.swish(
                ad.linear(
                    Tensor(xn2), self.params[f"{L}.mlp.w1"], self.params[f"{L}.mlp.b1"]
                )
            ).data
            x = x + h1 @ self.params[f"{L}.mlp.w2"].data + self.params[f"{L}.mlp.b2"].data
        xf = self._row_norm(x, self.params["final_norm.gain"])
        logits = xf @ self.params["unembed.weight"].data
        self.n += 1
        return logits

    def _step_gdn(self, layer, xn):
        cfg = self.cfg
        L = f"layer{layer}"
        q, k, v = self._project_heads(xn, layer)
        q = ad.l2_normalize(Tensor(q)).data
        k = ad.l2_normalize(Tensor(k)).data
        alpha = ad.sigmoid(
            ad.linear(
                Tensor(xn), self.params[f"{L}.gate_a.weight"],
                self.params[f"{L}.gate_a.bias"],
            )
        ).data
        beta = ad.sigmoid(
            ad.linear(
                Tensor(xn), self.params[f"{L}.gate_b.weight"],
                self.params[f"{L}.gate_b.bias"],
            )
        ).data
        state = self.caches[layer]
        out = np.empty_like(q)
        for hh in range(cfg.n_heads):
            state[hh], out[hh] = gd.gdn_step(
                state[hh], q[hh], k[hh], v[hh], alpha[hh], beta[hh]
            )
        return out.reshape(-1) @ self.params[f"{L}.wo"].data

    def _step_attention(self, layer, kind, xn):
        cfg = self.cfg
        q, k, v = self._project_heads(xn, layer)
        q_rot = self._rotate_row(q, self.n)
        k_rot = self._rotate_row(k, self.n)
        cache = self.caches[layer]
        out = cache.step(q_rot, k_rot, v)
        if self.record_trace and layer in self.trace:
            tr = self.trace[layer]
            tr["q"].append(q_rot.copy())
            tr["k"].append(k_rot.copy())
            tr["v"].append(v.copy())
            tr["out"].append(out.copy())
        return out.reshape(-1) @ self.params[f"layer{layer}.wo"].data

    # -- verification ---------------------------------------------------------

    def replay_check(self) -> float:
        """Re-derive every recorded eviction-attention step from scratch.

        Rebuilds each admitted set positionally from the full recorded
        history and the logged scores, recomputes the attention rows, and
        returns the maximum absolute deviation from the recorded outputs.
        Requires record_trace=True.
        """
        if not self.record_trace:
            raise RuntimeError("session was not recording a trace")
        worst = 0.0
        cfg = self.cfg
        for layer, tr in self.trace.items():
            cache = self.caches[layer]
            k_hist = np.array(tr["k"])  # [T, H, d]
            v_hist = np.array(tr["v"])
            n_prefill = len(tr["k"]) - len(tr["q"])
            for si, (q_n, out_n) in enumerate(zip(tr["q"], tr["out"])):
                n = n_prefill + si
                ref = _reference_decode_row(
                    n, q_n, k_hist, v_hist, cache.score_log,
                    cfg.window_w, cfg.cap_b, cfg.sink_s,
                )
                worst = max(worst, float(np.abs(ref - out_n).max()))
        return worst


def _reference_decode_row(n, q_n, k_hist, v_hist, score_log, w, b, s):
    """From-scratch decode attention for token n over plain position lists."""
    n_heads, d = q_n.shape
    out = np.zeros((n_heads, d))
    for h in range(n_heads):
        slots: list[list] = []
        for j in range(n - w):
            if j < s:
                entry = [j, np.inf, True]
            elif score_log[j][h] > at.RETAIN_THRESHOLD:
                entry = [j, float(score_log[j][h]), False]
            else:
                continue
            if len(slots) < b:
                slots.append(entry)
                continue
            plain = [i for i, e in enumerate(slots) if not e[2]]
            mi = min(plain, key=lambda i: slots[i][1])
            if entry[1] > slots[mi][1]:
                slots[mi] = entry
        idx = sorted(e[0] for e in slots) + list(range(max(0, n - w), n + 1))
        rows_k = k_hist[idx, h]
        rows_v = v_hist[idx, h]
        logits = rows_k @ q_n[h] / np.sqrt(d)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        out[h] = p @ rows_v
    return out
