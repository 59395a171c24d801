"""Self-contained property suites behind the ``verify`` command.

Each suite re-runs the oracle-equivalence and invariant checks of one
subsystem on small, seeded instances.  A property either passes (returning a
one-line detail) or fails with the assertion message.  Suites are
independent, so they can run in parallel; the report order is fixed
regardless.
"""

from __future__ import annotations

import os
import traceback
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import attention as at
from . import gdn as gd
from . import model as md
from . import nsa as ns
from . import rope as rp
from . import scorer as sc
from . import training as tr
from .autodiff import (
    Tape,
    Tensor,
    finite_difference_oracle,
    fd_relative_error,
)
from .cache import LayerKvCache
from .config import ModelConfig

ENV_THREADS = "EVICTD_THREADS"


# ---------------------------------------------------------------------------
# attention


def _check_two_stage_oracle(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(15):
        t = int(rng.integers(20, 70))
        d = int(rng.integers(2, 9)) * 2
        w = int(rng.integers(4, 16))
        s = int(rng.integers(0, 3))
        q, k, v = (rng.normal(size=(t, d)) for _ in range(3))
        r = rng.uniform(size=(t, 1))
        compact = np.flatnonzero((np.arange(t) < s) | (r[:, 0] > 0.5))
        out, _ = at.two_stage_sparse_attention(
            q, k, v, np.arange(t), k[compact], v[compact], compact, w
        )
        idx = at.build_index_set(t, 0, r, s, w)
        dev = np.max(np.abs(out - at.masked_attention_oracle(q, k, v, idx)))
        worst = max(worst, dev)
    assert worst <= 1e-10, f"two-stage deviates from index-set oracle by {worst}"
    return f"15 random instances, max |dev| = {worst:.2e}"


def _check_empty_compact_is_swa(seed):
    rng = np.random.default_rng(seed)
    t, d, w = 40, 8, 7
    q, k, v = (rng.normal(size=(t, d)) for _ in range(3))
    out, _ = at.two_stage_sparse_attention(
        q, k, v, np.arange(t), np.zeros((0, d)), np.zeros((0, d)),
        np.zeros(0, int), w,
    )
    dev = np.max(np.abs(out - at.swa_attention(q, k, v, w + 1)))
    assert dev <= 1e-12, f"empty compact segment deviates from SWA by {dev}"
    return f"max |dev| = {dev:.2e}"


def _check_masked_kernel_oracle(seed):
    rng = np.random.default_rng(seed)
    t, d = 24, 6
    q, k, v = (rng.normal(size=(t, d)) for _ in range(3))
    r = rng.uniform(size=(t, 1))
    idx = at.build_index_set(t, 0, r, 1, 5)
    got = at.masked_attention(
        Tensor(q[None, None]), Tensor(k[None, None]), Tensor(v[None, None]),
        at.mask_from_index_set(idx)[None, None],
    ).data[0, 0]
    dev = np.max(np.abs(got - at.masked_attention_oracle(q, k, v, idx)))
    assert dev <= 1e-12, f"batched kernel deviates from oracle by {dev}"
    return f"max |dev| = {dev:.2e}"


def _check_ste_inner_product(seed):
    rng = np.random.default_rng(seed)
    b, h, t, d = 2, 2, 10, 4
    q, k, v = (Tensor(rng.normal(size=(b, h, t, d))) for _ in range(3))
    r = Tensor(rng.uniform(size=(b, t, h)))
    mask = at.causal_mask(t)[None, None]
    tape = Tape()
    out = at.masked_attention(q, k, v, mask, tape=tape, ste_scores=r)
    upstream = rng.normal(size=out.shape)
    tape.backward(out, seed=upstream)
    got = tape.grad(r)
    want = tr.ste_backward(v.data, (r.data > 0.5).astype(float), tape.grad(v))
    dev = np.max(np.abs(got - want))
    assert dev == 0.0, f"straight-through gradient deviates by {dev}"
    return "surrogate equals <v, dL/dv'> exactly"


# ---------------------------------------------------------------------------
# cache


def _cache_fixture(seed, w=16, b=8, s=2, h=2, d=8, steps=72):
    rng = np.random.default_rng(seed)
    table = rp.SinusoidTable(d)
    params = sc.init_scorer_params(h, d, seed=int(rng.integers(2**31)))
    cache = LayerKvCache(h, d, w, b, s, params, table, record_scores=True)
    history = []
    for n in range(steps):
        q, k_pre, v = (rng.normal(size=(h, d)) for _ in range(3))
        k_post = rp.apply_rope(k_pre[:, None, :], [n], table)[:, 0, :]
        cache.step(q, k_post, v)
        history.append((k_post, v))
    return cache, history, params, table


def _check_space_bound(seed):
    rng = np.random.default_rng(seed)
    w, b, s, h, d = 16, 8, 2, 2, 8
    table = rp.SinusoidTable(d)
    params = sc.init_scorer_params(h, d, seed=3)
    cache = LayerKvCache(h, d, w, b, s, params, table)
    peak = 0
    for n in range(3 * (w + b)):
        q, k_pre, v = (rng.normal(size=(h, d)) for _ in range(3))
        k_post = rp.apply_rope(k_pre[:, None, :], [n], table)[:, 0, :]
        cache.step(q, k_post, v)
        peak = max(peak, max(hd.total_stored() for hd in cache.heads))
    assert peak <= w + b, f"cache held {peak} > {w + b} entries"
    return f"peak occupancy {peak} <= {w + b}"


def _check_lazy_matches_eager(seed):
    cache, history, params, table = _cache_fixture(seed)
    assert cache.score_log, "no scores were recorded"
    half = sc.HALF_FIELD
    for j, lazy in sorted(cache.score_log.items()):
        k_slab = np.zeros((sc.RECEPTIVE_FIELD, cache.n_heads, cache.d_head))
        v_slab = np.zeros_like(k_slab)
        for i, p in enumerate(range(j - half, j + half + 1)):
            if 0 <= p < len(history):
                k_post, v = history[p]
                k_slab[i] = rp.invert_rope(k_post[:, None, :], [0], table, offset=p)[:, 0, :]
                v_slab[i] = v
        eager = sc.score_center(k_slab, v_slab, params)
        assert np.array_equal(lazy, eager), f"score mismatch at position {j}"
    return f"{len(cache.score_log)} lazily scored positions bit-match eager"


def _check_scoring_cadence(seed):
    cache, _, _, _ = _cache_fixture(seed, steps=200)
    w, r_field = cache.w, sc.RECEPTIVE_FIELD
    bound = int(np.ceil(200 / (w - r_field))) + 1
    assert cache.tick_count <= bound, (
        f"{cache.tick_count} scoring batches exceed the bound {bound}"
    )
    return f"{cache.tick_count} batches over 200 steps (bound {bound})"


def _check_decode_replay(seed):
    cfg = ModelConfig(
        vocab_size=34, n_layers=2, d_model=8, n_heads=2, d_head=4,
        pattern=("gdn", "lte"), window_w=13, cap_b=8, sink_s=1,
        dropout_p=0.0, seq_len=48, name="verify",
    )
    params = md.init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, size=80)
    session = md.DecodeSession(cfg, params, record_trace=True)
    session.prefill(tokens[:20])
    for tok in tokens[20:]:
        session.step(int(tok))
    dev = session.replay_check()
    assert dev <= 1e-10, f"decode replay deviates by {dev}"
    return f"80-token stream, replay |dev| = {dev:.2e}"


# ---------------------------------------------------------------------------
# rope


def _check_rope_roundtrip(seed):
    rng = np.random.default_rng(seed)
    table = rp.SinusoidTable(8)
    x = rng.normal(size=(3, 20, 8))
    pos = rng.integers(0, 500, size=20)
    back = rp.invert_rope(rp.apply_rope(x, pos, table), pos, table)
    dev = np.max(np.abs(back - x))
    assert dev <= 1e-12, f"invert(apply(x)) deviates by {dev}"
    return f"max |dev| = {dev:.2e}"


def _check_rope_offset_identity(seed):
    rng = np.random.default_rng(seed)
    table = rp.SinusoidTable(6)
    x = rng.normal(size=(2, 9, 6))
    rel = np.arange(9)
    a = rp.invert_rope(x, rel, table, offset=37)
    bx = rp.invert_rope(x, rel + 37, table)
    assert np.array_equal(a, bx), "relative+offset differs from absolute rows"
    return "relative-plus-offset rows are bitwise absolute rows"


def _check_rope_norm_preserved(seed):
    rng = np.random.default_rng(seed)
    table = rp.SinusoidTable(12)
    x = rng.normal(size=(5, 12))
    y = rp.apply_rope(x, np.arange(5) * 11, table)
    dev = np.max(np.abs(np.linalg.norm(y, axis=-1) - np.linalg.norm(x, axis=-1)))
    assert dev <= 1e-12, f"rotation changed vector norms by {dev}"
    return f"norm drift {dev:.2e}"


def _check_rope_relative_dot(seed):
    rng = np.random.default_rng(seed)
    table = rp.SinusoidTable(8)
    q = rng.normal(size=(1, 8))
    k = rng.normal(size=(1, 8))
    base = (rp.apply_rope(q, [7], table)[0] @ rp.apply_rope(k, [3], table)[0])
    shifted = (rp.apply_rope(q, [107], table)[0] @ rp.apply_rope(k, [103], table)[0])
    dev = abs(base - shifted)
    assert dev <= 1e-9, f"dot product not shift-invariant, drift {dev}"
    return f"shift drift {dev:.2e}"


# ---------------------------------------------------------------------------
# gdn


def _check_gdn_kernel_matches_step_loop(seed):
    rng = np.random.default_rng(seed)
    b, h, t, d = 1, 2, 12, 4
    q, k, v = (rng.normal(size=(b, h, t, d)) for _ in range(3))
    alpha = rng.uniform(0.7, 1.0, size=(b, h, t))
    beta = rng.uniform(0.0, 1.0, size=(b, h, t))
    out = gd.gdn_layer_forward(
        Tensor(q), Tensor(k), Tensor(v), Tensor(alpha), Tensor(beta)
    ).data
    worst = 0.0
    for hh in range(h):
        s = np.zeros((d, d))
        for tt in range(t):
            s, o = gd.gdn_step(
                s, q[0, hh, tt], k[0, hh, tt], v[0, hh, tt],
                alpha[0, hh, tt], beta[0, hh, tt],
            )
            worst = max(worst, np.max(np.abs(o - out[0, hh, tt])))
    assert worst <= 1e-12, f"sequence kernel deviates from step loop by {worst}"
    return f"max |dev| = {worst:.2e}"


def _check_gdn_gradients(seed):
    rng = np.random.default_rng(seed)
    b, h, t, d = 1, 1, 6, 3
    q, k, v = (Tensor(rng.normal(size=(b, h, t, d))) for _ in range(3))
    alpha = Tensor(rng.uniform(0.8, 1.0, size=(b, h, t)))
    beta = Tensor(rng.uniform(0.1, 0.9, size=(b, h, t)))
    w = rng.normal(size=(b, h, t, d))

    def loss_of(kt: Tensor) -> float:
        out = gd.gdn_layer_forward(q, kt, v, alpha, beta)
        return float((out.data * w).sum())

    tape = Tape()
    out = gd.gdn_layer_forward(q, k, v, alpha, beta, tape)
    tape.backward(out, seed=w)
    rel = fd_relative_error(tape.grad(k), finite_difference_oracle(loss_of, k))
    assert rel <= 1e-5, f"key gradient off by relative {rel}"
    return f"key-path FD relative error {rel:.2e}"


def _check_gdn_decay_forgets(seed):
    rng = np.random.default_rng(seed)
    d = 4
    s = np.zeros((d, d))
    k0, v0 = rng.normal(size=d), rng.normal(size=d)
    s, _ = gd.gdn_step(s, np.zeros(d), k0, v0, 1.0, 1.0)
    norm0 = np.linalg.norm(s)
    for _ in range(60):
        s, _ = gd.gdn_step(s, np.zeros(d), rng.normal(size=d) * 0.0, np.zeros(d), 0.5, 0.0)
    assert np.linalg.norm(s) <= norm0 * 0.5**59, "gated decay failed to shrink state"
    return "state norm decays geometrically under alpha < 1"


# ---------------------------------------------------------------------------
# nsa


def _check_nsa_budget(seed):
    rng = np.random.default_rng(seed)
    worst = 0
    for _ in range(5):
        t = int(rng.integers(30, 90))
        params = ns.init_nsa_params(4, block_size=4, top_k=3, w_swa=6, seed=seed)
        q, k, v = (Tensor(rng.normal(size=(t, 4))) for _ in range(3))
        _, aux = ns.nsa_forward(q, k, v, params)
        worst = max(worst, int(aux.selected_token_counts.max()))
        assert worst <= params.block_size * params.top_k, (
            f"query selected {worst} tokens, budget {params.block_size * params.top_k}"
        )
    return f"max selected tokens {worst} <= block_size*top_k"


def _check_nsa_branch_isolation(seed):
    rng = np.random.default_rng(seed)
    t = 40
    params = ns.init_nsa_params(4, block_size=4, top_k=2, w_swa=5, seed=seed)
    q, k, v = (Tensor(rng.normal(size=(t, 4))) for _ in range(3))
    _, aux = ns.nsa_forward(q, k, v, params)
    for gates, want in (
        ((1.0, 0.0, 0.0), aux.a_slc),
        ((0.0, 1.0, 0.0), aux.a_cmp),
        ((0.0, 0.0, 1.0), aux.a_swa),
    ):
        got, _ = ns.nsa_forward(q, k, v, params, fixed_gates=gates)
        assert np.array_equal(got.data, want), f"gate {gates} is not bit-isolated"
    return "each branch reproduced bit-for-bit under one-hot gates"


def _check_nsa_gate_gradients(seed):
    rng = np.random.default_rng(seed)
    t = 16
    params = ns.init_nsa_params(4, block_size=4, top_k=2, w_swa=4, seed=seed)
    q, k, v = (Tensor(rng.normal(size=(t, 4))) for _ in range(3))
    w = rng.normal(size=(t, 4))

    def loss_of(gw: Tensor) -> float:
        params.gate_w = gw
        out, _ = ns.nsa_forward(q, k, v, params)
        return float((out.data * w).sum())

    tape = Tape()
    out, _ = ns.nsa_forward(q, k, v, params, tape=tape)
    tape.backward(out, seed=w)
    rel = fd_relative_error(
        tape.grad(params.gate_w), finite_difference_oracle(loss_of, params.gate_w)
    )
    assert rel <= 1e-5, f"gate gradient off by relative {rel}"
    return f"gate FD relative error {rel:.2e}"


# ---------------------------------------------------------------------------
# training


def _check_controller_reference(seed):
    rng = np.random.default_rng(seed)
    ctrl = tr.SparsityController(1, 2, cap_b=6, update_period=3, alpha_step=1.5)
    lam_ref = np.full((1, 2), 1e-9)
    cbar = None
    for step in range(1, 121):
        c = rng.random((1, 2)) * 14.0
        ctrl.observe(c, step)
        cbar = c.copy() if cbar is None else ctrl.alpha_ema * cbar + (1 - ctrl.alpha_ema) * c
        if step % 3 == 0:
            for j in range(2):
                x = cbar[0, j]
                if x > 6.0:
                    lam_ref[0, j] = min(lam_ref[0, j] * 1.5, 1.0)
                elif x < 0.95 * 6.0:
                    lam_ref[0, j] = min(lam_ref[0, j] * 1.5**-1, 1.0)
                if lam_ref[0, j] < 1e-9:
                    lam_ref[0, j] = 0.0
                if lam_ref[0, j] == 0.0 and x > 6.0:
                    lam_ref[0, j] = 1e-9
        assert np.array_equal(ctrl.lam, lam_ref), f"weights diverged at step {step}"
    return "120-step random stream matches the scalar reference exactly"


def _check_ste_relaxation(seed):
    rng = np.random.default_rng(seed)
    b, h, s, d = 2, 2, 5, 3
    v = rng.normal(size=(b, h, s, d))
    m = (rng.random((b, s, h)) > 0.5).astype(float)
    upstream = rng.normal(size=(b, h, s, d))
    tape = Tape()
    import evictd.autodiff as ad

    r = Tensor(np.transpose(m, (0, 2, 1))[..., None])
    vp = ad.mul(Tensor(v), r, tape)
    loss = ad.sum_all(ad.mul(vp, Tensor(upstream), tape), tape)
    tape.backward(loss)
    want = np.transpose(tape.grad(r)[..., 0], (0, 2, 1))
    dev = np.max(np.abs(tr.ste_backward(v, m, upstream) - want))
    assert dev <= 1e-12, f"surrogate deviates from relaxation autodiff by {dev}"
    return f"max |dev| = {dev:.2e}"


def _check_sparsity_oracle(seed):
    rng = np.random.default_rng(seed)
    r = rng.random((3, 7, 2))
    lam = rng.random(2)
    want = sum(
        lam[hh] * max(r[bb, tt, hh] - 0.5, 0.0)
        for bb in range(3) for tt in range(7) for hh in range(2)
    ) / 3
    got = float(tr.sparsity_loss(Tensor(r), lam).data)
    assert abs(got - want) <= 1e-12, f"penalty deviates from loop oracle by {got - want}"
    return f"|dev| = {abs(got - want):.2e}"


def _check_passkey_task(seed):
    a = tr.passkey_task(seed, T=64, distance=20, batch=3)
    b = tr.passkey_task(seed, T=64, distance=20, batch=3)
    assert np.array_equal(a.tokens, b.tokens), "task draw is not deterministic"
    q = a.query_pos[0]
    assert np.all(a.tokens[:, q] == tr.QUERY_TOKEN)
    assert np.all(a.tokens[:, q - 20 - 1] == tr.KEY_TOKEN)
    assert np.array_equal(a.tokens[:, q - 20], a.target)
    return "deterministic layout with marker, digit and query in place"


SUITES: dict[str, list[tuple[str, callable]]] = {
    "attention": [
        ("two_stage_matches_index_set_oracle", _check_two_stage_oracle),
        ("empty_compact_segment_is_swa", _check_empty_compact_is_swa),
        ("masked_kernel_matches_oracle", _check_masked_kernel_oracle),
        ("straight_through_inner_product", _check_ste_inner_product),
    ],
    "cache": [
        ("occupancy_never_exceeds_w_plus_b", _check_space_bound),
        ("lazy_scores_bit_match_eager", _check_lazy_matches_eager),
        ("scoring_cadence_within_bound", _check_scoring_cadence),
        ("decode_replay_equivalence", _check_decode_replay),
    ],
    "rope": [
        ("invert_apply_roundtrip", _check_rope_roundtrip),
        ("offset_rows_bitwise_absolute", _check_rope_offset_identity),
        ("rotation_preserves_norms", _check_rope_norm_preserved),
        ("dot_products_shift_invariant", _check_rope_relative_dot),
    ],
    "gdn": [
        ("sequence_kernel_matches_step_loop", _check_gdn_kernel_matches_step_loop),
        ("key_gradient_matches_finite_differences", _check_gdn_gradients),
        ("gated_state_decays", _check_gdn_decay_forgets),
    ],
    "nsa": [
        ("selection_budget_bounded", _check_nsa_budget),
        ("branches_bit_isolated", _check_nsa_branch_isolation),
        ("gate_gradient_matches_finite_differences", _check_nsa_gate_gradients),
    ],
    "training": [
        ("controller_matches_scalar_reference", _check_controller_reference),
        ("ste_matches_relaxation_autodiff", _check_ste_relaxation),
        ("sparsity_penalty_matches_loop_oracle", _check_sparsity_oracle),
        ("passkey_task_layout", _check_passkey_task),
    ],
}


def run_suite(name: str, seed: int = 0) -> dict:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    results = []
    for prop_name, fn in SUITES[name]:
        try:
            detail = fn(seed)
            results.append({"property": prop_name, "ok": True, "detail": detail})
        except Exception as exc:  # noqa: BLE001 - report, do not crash the runner
            results.append(
                {
                    "property": prop_name,
                    "ok": False,
                    "detail": f"{type(exc).__name__}: {exc}",
                    "trace": traceback.format_exc(limit=3),
                }
            )
    return {
        "suite": name,
        "ok": all(r["ok"] for r in results),
        "properties": results,
    }


def run_suites(names: list[str], seed: int = 0) -> dict:
    """Run several suites, possibly in parallel; report order is fixed.

    EVICTD_THREADS caps the worker count (default: sequential).
    """
    threads = max(1, int(os.environ.get(ENV_THREADS, "1")))
    if threads > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(lambda n: run_suite(n, seed), names))
    else:
        reports = [run_suite(n, seed) for n in names]
    return {
        "seed": seed,
        "suites": reports,
        "ok": all(r["ok"] for r in reports),
    }
