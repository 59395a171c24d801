"""Linear-attention state recurrences: plain accumulation and the gated
delta rule.

The delta-rule update for one head is

    S_t = S_{t-1} (alpha_t (I - beta_t k_t k_t^T)) + beta_t v_t k_t^T
    o_t = S_t q_t

with state S of shape [d_v, d_k].  alpha decays the whole memory, beta blends
erase-then-write along the current key direction; with a unit key, alpha = 1
and beta = 1 the update is an exact overwrite of that key's association.

The layer forward is strictly sequential in time.  Its backward pass is a
hand-derived reverse recurrence over the stored states rather than a chain of
taped primitives, which keeps the tape short and the step math in one place.
gdn_step performs the raw update with whatever key it is given; normalizing
keys (needed for the overwrite semantics) is the caller's business.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, _wrap


def linear_attn_step(
    s: np.ndarray, q_t: np.ndarray, k_t: np.ndarray, v_t: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One step of unnormalized linear attention: S' = S + v k^T, o = S' q."""
    s_new = s + np.outer(v_t, k_t)
    return s_new, s_new @ q_t


def gdn_step(
    s: np.ndarray,
    q_t: np.ndarray,
    k_t: np.ndarray,
    v_t: np.ndarray,
    alpha_t: float,
    beta_t: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One gated delta-rule step for a single head, plain arrays."""
    d_k = k_t.shape[0]
    a = alpha_t * (np.eye(d_k) - beta_t * np.outer(k_t, k_t))
    s_new = s @ a + beta_t * np.outer(v_t, k_t)
    return s_new, s_new @ q_t


def gdn_layer_forward(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    alpha: Tensor,
    beta: Tensor,
    tape: Tape | None = None,
) -> Tensor:
    """Run the delta-rule recurrence over a whole sequence, differentiably.

    Shapes: q, k, v are [B, H, T, d] (shared key/value width), alpha and beta
    are [B, H, T].  Returns outputs [B, H, T, d].  The initial state is zero.
    """
    b, h, t, d = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ValueError("q, k, v must share one [B, H, T, d] shape")
    if alpha.shape != (b, h, t) or beta.shape != (b, h, t):
        raise ValueError(f"gates must have shape ({b}, {h}, {t})")
    qd, kd, vd = q.data, k.data, v.data
    ad_, bd = alpha.data, beta.data
    eye = np.eye(d)

    states = np.zeros((t + 1, b, h, d, d))  # states[i] = S after i steps
    out = np.empty((b, h, t, d))
    for i in range(t):
        kk = np.einsum("bhk,bhl->bhkl", kd[:, :, i], kd[:, :, i])
        a_mat = ad_[:, :, i, None, None] * (eye - bd[:, :, i, None, None] * kk)
        states[i + 1] = np.einsum("bhvl,bhlk->bhvk", states[i], a_mat) + bd[
            :, :, i, None, None
        ] * np.einsum("bhv,bhk->bhvk", vd[:, :, i], kd[:, :, i])
        out[:, :, i] = np.einsum("bhvk,bhk->bhv", states[i + 1], qd[:, :, i])
    result = _wrap(out)

    if tape is not None:
        def backward(go: np.ndarray):
            gq = np.zeros_like(qd)
            gk = np.zeros_like(kd)
            gv = np.zeros_like(vd)
            ga = np.zeros_like(ad_)
            gb = np.zeros_like(bd)
            g_state = np.zeros((b, h, d, d))  # dL/dS_t, accumulated in reverse
            for i in range(t - 1, -1, -1):
                ki = kd[:, :, i]
                vi = vd[:, :, i]
                ai = ad_[:, :, i]
                bi = bd[:, :, i]
                goi = go[:, :, i]
                gq[:, :, i] = np.einsum("bhvk,bhv->bhk", states[i + 1], goi)
                g_state = g_state + np.einsum("bhv,bhk->bhvk", goi, qd[:, :, i])
                m = np.einsum("bhvk,bhvl->bhkl", states[i], g_state)
                kmk = np.einsum("bhk,bhkl,bhl->bh", ki, m, ki)
                gv[:, :, i] = bi[:, :, None] * np.einsum("bhvk,bhk->bhv", g_state, ki)
                gk[:, :, i] = bi[:, :, None] * np.einsum(
                    "bhvk,bhv->bhk", g_state, vi
                ) - (ai * bi)[:, :, None] * (
                    np.einsum("bhkl,bhl->bhk", m, ki)
                    + np.einsum("bhlk,bhl->bhk", m, ki)
                )
                ga[:, :, i] = np.einsum("bhkk->bh", m) - bi * kmk
                gb[:, :, i] = (
                    np.einsum("bhv,bhvk,bhk->bh", vi, g_state, ki) - ai * kmk
                )
                kk = np.einsum("bhk,bhl->bhkl", ki, ki)
                a_mat = ai[:, :, None, None] * (eye - bi[:, :, None, None] * kk)
                g_state = np.einsum("bhvl,bhkl->bhvk", g_state, a_mat)
            return gq, gk, gv, ga, gb

        tape.record(result, (q, k, v, alpha, beta), backward)
    return result
