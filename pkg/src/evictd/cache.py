"""Constant-size decode cache: circular window segment plus capped out segment.

Each attention head keeps two fixed-size segments:

* a circular window of the ``w`` most recent tokens (post-rotation keys and
  unrotated values, with their absolute positions), holding positions
  ``[n-w, n-1]`` once full, and
* an out segment of at most ``b`` slots for older tokens that either scored
  above the retention threshold when they left the window or are protected
  sink tokens (position below ``s``).

The current token is never stored before attending: a decode step for token
``n`` runs ``tick`` (maybe score a deferred batch), then ``attend`` over
out-segment entries, the window, and the current token itself (so the window
term spans ``[n-w, n]``), then ``push`` which pops position ``n-w`` and
copies it into the out segment if its score clears the threshold.

Scoring is deferred and batched.  A tick fires only when the oldest unscored
position's left receptive bound is about to leave the window; the batch then
covers every position whose full receptive field is available, so between
fires no scorer work happens at all.  Keys are stored rotated; the scorer
consumes unrotated inputs, recovered by inverting the rotation at the same
absolute table rows, which makes lazily produced scores bit-identical to an
eager per-step schedule operating on the same stored bytes.
"""

from __future__ import annotations

import json

import numpy as np

from . import rope as rp
from . import scorer as sc
from .attention import RETAIN_THRESHOLD
from .autodiff import Tensor

PROTECTED_SCORE = np.inf


class SchedulerContractViolation(RuntimeError):
    """A token left the window without a computed retention score."""


class HeadCache:
    """Two-segment storage for one attention head."""

    def __init__(self, window_w: int, cap_b: int, sink_s: int, d_head: int):
        if cap_b < sink_s:
            raise ValueError(
                f"out-segment capacity ({cap_b}) cannot be below sink size ({sink_s})"
            )
        self.w = int(window_w)
        self.b = int(cap_b)
        self.s = int(sink_s)
        self.d = int(d_head)
        self.window_k = np.zeros((self.w, self.d))
        self.window_v = np.zeros((self.w, self.d))
        self.window_pos = np.full(self.w, -1, dtype=np.int64)
        self.window_count = 0
        self.next_ptr = 0
        self.out_k = np.zeros((self.b, self.d))
        self.out_v = np.zeros((self.b, self.d))
        self.out_pos = np.full(self.b, -1, dtype=np.int64)
        self.out_score = np.zeros(self.b)
        self.out_protected = np.zeros(self.b, dtype=bool)
        self.out_count = 0

    # -- window segment -------------------------------------------------

    def window_order(self) -> np.ndarray:
        """Physical slot indices in logical (oldest-first) order."""
        if self.window_count < self.w:
            return np.arange(self.window_count)
        return (self.next_ptr + np.arange(self.w)) % self.w

    def window_rows(self):
        order = self.window_order()
        return self.window_pos[order], self.window_k[order], self.window_v[order]

    def push_window(self, pos: int, k: np.ndarray, v: np.ndarray):
        """Store a new token; return the popped (pos, k, v) if one left."""
        popped = None
        slot = self.next_ptr
        if self.window_count == self.w:
            popped = (
                int(self.window_pos[slot]),
                self.window_k[slot].copy(),
                self.window_v[slot].copy(),
            )
        else:
            self.window_count += 1
        self.window_k[slot] = k
        self.window_v[slot] = v
        self.window_pos[slot] = pos
        self.next_ptr = (slot + 1) % self.w
        return popped

    def rotate(self) -> None:
        """Roll the window so the write cursor sits at physical slot 0.

        Purely a relabeling of physical slots; logical contents are
        untouched.  Only defined for a full window.
        """
        if self.window_count != self.w:
            raise RuntimeError("rotation requires a full window")
        if self.next_ptr == 0:
            return
        order = self.window_order()
        self.window_k = self.window_k[order]
        self.window_v = self.window_v[order]
        self.window_pos = self.window_pos[order]
        self.next_ptr = 0

    # -- out segment -----------------------------------------------------

    def out_insert(self, pos: int, k, v, score: float, protected: bool) -> str:
        """Admit a departed token; returns "appended", "replaced", or "dropped"."""
        if self.out_count < self.b:
            slot = self.out_count
            self.out_count += 1
            self._write_out(slot, pos, k, v, score, protected)
            return "appended"
        candidates = np.flatnonzero(~self.out_protected[: self.out_count])
        if candidates.size == 0:
            raise RuntimeError("out segment full of protected entries")
        slot = candidates[np.argmin(self.out_score[candidates])]
        if score > self.out_score[slot]:
            self._write_out(slot, pos, k, v, score, protected)
            return "replaced"
        return "dropped"

    def _write_out(self, slot, pos, k, v, score, protected):
        self.out_k[slot] = k
        self.out_v[slot] = v
        self.out_pos[slot] = pos
        self.out_score[slot] = PROTECTED_SCORE if protected else score
        self.out_protected[slot] = protected

    def out_rows(self):
        m = self.out_count
        return (
            self.out_pos[:m],
            self.out_k[:m],
            self.out_v[:m],
            self.out_score[:m],
            self.out_protected[:m],
        )

    def total_stored(self) -> int:
        return self.window_count + self.out_count


class LazyState:
    """Bookkeeping for the deferred scoring schedule of one layer."""

    def __init__(self):
        self.next_unscored = 0
        self.pending: dict[int, np.ndarray] = {}
        self.last_offset: int | None = None


class LayerKvCache:
    """All heads of one eviction-attention layer plus the lazy scheduler."""

    def __init__(
        self,
        n_heads: int,
        d_head: int,
        window_w: int,
        cap_b: int,
        sink_s: int,
        scorer_params: sc.RetentionScorerParams,
        table: rp.SinusoidTable,
        record_scores: bool = False,
    ):
        if window_w < sc.RECEPTIVE_FIELD:
            raise ValueError(
                f"window ({window_w}) must be >= the scorer receptive field "
                f"({sc.RECEPTIVE_FIELD})"
            )
        if scorer_params.n_heads != n_heads or scorer_params.d_head != d_head:
            raise ValueError("scorer geometry does not match cache geometry")
        self.n_heads = n_heads
        self.d_head = d_head
        self.w = int(window_w)
        self.b = int(cap_b)
        self.s = int(sink_s)
        self.scorer_params = scorer_params
        self.table = table
        self.heads = [HeadCache(window_w, cap_b, sink_s, d_head) for _ in range(n_heads)]
        self.lazy = LazyState()
        self.n_seen = 0
        self.tick_count = 0
        self.record_scores = record_scores
        self.score_log: dict[int, np.ndarray] = {}

    # -- prefill ----------------------------------------------------------

    def prefill(self, k_post: np.ndarray, v: np.ndarray, scores: np.ndarray) -> None:
        """Fill all heads from a scored prompt.

        k_post, v: [H, T, d] (keys already rotated).  scores: [T', H] where
        T' = max(0, T-6) covers every position whose receptive field fits in
        the prompt; that always includes every out-of-window position.
        """
        H, T, d = k_post.shape
        if H != self.n_heads or d != self.d_head:
            raise ValueError("prefill shapes do not match cache geometry")
        t_scored = max(0, T - sc.HALF_FIELD)
        if scores.shape != (t_scored, self.n_heads):
            raise ValueError(
                f"expected scores of shape {(t_scored, self.n_heads)}, "
                f"got {scores.shape}"
            )
        if self.n_seen:
            raise RuntimeError("prefill on a non-empty cache")
        n_window = min(T, self.w)
        first_in_window = T - n_window
        for h, head in enumerate(self.heads):
            for j in range(first_in_window, T):
                head.push_window(j, k_post[h, j], v[h, j])
            self._prefill_out(head, h, k_post, v, scores, first_in_window)
        for j in range(first_in_window, t_scored):
            self.lazy.pending[j] = scores[j].copy()
        self.lazy.next_unscored = t_scored
        self.n_seen = T
        if self.record_scores:
            for j in range(t_scored):
                self.score_log[j] = scores[j].copy()

    def _prefill_out(self, head, h, k_post, v, scores, first_in_window):
        sinks = [j for j in range(min(self.s, first_in_window))]
        kept = [
            j
            for j in range(first_in_window)
            if j >= self.s and scores[j, h] > RETAIN_THRESHOLD
        ]
        room = self.b - len(sinks)
        if len(kept) > room:
            kept = sorted(kept, key=lambda j: (-scores[j, h], j))[:room]
            kept.sort()
        for j in sinks:
            head.out_insert(j, k_post[h, j], v[h, j], 0.0, protected=True)
        for j in kept:
            head.out_insert(j, k_post[h, j], v[h, j], scores[j, h], protected=False)

    # -- lazy scoring ------------------------------------------------------

    def tick(self, k_self_post: np.ndarray, v_self: np.ndarray):
        """Maybe run one deferred scoring batch before attending to token n.

        Fires only once the window is full and the oldest unscored position's
        left receptive bound has reached the departing edge; the batch covers
        positions [j0, n-6], exactly the centers whose receptive field is
        contained in window + current token (rows before the stream start are
        zero-filled).  Returns (positions, scores [B, H]) when fired.
        """
        n = self.n_seen
        j0 = self.lazy.next_unscored
        if n < self.w:
            return None
        if j0 - sc.HALF_FIELD > n - self.w:
            return None
        lo = j0 - sc.HALF_FIELD
        span = self._recovered_span(lo, n, k_self_post, v_self)
        out = sc.score_tokens(
            Tensor(span["k"][None]),
            Tensor(span["v"][None]),
            self.scorer_params,
            mode="valid",
        )
        batch_scores = out.data[0]  # [B, H]
        positions = np.arange(j0, n - sc.HALF_FIELD + 1)
        if batch_scores.shape[0] != positions.size:
            raise AssertionError("scored batch does not match expected range")
        for i, j in enumerate(positions):
            self.lazy.pending[int(j)] = batch_scores[i].copy()
            if self.record_scores:
                self.score_log[int(j)] = batch_scores[i].copy()
        self.lazy.next_unscored = int(positions[-1]) + 1
        self.lazy.last_offset = n - self.w
        self.tick_count += 1
        return positions, batch_scores

    def _recovered_span(self, lo: int, n: int, k_self_post, v_self):
        """Unrotated key/value rows for absolute positions [lo, n].

        Rows before position 0 are zeros; rows [n-w, n-1] come from the
        (rotated-buffer) window via the inverse rotation at their absolute
        table rows; row n is the incoming token, inverted the same way.
        """
        if 0 < lo < n - self.w:
            raise SchedulerContractViolation(
                f"scoring batch needs already-evicted rows starting at {lo}"
            )
        span_len = n - lo + 1
        H, d = self.n_heads, self.d_head
        k_span = np.zeros((span_len, H, d))
        v_span = np.zeros((span_len, H, d))
        base = n - self.w
        for h, head in enumerate(self.heads):
            head.rotate()
            pos, k_rows, v_rows = head.window_rows()
            if not np.array_equal(pos, np.arange(base, n)):
                raise AssertionError("window does not hold the last w positions")
            k_unrot = rp.invert_rope(k_rows, np.arange(self.w), self.table, offset=base)
            for i in range(self.w):
                j = base + i
                if lo <= j <= n:
                    k_span[j - lo, h] = k_unrot[i]
                    v_span[j - lo, h] = v_rows[i]
        k_self_unrot = rp.invert_rope(
            k_self_post[:, None, :], np.array([0]), self.table, offset=n
        )[:, 0, :]
        k_span[n - lo] = k_self_unrot
        v_span[n - lo] = v_self
        return {"k": k_span, "v": v_span}

    # -- attention ----------------------------------------------------------

    def attend(self, q, k_self, v_self, scale=None):
        """One decode attention step over out + window + current token.

        q, k_self, v_self: [H, d].  Every stored entry is admissible for the
        current query (out entries were retained or are sink; window entries
        satisfy the recency term), so this is a plain softmax per head.
        """
        if scale is None:
            scale = 1.0 / np.sqrt(self.d_head)
        out = np.zeros((self.n_heads, self.d_head))
        for h, head in enumerate(self.heads):
            _, out_k, out_v, _, _ = head.out_rows()
            _, win_k, win_v = head.window_rows()
            ks = np.concatenate([out_k, win_k, k_self[h][None]], axis=0)
            vs = np.concatenate([out_v, win_v, v_self[h][None]], axis=0)
            logits = ks @ q[h] * scale
            p = np.exp(logits - logits.max())
            p /= p.sum()
            out[h] = p @ vs
        return out

    # -- push ---------------------------------------------------------------

    def push(self, k_post: np.ndarray, v: np.ndarray) -> None:
        """Store token n; pop position n-w and maybe retain it."""
        n = self.n_seen
        will_pop = self.heads[0].window_count == self.w
        r_pop = None
        if will_pop:
            pop_pos = n - self.w
            if pop_pos in self.lazy.pending:
                r_pop = self.lazy.pending.pop(pop_pos)
            elif pop_pos >= self.s:
                raise SchedulerContractViolation(
                    f"position {pop_pos} left the window without a score"
                )
            else:
                self.lazy.pending.pop(pop_pos, None)
        for h, head in enumerate(self.heads):
            popped = head.push_window(n, k_post[h], v[h])
            if popped is None:
                continue
            pos, pk, pv = popped
            if pos < self.s:
                head.out_insert(pos, pk, pv, 0.0, protected=True)
            elif r_pop is not None and r_pop[h] > RETAIN_THRESHOLD:
                head.out_insert(pos, pk, pv, float(r_pop[h]), protected=False)
        self.n_seen = n + 1

    def step(self, q, k_post, v, scale=None):
        """Full decode step for token n: tick, attend, push."""
        self.tick(k_post, v)
        out = self.attend(q, k_post, v, scale=scale)
        self.push(k_post, v)
        return out

    # -- introspection --------------------------------------------------------

    def report(self) -> dict:
        heads = []
        for head in self.heads:
            _, _, _, score, prot = head.out_rows()
            plain = score[~prot]
            heads.append(
                {
                    "window_count": int(head.window_count),
                    "out_occupancy": int(head.out_count),
                    "protected": int(prot.sum()),
                    "occupancy_ratio": head.out_count / self.b if self.b else 0.0,
                    "score_min": float(plain.min()) if plain.size else None,
                    "score_max": float(plain.max()) if plain.size else None,
                    "score_mean": float(plain.mean()) if plain.size else None,
                }
            )
        return {
            "window_w": self.w,
            "cap_b": self.b,
            "sink_s": self.s,
            "n_seen": self.n_seen,
            "tick_count": self.tick_count,
            "heads": heads,
        }

    def dump_json(self) -> str:
        heads = []
        for head in self.heads:
            entries = []
            out_pos, _, _, out_score, out_prot = head.out_rows()
            for pos, score, prot in zip(out_pos, out_score, out_prot):
                entries.append(
                    {
                        "position": int(pos),
                        "score": None if prot else float(score),
                        "segment": "out",
                        "protected": bool(prot),
                    }
                )
            win_pos, _, _ = head.window_rows()
            for pos in win_pos:
                entries.append(
                    {
                        "position": int(pos),
                        "score": None,
                        "segment": "window",
                        "protected": False,
                    }
                )
            heads.append(entries)
        return json.dumps({"heads": heads}, indent=2)


class SlidingWindowCache:
    """Ring buffer for plain sliding-window layers (no retention).

    A layer with window w attends over positions [max(0, n-w+1), n]; the ring
    stores the w-1 most recent past tokens and the current token joins at
    attend time.
    """

    def __init__(self, n_heads: int, d_head: int, window_w: int):
        if window_w < 1:
            raise ValueError("window must be at least 1")
        self.n_heads = n_heads
        self.d_head = d_head
        self.capacity = window_w - 1
        self.k = np.zeros((n_heads, max(self.capacity, 1), d_head))
        self.v = np.zeros((n_heads, max(self.capacity, 1), d_head))
        self.count = 0
        self.next_ptr = 0
        self.n_seen = 0

    def _order(self):
        if self.count < self.capacity:
            return np.arange(self.count)
        return (self.next_ptr + np.arange(self.capacity)) % self.capacity

    def prefill(self, k_post: np.ndarray, v: np.ndarray) -> None:
        H, T, _ = k_post.shape
        start = max(0, T - self.capacity)
        for j in range(start, T):
            self.push(k_post[:, j], v[:, j])
        self.n_seen = T

    def attend(self, q, k_self, v_self, scale=None):
        if scale is None:
            scale = 1.0 / np.sqrt(self.d_head)
        order = self._order()
        out = np.zeros((self.n_heads, self.d_head))
        for h in range(self.n_heads):
            ks = np.concatenate([self.k[h, order], k_self[h][None]], axis=0)
            vs = np.concatenate([self.v[h, order], v_self[h][None]], axis=0)
            logits = ks @ q[h] * scale
            p = np.exp(logits - logits.max())
            p /= p.sum()
            out[h] = p @ vs
        return out

    def push(self, k_post, v):
        if self.capacity > 0:
            slot = self.next_ptr
            self.k[:, slot] = k_post
            self.v[:, slot] = v
            self.next_ptr = (slot + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)
        self.n_seen += 1

    def step(self, q, k_post, v, scale=None):
        out = self.attend(q, k_post, v, scale=scale)
        self.push(k_post, v)
        return out


class DenseCache:
    """Unbounded append-only cache for full-causal layers."""

    def __init__(self, n_heads: int, d_head: int):
        self.n_heads = n_heads
        self.d_head = d_head
        self.k: list[np.ndarray] = []
        self.v: list[np.ndarray] = []
        self.n_seen = 0

    def prefill(self, k_post: np.ndarray, v: np.ndarray) -> None:
        for j in range(k_post.shape[1]):
            self.k.append(k_post[:, j].copy())
            self.v.append(v[:, j].copy())
        self.n_seen = k_post.shape[1]

    def attend(self, q, k_self, v_self, scale=None):
        if scale is None:
            scale = 1.0 / np.sqrt(self.d_head)
        stored_k = np.stack(self.k + [k_self], axis=1) if self.k else k_self[:, None]
        stored_v = np.stack(self.v + [v_self], axis=1) if self.v else v_self[:, None]
        out = np.zeros((self.n_heads, self.d_head))
        for h in range(self.n_heads):
            logits = stored_k[h] @ q[h] * scale
            p = np.exp(logits - logits.max())
            p /= p.sum()
            out[h] = p @ stored_v[h]
        return out

    def push(self, k_post, v):
        self.k.append(np.asarray(k_post).copy())
        self.v.append(np.asarray(v).copy())
        self.n_seen += 1

    def step(self, q, k_post, v, scale=None):
        out = self.attend(q, k_post, v, scale=scale)
        self.push(k_post, v)
        return out
