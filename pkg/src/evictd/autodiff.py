"""Minimal tape-based reverse-mode autodiff over dense numpy arrays.

Everything downstream (scorer convolutions, attention, the DeltaNet
recurrence) is differentiated through this module.  The design is
deliberately small: a `Tensor` wraps an immutable ndarray, operations are
plain functions that compute the forward value eagerly and, when a `Tape`
is passed, append a backward closure to it.  `Tape.backward` walks the
records in exact reverse execution order; gradients are keyed by tensor
identity.  There is no graph optimization, no broadcasting cleverness
beyond what the ops below explicitly support, and no implicit global
state: a tape is owned by exactly one execution context.

64-bit floats are the default; 32-bit is available for benchmark paths
that never differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class Tensor:
    """Immutable value wrapper around a row-major ndarray."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def _wrap(arr: np.ndarray) -> Tensor:
    """Wrap a freshly allocated array without copying."""
    t = Tensor.__new__(Tensor)
    arr.setflags(write=False)
    t.data = arr
    return t


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence]


class Tape:
    """Ordered record of executed operations plus accumulated gradients.

    A tape must not be shared across concurrent execution contexts; all
    recording and the backward pass happen on the thread that owns it.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, backward) -> None:
        self._records.append(_Record(out, inputs, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of `loss` w.r.t. every tensor on the tape.

        `loss` must be scalar unless an explicit `seed` gradient of the
        same shape is supplied.  Traversal is exact reverse execution
        order, so every operand's gradient is complete before any earlier
        record consumes it.
        """
        if seed is None:
            if loss.size != 1:
                raise ValueError("backward() needs a scalar loss or an explicit seed")
            seed = np.ones(loss.shape, dtype=loss.dtype)
        self._grads = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        for rec in reversed(self._records):
            g_out = self._grads.get(id(rec.out))
            if g_out is None:
                continue
            contribs = rec.backward(g_out)
            for t, g in zip(rec.inputs, contribs):
                if g is None:
                    continue
                slot = self._grads.get(id(t))
                if slot is None:
                    self._grads[id(t)] = g
                else:
                    self._grads[id(t)] = slot + g

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self._grads.get(id(t))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(a.data + b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(a.data - b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(a.data * b.data)
    if tape is not None:
        tape.record(
            out,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )
    return out


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = _wrap(a.data * c)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * c,))
    return out


def add_scalar(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = _wrap(a.data + c)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g,))
    return out


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Strict 2-D matrix product: [m,k] @ [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = _wrap(a.data @ b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, tape: Tape | None = None) -> Tensor:
    """x[..., K] @ w[K, N] (+ b[N]).  Leading axes are flattened internally."""
    k, n = w.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    out = _wrap(y.reshape(*lead, n))

    if tape is not None:
        def bwd(g):
            g2 = g.reshape(-1, n)
            gx = (g2 @ w.data.T).reshape(x.shape)
            gw = x2.T @ g2
            if b is not None:
                return gx, gw, g2.sum(axis=0)
            return gx, gw
        tape.record(out, (x, w) if b is None else (x, w, b), bwd)
    return out


def softmax_row(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Softmax along the last axis, numerically stabilized by the row max."""
    m = np.max(x.data, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax_row: a row has no finite entries")
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _wrap(y)
    if tape is not None:
        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)
        tape.record(out, (x,), bwd)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    # piecewise-stable logistic: exp is only ever taken of a non-positive value
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _wrap(y)
    if tape is not None:
        tape.record(out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def swish(x: Tensor, tape: Tape | None = None) -> Tensor:
    """x * sigmoid(x)."""
    s = sigmoid(x).data
    y = x.data * s
    out = _wrap(y)
    if tape is not None:
        # d/dx [x*s] = s + x*s*(1-s)
        tape.record(out, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = _wrap(y)
    if tape is not None:
        mask = x.data > 0
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


_ACTIVATIONS = {"sigmoid": sigmoid, "swish": swish, "relu": relu}


def activation(x: Tensor, kind: str, tape: Tape | None = None) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}")
    return fn(x, tape)


def dropout(x: Tensor, p: float, mode: str, seed: int, tape: Tape | None = None) -> Tensor:
    """Inverted dropout.  Deterministic for a fixed seed; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        out = _wrap(x.data.copy())
        if tape is not None:
            tape.record(out, (x,), lambda g: (g,))
        return out
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = _wrap(x.data * keep)
    if tape is not None:
        tape.record(out, (x,), lambda g: (g * keep,))
    return out


def reshape(x: Tensor, shape, tape: Tape | None = None) -> Tensor:
    out = _wrap(x.data.reshape(shape))
    if tape is not None:
        tape.record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def transpose(x: Tensor, axes, tape: Tape | None = None) -> Tensor:
    out = _wrap(np.ascontiguousarray(x.data.transpose(axes)))
    if tape is not None:
        inv = np.argsort(axes)
        tape.record(out, (x,), lambda g: (g.transpose(inv),))
    return out


def concat(xs: Sequence[Tensor], axis: int, tape: Tape | None = None) -> Tensor:
    out = _wrap(np.concatenate([x.data for x in xs], axis=axis))
    if tape is not None:
        sizes = [x.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]
        tape.record(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(np.array(x.data.sum(), dtype=x.dtype))
    if tape is not None:
        tape.record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))
    return out


def mean_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    n = x.size
    out = _wrap(np.array(x.data.mean(), dtype=x.dtype))
    if tape is not None:
        tape.record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))
    return out


def rmsnorm(x: Tensor, gain: Tensor, tape: Tape | None = None, eps: float = 1e-6) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * gain, normalizing the last axis."""
    d = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xh = x.data * inv
    out = _wrap(xh * gain.data)
    if tape is not None:
        def bwd(g):
            gxh = g * gain.data
            # d xh / d x: inv * (g - xh * mean(g * xh))
            dot = (gxh * xh).mean(axis=-1, keepdims=True)
            gx = inv * (gxh - xh * dot)
            ggain = (g * xh).reshape(-1, d).sum(axis=0)
            return gx, ggain
        tape.record(out, (x, gain), bwd)
    return out


def l2_normalize(x: Tensor, tape: Tape | None = None, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to unit Euclidean norm."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data / n
    out = _wrap(y)
    if tape is not None:
        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return ((g - y * dot) / n,)
        tape.record(out, (x,), bwd)
    return out


def embedding(table: Tensor, ids: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Row gather: table[V, D] indexed by integer ids of any shape."""
    ids = np.asarray(ids)
    out = _wrap(table.data[ids])
    if tape is not None:
        def bwd(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            return (gt,)
        tape.record(out, (table,), bwd)
    return out


def take_positions(x: Tensor, pos: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Select one time step per batch row: x[B, T, D], pos[B] -> [B, D]."""
    bidx = np.arange(x.shape[0])
    out = _wrap(x.data[bidx, pos])
    if tape is not None:
        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[bidx, pos] = g
            return (gx,)
        tape.record(out, (x,), bwd)
    return out


def gather_rows(x: Tensor, idx: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Select rows along the first axis; duplicate indices accumulate grads."""
    idx = np.asarray(idx)
    out = _wrap(x.data[idx])
    if tape is not None:
        def bwd(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx,)
        tape.record(out, (x,), bwd)
    return out


def slice_axis(
    x: Tensor, axis: int, start: int, stop: int, tape: Tape | None = None
) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    sel = tuple(slice(None) if a != axis % x.ndim else slice(start, stop) for a in range(x.ndim))
    out = _wrap(np.ascontiguousarray(x.data[sel]))
    if tape is not None:
        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[sel] = g
            return (gx,)
        tape.record(out, (x,), bwd)
    return out


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets)
    n = logits.shape[0]
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), targets]
    out = _wrap(np.array(nll.mean()))
    if tape is not None:
        p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        def bwd(g):
            gl = p.copy()
            gl[np.arange(n), targets] -= 1.0
            return (gl * (g / n),)
        tape.record(out, (logits,), bwd)
    return out


# ---------------------------------------------------------------------------
# grouped dilated 1-D convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Grouped conv1d parameters: weight[G, C_out, C_in, K], bias[G, C_out]."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be 4-D [G, C_out, C_in, K], got {self.weight.shape}")
        g, co, _, _ = self.weight.shape
        if self.bias.shape != (g, co):
            raise ValueError(f"conv bias shape {self.bias.shape} does not match weight {self.weight.shape}")


def grouped_dilated_conv1d(
    x: Tensor,
    params: ConvParams,
    dilation: int,
    left_pad: int,
    right_pad: int,
    tape: Tape | None = None,
) -> Tensor:
    """Grouped, dilated, valid-mode 1-D convolution over zero-padded input.

    x is [G, C_in, T] or [B, G, C_in, T].  Output index t reads padded input
    at taps t, t+d, ..., t+(K-1)*d, so with symmetric padding (K-1)*d/2 the
    output stays aligned and same-length.  Output length is
    T + left_pad + right_pad - (K-1)*dilation; it must be positive.

    The forward accumulates taps and input channels in a fixed order with
    purely elementwise arithmetic, so an output element's value depends only
    on its own receptive field, never on the length of the batch it was
    computed in.  The lazy/eager score equivalence leans on this.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if left_pad < 0 or right_pad < 0:
        raise ValueError("padding must be non-negative")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv input must be [G, C_in, T] or [B, G, C_in, T], got {x.shape}")
    b, g, cin, t = xd.shape
    gw, cout, cin_w, k = params.weight.shape
    if gw != g or cin_w != cin:
        raise ValueError(f"conv input {x.shape} incompatible with weight {params.weight.shape}")
    t_out = t + left_pad + right_pad - (k - 1) * dilation
    if t_out <= 0:
        raise ValueError(f"conv output length would be {t_out}; input too short for receptive field")

    xp = np.zeros((b, g, cin, t + left_pad + right_pad), dtype=xd.dtype)
    xp[:, :, :, left_pad:left_pad + t] = xd

    w = params.weight.data
    out = np.empty((b, g, cout, t_out), dtype=xd.dtype)
    out[:] = params.bias.data[None, :, :, None]
    for kk in range(k):
        seg = xp[:, :, :, kk * dilation: kk * dilation + t_out]  # [B, G, C_in, T']
        for c in range(cin):
            # fixed (tap, channel) accumulation order, elementwise only
            out += w[None, :, :, c, kk, None] * seg[:, :, None, c, :]
    res = _wrap(out[0] if squeeze else out)

    if tape is not None:
        def bwd(g_out):
            go = g_out[None] if squeeze else g_out
            gw_ = np.empty_like(w)
            gxp = np.zeros_like(xp)
            for kk in range(k):
                seg = xp[:, :, :, kk * dilation: kk * dilation + t_out]
                gw_[:, :, :, kk] = np.einsum("bgot,bgct->goc", go, seg)
                gxp[:, :, :, kk * dilation: kk * dilation + t_out] += np.einsum(
                    "goc,bgot->bgct", w[:, :, :, kk], go
                )
            gb = go.sum(axis=(0, 3))
            gx = gxp[:, :, :, left_pad:left_pad + t]
            return ((gx[0] if squeeze else gx), gw_, gb)
        tape.record(res, (x, params.weight, params.bias), bwd)
    return res


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_difference_oracle(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at x, one coordinate at a time."""
    flat = x.data.reshape(-1).copy()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(flat.reshape(x.shape)))
        flat[i] = orig - h
        fm = f(Tensor(flat.reshape(x.shape)))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def fd_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error of `analytic` against `numeric`, floored at unit scale."""
    denom = max(float(np.max(np.abs(numeric))), 1.0)
    return float(np.max(np.abs(analytic - numeric))) / denom
