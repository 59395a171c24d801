"""Training for the toy hybrid model.

Pieces: the straight-through gradient op for binary retention masks, the
L1-style sparsity penalty, the feedback controller that tunes per-head
penalty weights toward the capacity target, a plain AdamW with warmup plus
cosine decay, a synthetic passkey retrieval task, and the end-to-end loop
with newline-delimited JSON metrics and JSON checkpoints.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as md
from .autodiff import Tape, Tensor
from .config import ModelConfig

CHECKPOINT_MAGIC = "EVICTD1"
LAMBDA_FLOOR = 1e-9


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; a diagnostic checkpoint was written if possible."""


# ---------------------------------------------------------------------------
# straight-through gradient


def ste_backward(
    v: np.ndarray, m: np.ndarray, grad_vprime: np.ndarray
) -> np.ndarray:
    """Surrogate gradient on retention scores from masked-value attention.

    Given value rows v [B, H, S, d], the binary mask m [B, S, H] that was
    applied in the forward pass, and the upstream gradient on the masked
    values v' (same shape as v), the gradient on the score r_{j,h} is the
    inner product <v_{j,h}, dL/dv'_{j,h}>.  The mask fixes shapes and the
    contract; its values do not enter the formula.
    """
    v = np.asarray(v)
    m = np.asarray(m)
    grad_vprime = np.asarray(grad_vprime)
    if v.shape != grad_vprime.shape:
        raise ValueError(
            f"value and upstream-gradient shapes differ: {v.shape} vs {grad_vprime.shape}"
        )
    if v.ndim != 4:
        raise ValueError("expected [B, H, S, d] value rows")
    b, h, s_len, _ = v.shape
    if m.shape != (b, s_len, h):
        raise ValueError(
            f"mask must be [B, S, H] = {(b, s_len, h)}, got {m.shape}"
        )
    return np.einsum("bhjd,bhjd->bjh", v, grad_vprime)


# ---------------------------------------------------------------------------
# sparsity penalty


def sparsity_loss(r: Tensor, lam: np.ndarray, tape: Tape | None = None) -> Tensor:
    """L1-style penalty batch-mean of sum_h lambda_h sum_i relu(r_ih - 0.5).

    r is [B, T, H]; lam is a per-head vector or scalar, treated as a
    constant.  Sink positions must be sliced off by the caller (they are
    unconditionally retained and carry no penalty).
    """
    b = r.shape[0]
    lam_arr = np.broadcast_to(np.asarray(lam, dtype=float), (r.shape[-1],))
    excess = ad.relu(ad.add_scalar(r, -0.5, tape), tape)
    weighted = ad.mul(excess, Tensor(lam_arr.reshape(1, 1, -1)), tape)
    return ad.scale(ad.sum_all(weighted, tape), 1.0 / b, tape)


def retained_counts(r_values: np.ndarray, w: int, s: int) -> np.ndarray:
    """Per-head batch-mean count of retention-eligible tokens.

    Counts positions scoring above threshold among those outside the final
    position's recency window, excluding sink positions: j in [s, T-1-w).
    This is the population the out-segment capacity actually bounds.
    """
    b, t, h = r_values.shape
    hi = max(t - 1 - w, 0)
    lo = min(s, hi)
    window = r_values[:, lo:hi, :] > 0.5
    return window.sum(axis=1).mean(axis=0)


# ---------------------------------------------------------------------------
# feedback controller


class SparsityController:
    """Per-layer, per-head multiplicative control of the sparsity weights.

    Every step folds the observed retained counts into an EMA; every
    ``update_period`` steps each weight moves one geometric step up when the
    EMA exceeds the capacity target, down when it falls below 95% of it,
    clamped to [0, 1] with hard elimination below 1e-9 and re-enabling when
    an eliminated head grows over-dense again.
    """

    def __init__(
        self,
        n_layers: int,
        n_heads: int,
        cap_b: int,
        update_period: int = 32,
        alpha_step: float = 1.2,
    ):
        if update_period <= 0:
            raise ValueError("update period must be positive")
        if alpha_step <= 1.0:
            raise ValueError("alpha_step must exceed 1")
        self.shape = (n_layers, n_heads)
        self.cap_b = cap_b
        self.update_period = update_period
        self.alpha_step = alpha_step
        self.alpha_ema = 2.0 / (1.0 + update_period / 2.0)
        self.lam = np.full(self.shape, LAMBDA_FLOOR)
        self.cbar: np.ndarray | None = None

    def observe(self, c: np.ndarray, step: int) -> None:
        """Fold one step's counts in; adjust weights when the cycle closes."""
        c = np.asarray(c, dtype=float)
        if c.shape != self.shape:
            raise ValueError(f"counts must have shape {self.shape}, got {c.shape}")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        if self.cbar is None:
            self.cbar = c.copy()
        else:
            self.cbar = self.alpha_ema * self.cbar + (1.0 - self.alpha_ema) * c
        if step % self.update_period == 0:
            self._adjust()

    def _adjust(self) -> None:
        direction = np.where(
            self.cbar > self.cap_b, 1, np.where(self.cbar < 0.95 * self.cap_b, -1, 0)
        )
        self.lam = np.minimum(self.lam * self.alpha_step**direction, 1.0)
        self.lam[self.lam < LAMBDA_FLOOR] = 0.0
        self.lam[(self.lam == 0.0) & (self.cbar > self.cap_b)] = LAMBDA_FLOOR

    def state(self) -> dict:
        return {
            "lam": self.lam.tolist(),
            "cbar": None if self.cbar is None else self.cbar.tolist(),
            "cap_b": self.cap_b,
            "update_period": self.update_period,
            "alpha_step": self.alpha_step,
        }

    @classmethod
    def from_state(cls, st: dict) -> "SparsityController":
        lam = np.asarray(st["lam"], dtype=float)
        ctrl = cls(
            lam.shape[0],
            lam.shape[1],
            st["cap_b"],
            update_period=st["update_period"],
            alpha_step=st["alpha_step"],
        )
        ctrl.lam = lam
        ctrl.cbar = None if st["cbar"] is None else np.asarray(st["cbar"], dtype=float)
        return ctrl


# ---------------------------------------------------------------------------
# optimizer


def lr_at(step: int, base: float, warmup: int, total: int, min_ratio: float) -> float:
    """Linear warmup then cosine decay to min_ratio * base."""
    if total <= 0:
        return base
    if warmup > 0 and step <= warmup:
        return base * step / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    floor = base * min_ratio
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict.

    Decay applies only to matrices (ndim >= 2) that are not biases; gains
    and biases are exempt.  State is plain float64 and serializes
    losslessly.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(
        self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float
    ) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            new = p.data - lr * update
            if self.weight_decay and p.data.ndim >= 2 and not name.endswith("bias"):
                new = new - lr * self.weight_decay * p.data
            params[name] = Tensor(new)

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state(self, st: dict, params: dict[str, Tensor]) -> None:
        self.t = st["t"]
        for k, p in params.items():
            self.m[k] = np.asarray(st["m"][k], dtype=float).reshape(p.data.shape)
            self.v[k] = np.asarray(st["v"][k], dtype=float).reshape(p.data.shape)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return total


# ---------------------------------------------------------------------------
# passkey task


@dataclass
class TrainBatch:
    tokens: np.ndarray       # [B, T]
    query_pos: np.ndarray    # [B]
    target: np.ndarray       # [B] digit ids
    distance: int


N_FILLER = 16
N_DIGITS = 16
KEY_TOKEN = N_FILLER + N_DIGITS       # 32
QUERY_TOKEN = KEY_TOKEN + 1           # 33
PASSKEY_VOCAB = QUERY_TOKEN + 1       # 34


def passkey_task(seed, T: int, distance: int, batch: int = 1) -> TrainBatch:
    """Random filler stream hiding one (marker, digit) pair per row.

    The digit sits ``distance`` positions before the query marker; the token
    after the query repeats the digit, so next-token loss at the query
    position is the retrieval objective.
    """
    if not 0 < distance < T:
        raise ValueError("distance must be in (0, T)")
    rng = np.random.default_rng(seed)
    q = T - 2
    digit_pos = q - distance
    if digit_pos < 1:
        raise ValueError(
            f"distance {distance} leaves no room for the marker before position 0"
        )
    tokens = rng.integers(0, N_FILLER, size=(batch, T))
    digits = rng.integers(0, N_DIGITS, size=batch)
    tokens[:, digit_pos - 1] = KEY_TOKEN
    tokens[:, digit_pos] = N_FILLER + digits
    tokens[:, q] = QUERY_TOKEN
    tokens[:, q + 1] = N_FILLER + digits
    return TrainBatch(
        tokens=tokens,
        query_pos=np.full(batch, q),
        target=N_FILLER + digits,
        distance=distance,
    )


def passkey_accuracy(
    params: dict[str, Tensor], cfg: ModelConfig, batches: list[TrainBatch]
) -> float:
    hits = 0
    total = 0
    for tb in batches:
        logits, _ = md.forward_train(params, cfg, tb.tokens)
        pred = logits.data[np.arange(tb.tokens.shape[0]), tb.query_pos].argmax(-1)
        hits += int((pred == tb.target).sum())
        total += tb.tokens.shape[0]
    return hits / total


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    step: int,
    controller: SparsityController | None = None,
    optimizer: AdamW | None = None,
    failure: str | None = None,
) -> None:
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": 1,
        "config": json.loads(cfg.to_json()),
        "step": step,
        "params": {
            name: {
                "shape": list(p.data.shape),
                "dtype": str(p.data.dtype),
                "data": p.data.reshape(-1).tolist(),
            }
            for name, p in params.items()
        },
        "controller": None if controller is None else controller.state(),
        "optimizer": None if optimizer is None else optimizer.state(),
    }
    if failure is not None:
        doc["failure"] = failure
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a recognizable checkpoint")
    cfg = ModelConfig.from_json(json.dumps(doc["config"]))
    params = {
        name: Tensor(
            np.asarray(spec["data"], dtype=spec["dtype"]).reshape(spec["shape"])
        )
        for name, spec in doc["params"].items()
    }
    out = {
        "config": cfg,
        "params": params,
        "step": doc["step"],
        "controller": doc.get("controller"),
        "optimizer": doc.get("optimizer"),
    }
    if "failure" in doc:
        out["failure"] = doc["failure"]
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSettings:
    lr: float = 3e-3
    batch_size: int = 8
    warmup: int = 40
    lr_min_ratio: float = 0.1
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    dist_lo: int = 8
    dist_hi: int | None = None  # default: longest distance the layout allows
    # optional curriculum: with this probability draw the distance from
    # [dist_lo, dist_short_hi] instead of the full range, so in-window
    # retrievals stay frequent while the far tail is still covered
    dist_short_frac: float | None = None
    dist_short_hi: int | None = None
    sparsity: bool = True
    checkpoint_every: int = 0   # 0: only at the end
    total_steps: int | None = None  # schedule horizon; default: end of this run


def train_toy(
    cfg: ModelConfig,
    steps: int,
    seed: int,
    task: str = "passkey",
    settings: TrainSettings | None = None,
    out_dir: str | None = None,
    metrics_fh=None,
    resume: str | None = None,
) -> dict:
    """Train the toy model; returns params, controller, optimizer, metrics.

    Metrics records are appended to ``metrics_fh`` (newline-delimited JSON)
    when given.  ``resume`` restarts from a checkpoint, continuing the step
    count monotonically and reproducing the batch stream of an unbroken run.
    """
    if task != "passkey":
        raise ValueError(f"unknown task {task!r}")
    st = settings or TrainSettings()
    lte_layers = [] if cfg.retention_override else cfg.lte_layers()
    start_step = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck["config"] != cfg:
            raise ValueError("checkpoint config does not match requested config")
        params = ck["params"]
        start_step = ck["step"]
        controller = (
            SparsityController.from_state(ck["controller"])
            if ck["controller"] is not None
            else _fresh_controller(cfg, lte_layers)
        )
        optimizer = AdamW(
            params, betas=st.betas, eps=st.eps, weight_decay=st.weight_decay
        )
        if ck["optimizer"] is not None:
            optimizer.load_state(ck["optimizer"], params)
    else:
        params = md.init_params(cfg, seed)
        controller = _fresh_controller(cfg, lte_layers)
        optimizer = AdamW(
            params, betas=st.betas, eps=st.eps, weight_decay=st.weight_decay
        )

    table = md.make_table(cfg)
    dist_hi = st.dist_hi if st.dist_hi is not None else cfg.seq_len - 3
    total = start_step + steps
    horizon = st.total_steps if st.total_steps is not None else total
    metrics: list[dict] = []

    for step in range(start_step + 1, total + 1):
        batch_rng = np.random.default_rng((seed, step))
        if st.dist_short_frac is not None and batch_rng.random() < st.dist_short_frac:
            short_hi = st.dist_short_hi if st.dist_short_hi is not None else dist_hi
            distance = int(batch_rng.integers(st.dist_lo, short_hi + 1))
        else:
            distance = int(batch_rng.integers(st.dist_lo, dist_hi + 1))
        tb = passkey_task((seed, step, 1), cfg.seq_len, distance, st.batch_size)

        tape = Tape()
        logits, aux = md.forward_train(
            params, cfg, tb.tokens, tape=tape, dropout_seed=step, training=True,
            table=table,
        )
        rows = ad.take_positions(logits, tb.query_pos, tape)
        lm_loss = ad.cross_entropy_logits(rows, tb.target, tape)
        loss = lm_loss
        sp_value = 0.0
        c_mat = np.zeros((len(lte_layers), cfg.n_heads))
        for li, layer in enumerate(lte_layers):
            r = aux["retention"][layer]
            c_mat[li] = retained_counts(r.data, cfg.window_w, cfg.sink_s)
            if st.sparsity:
                r_eligible = ad.slice_axis(r, 1, cfg.sink_s, r.shape[1], tape)
                sp = sparsity_loss(r_eligible, controller.lam[li], tape)
                sp_value += float(sp.data)
                loss = ad.add(loss, sp, tape)

        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            diagnostic = (
                f"non-finite loss {loss_value} at step {step} "
                f"(lm={float(lm_loss.data)}, sparsity={sp_value})"
            )
            if out_dir is not None:
                save_checkpoint(
                    os.path.join(out_dir, "checkpoint.json"),
                    cfg, params, step - 1, controller, optimizer,
                    failure=diagnostic,
                )
            raise TrainingDiverged(diagnostic)

        tape.backward(loss)
        grads = {}
        for name, p in params.items():
            g = tape.grad(p)
            if g is not None:
                grads[name] = g
        grad_norm = clip_global_norm(grads, st.clip_norm)
        optimizer.step(
            params, grads, lr_at(step, st.lr, st.warmup, horizon, st.lr_min_ratio)
        )
        if lte_layers:
            controller.observe(c_mat, step)

        record = {
            "step": step,
            "loss": loss_value,
            "lm_loss": float(lm_loss.data),
            "sparsity_loss": sp_value,
            "grad_norm": grad_norm,
            "distance": distance,
            "c": c_mat.tolist(),
            "lambda": controller.lam.tolist() if lte_layers else [],
        }
        metrics.append(record)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record) + "\n")
            metrics_fh.flush()
        if (
            out_dir is not None
            and st.checkpoint_every
            and step % st.checkpoint_every == 0
        ):
            save_checkpoint(
                os.path.join(out_dir, "checkpoint.json"),
                cfg, params, step, controller, optimizer,
            )

    if out_dir is not None:
        save_checkpoint(
            os.path.join(out_dir, "checkpoint.json"),
            cfg, params, total, controller, optimizer,
        )
    return {
        "params": params,
        "controller": controller,
        "optimizer": optimizer,
        "metrics": metrics,
        "step": total,
    }


def _fresh_controller(cfg: ModelConfig, lte_layers) -> SparsityController:
    return SparsityController(
        max(len(lte_layers), 1),
        cfg.n_heads,
        cfg.cap_b,
        update_period=cfg.update_period_u,
        alpha_step=cfg.alpha_step,
    )
