"""Prefill cost benchmarks for the token-mixing kernels.

Measures wall-clock of the mixing computation only: inputs are built outside
the timed region, one warm-up call is discarded, and the reported mean is
taken over the middle runs (middle three of five at the default rep count).
The LTE benchmark prefills against an artificial half-full out-of-window
segment so the constant extra cost of retained tokens is included.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import attention as at
from . import nsa as ns
from .autodiff import Tensor

MIXERS = ("swa", "lte", "dense", "nsa")


@dataclass
class BenchGeometry:
    """Single-head shapes used by the cost benchmarks."""

    d_head: int = 64
    window_w: int = 768
    cap_b: int = 512
    tile: int = 256
    nsa_block: int = 64
    nsa_top_k: int = 8
    nsa_window: int = 256


def make_inputs(mixer: str, n: int, seed: int, geo: BenchGeometry) -> dict:
    """Everything a mixer call needs, allocated outside the timed region."""
    if mixer not in MIXERS:
        raise ValueError(f"unknown mixer {mixer!r}; choose from {MIXERS}")
    rng = np.random.default_rng((seed, MIXERS.index(mixer), n))
    d = geo.d_head
    qkv = {
        name: (rng.standard_normal((n, d)) / np.sqrt(d)).astype(np.float32)
        for name in ("q", "k", "v")
    }
    inputs = {"n": n, "geo": geo, **qkv}
    if mixer in ("swa", "lte"):
        inputs["positions"] = np.arange(n)
        if mixer == "lte":
            # a half-full compacted segment, all older than any query's band
            half = geo.cap_b // 2
            inputs["compact_k"] = (
                rng.standard_normal((half, d)) / np.sqrt(d)
            ).astype(np.float32)
            inputs["compact_v"] = (
                rng.standard_normal((half, d)) / np.sqrt(d)
            ).astype(np.float32)
            inputs["compact_pos"] = -(geo.window_w + 1) - np.arange(half)
        else:
            inputs["compact_k"] = np.zeros((0, d), dtype=np.float32)
            inputs["compact_v"] = np.zeros((0, d), dtype=np.float32)
            inputs["compact_pos"] = np.zeros(0, dtype=int)
    elif mixer == "nsa":
        inputs["params"] = ns.init_nsa_params(
            d, block_size=geo.nsa_block, top_k=geo.nsa_top_k,
            w_swa=geo.nsa_window, seed=seed,
        )
    return inputs


def run_mixer(mixer: str, inputs: dict) -> float:
    """One prefill pass; returns a checksum so the work cannot be elided."""
    if mixer == "dense":
        out = at.dense_causal_attention(inputs["q"], inputs["k"], inputs["v"])
    elif mixer in ("swa", "lte"):
        geo = inputs["geo"]
        out, _ = at.two_stage_sparse_attention(
            inputs["q"], inputs["k"], inputs["v"], inputs["positions"],
            inputs["compact_k"], inputs["compact_v"], inputs["compact_pos"],
            geo.window_w, tile=geo.tile,
        )
    elif mixer == "nsa":
        tens, _ = ns.nsa_forward(
            Tensor(inputs["q"].astype(float)),
            Tensor(inputs["k"].astype(float)),
            Tensor(inputs["v"].astype(float)),
            inputs["params"],
        )
        out = tens.data
    else:
        raise ValueError(f"unknown mixer {mixer!r}")
    return float(out.sum())


def aggregate(times_ms: list[float]) -> tuple[float, float, float]:
    """(mean over middle runs, p50, p90); extremes are dropped symmetrically."""
    arr = np.sort(np.asarray(times_ms))
    middle = arr[1:-1] if arr.size >= 3 else arr
    return (
        float(middle.mean()),
        float(np.percentile(arr, 50)),
        float(np.percentile(arr, 90)),
    )


def time_mixer(
    mixer: str, n: int, reps: int, seed: int, geo: BenchGeometry
) -> list[float]:
    inputs = make_inputs(mixer, n, seed, geo)
    run_mixer(mixer, inputs)  # warm-up, excluded
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        run_mixer(mixer, inputs)
        times.append((time.perf_counter() - t0) * 1e3)
    return times


BENCH_HEADER = ["mixer", "N", "mean_ms", "p50", "p90"]


def run_bench(
    mixers: list[str],
    lengths: list[int],
    reps: int = 5,
    seed: int = 0,
    geo: BenchGeometry | None = None,
) -> list[dict]:
    """One aggregated row per (mixer, length); lengths must ascend."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if list(lengths) != sorted(lengths) or len(set(lengths)) != len(lengths):
        raise ValueError("lengths must be strictly ascending")
    geo = geo or BenchGeometry()
    rows = []
    for mixer in mixers:
        for n in lengths:
            mean_ms, p50, p90 = aggregate(time_mixer(mixer, n, reps, seed, geo))
            rows.append(
                {"mixer": mixer, "N": n, "mean_ms": mean_ms, "p50": p50, "p90": p90}
            )
    return rows


def rows_as_csv_lists(rows: list[dict]) -> list[list]:
    return [
        [r["mixer"], r["N"], f"{r['mean_ms']:.3f}", f"{r['p50']:.3f}", f"{r['p90']:.3f}"]
        for r in rows
    ]


def plot_bench(rows: list[dict], path: str, man: dict) -> None:
    """Log-log cost curves, one line per mixer, written next to the CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from . import manifest as mf

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for mixer in dict.fromkeys(r["mixer"] for r in rows):
        pts = [(r["N"], r["mean_ms"]) for r in rows if r["mixer"] == mixer]
        ns_, ms = zip(*sorted(pts))
        ax.plot(ns_, ms, marker="o", label=mixer)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length N")
    ax.set_ylabel("prefill time (ms)")
    ax.set_title("token-mixer prefill cost")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    mf.save_figure(fig, path, man)
    plt.close(fig)
