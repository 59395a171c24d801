"""Per-layer, per-head retention-rate reports from a model checkpoint.

The rate of a head is the fraction of eligible tokens it would keep after
they leave the recency window: positions outside the final query's window,
excluding unconditionally kept sink positions, scoring above threshold.
Rates are averaged over a deterministic sample of task sequences and land
in a CSV matrix plus a heatmap rendered alongside it.
"""

from __future__ import annotations

import numpy as np

from . import model as md
from . import training as tr
from .config import ModelConfig


def retention_matrix(
    params: dict,
    cfg: ModelConfig,
    n_samples: int = 16,
    seed: int = 0,
    batch: int = 8,
) -> tuple[np.ndarray, list[int]]:
    """Mean out-of-window retention rate per eviction layer and head.

    Returns (rates [n_layers, n_heads] in [0, 1], layer indices).  Draws at
    least ``n_samples`` sequences from the passkey corpus at the model's
    training length.
    """
    layers = cfg.lte_layers()
    if not layers or cfg.retention_override is not None:
        raise ValueError("model has no active eviction layers to report on")
    t, w, s = cfg.seq_len, cfg.window_w, cfg.sink_s
    lo = min(s, max(t - 1 - w, 0))
    hi = max(t - 1 - w, 0)
    if hi <= lo:
        raise ValueError(
            f"sequence length {t} leaves no positions outside the window"
        )
    table = md.make_table(cfg)
    kept = np.zeros((len(layers), cfg.n_heads))
    seen = 0
    rng = np.random.default_rng(seed)
    while seen < n_samples:
        take = min(batch, n_samples - seen)
        distance = int(rng.integers(8, t - 3))
        tb = tr.passkey_task((seed, seen), t, distance, batch=take)
        _, aux = md.forward_train(params, cfg, tb.tokens, table=table)
        for li, layer in enumerate(layers):
            r = aux["retention"][layer].data  # [B, T, H]
            kept[li] += (r[:, lo:hi, :] > 0.5).mean(axis=(0, 1)) * take
        seen += take
    return kept / n_samples, list(layers)


def rates_csv_rows(rates: np.ndarray, layers: list[int]) -> tuple[list, list]:
    header = ["layer"] + [f"head_{j}" for j in range(rates.shape[1])]
    rows = [
        [layer] + [f"{x:.6f}" for x in rates[li]]
        for li, layer in enumerate(layers)
    ]
    return header, rows


def plot_retention_heatmap(
    rates: np.ndarray, layers: list[int], path: str, man: dict
) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from . import manifest as mf

    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * rates.shape[1], 1.2 + 0.6 * len(layers)))
    im = ax.imshow(rates, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    ax.set_xticks(range(rates.shape[1]), [f"h{j}" for j in range(rates.shape[1])])
    ax.set_yticks(range(len(layers)), [f"layer {i}" for i in layers])
    ax.set_xlabel("head")
    ax.set_title("out-of-window retention rate")
    for li in range(rates.shape[0]):
        for hj in range(rates.shape[1]):
            ax.text(hj, li, f"{rates[li, hj]:.2f}", ha="center", va="center",
                    color="white", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    mf.save_figure(fig, path, man)
    plt.close(fig)


def cross_head_cv(rates: np.ndarray) -> float:
    """Coefficient of variation across every (layer, head) rate."""
    flat = rates.reshape(-1)
    mean = flat.mean()
    if mean == 0:
        return 0.0
    return float(flat.std() / mean)
