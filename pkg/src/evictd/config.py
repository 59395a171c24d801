"""Model configuration, presets, and parameter accounting.

A config fully determines the hybrid stack: one mixer kind per layer
("gdn", "lte", "swa", or "dense"), shared head geometry, the eviction
window/cap/sink sizes, and training-side knobs.  Two families of presets
exist: trainable toys, and shape-only stand-ins mirroring larger published
geometries for size arithmetic and benchmarks (never trained here).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .scorer import RECEPTIVE_FIELD, scorer_param_count

MIXER_KINDS = ("gdn", "lte", "swa", "dense")
ATTENTION_KINDS = ("lte", "swa", "dense")


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    pattern: tuple[str, ...]
    window_w: int
    cap_b: int
    sink_s: int
    mlp_ratio: int = 2
    dropout_p: float = 0.1
    rope_base: float = 10000.0
    seq_len: int = 192
    retention_override: str | None = None  # "retain_all" disables eviction
    # controller settings
    update_period_u: int = 32
    alpha_step: float = 1.2
    name: str = "custom"

    def __post_init__(self):
        self.pattern = tuple(self.pattern)
        self.validate()

    def validate(self) -> None:
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*d_head "
                f"({self.n_heads}*{self.d_head})"
            )
        if len(self.pattern) != self.n_layers:
            raise ValueError(
                f"pattern has {len(self.pattern)} entries for {self.n_layers} layers"
            )
        for kind in self.pattern:
            if kind not in MIXER_KINDS:
                raise ValueError(f"unknown mixer kind {kind!r}")
        if self.window_w < RECEPTIVE_FIELD:
            raise ValueError(
                f"window ({self.window_w}) must be >= the scorer receptive "
                f"field ({RECEPTIVE_FIELD})"
            )
        if self.cap_b < self.sink_s:
            raise ValueError(
                f"out-segment capacity ({self.cap_b}) cannot be below the "
                f"sink size ({self.sink_s})"
            )
        if self.sink_s < 0:
            raise ValueError("sink size must be non-negative")
        if self.d_head % 4 != 0:
            raise ValueError("d_head must be divisible by 4 for the scorer")
        if self.retention_override not in (None, "retain_all"):
            raise ValueError(f"unknown retention override {self.retention_override!r}")
        if self.update_period_u <= 0:
            raise ValueError("controller update period must be positive")

    def lte_layers(self) -> list[int]:
        return [i for i, k in enumerate(self.pattern) if k == "lte"]

    def to_json(self) -> str:
        d = asdict(self)
        d["pattern"] = list(self.pattern)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["pattern"] = tuple(d["pattern"])
        return cls(**d)

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def toy_config(**overrides) -> ModelConfig:
    """Small trainable hybrid: gated delta-rule layers interleaved 1:1 with
    eviction-attention layers."""
    cfg = ModelConfig(
        vocab_size=34,
        n_layers=4,
        d_model=32,
        n_heads=2,
        d_head=16,
        pattern=("gdn", "lte", "gdn", "lte"),
        window_w=32,
        cap_b=16,
        sink_s=2,
        seq_len=192,
        alpha_step=2.0,
        name="toy",
    )
    return cfg.with_overrides(**overrides) if overrides else cfg


def swa_only_toy_config(**overrides) -> ModelConfig:
    """Control model: identical shape, every mixer a plain sliding window.

    With L layers of window w, information can travel at most L*w positions
    up the stack, so retrieval beyond that range is impossible by
    construction.
    """
    cfg = toy_config(pattern=("swa",) * 4, name="swa-only-toy")
    return cfg.with_overrides(**overrides) if overrides else cfg


def shape_04b_config() -> ModelConfig:
    """Shape-only stand-in for a ~0.4B hybrid (24 layers, hidden 1024)."""
    return ModelConfig(
        vocab_size=50_000,
        n_layers=24,
        d_model=1024,
        n_heads=16,
        d_head=64,
        pattern=("gdn", "lte") * 12,
        window_w=768,
        cap_b=512,
        sink_s=4,
        seq_len=4096,
        name="0.4b-shape",
    )


def shape_14b_config() -> ModelConfig:
    """Shape-only stand-in for a ~1.4B hybrid (24 layers, hidden 2048)."""
    return ModelConfig(
        vocab_size=50_000,
        n_layers=24,
        d_model=2048,
        n_heads=16,
        d_head=128,
        pattern=("gdn", "lte") * 12,
        window_w=768,
        cap_b=512,
        sink_s=4,
        seq_len=4096,
        name="1.4b-shape",
    )


PRESETS = {
    "toy": toy_config,
    "swa-only-toy": swa_only_toy_config,
    "0.4b-shape": shape_04b_config,
    "1.4b-shape": shape_14b_config,
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    cfg = PRESETS[name]()
    return cfg.with_overrides(**overrides) if overrides else cfg


def mixer_param_count(cfg: ModelConfig, kind: str) -> int:
    """Host-model parameters of one mixer (scorer weights excluded)."""
    d, h = cfg.d_model, cfg.n_heads
    qkvo = 4 * d * d
    if kind == "gdn":
        return qkvo + 2 * (d * h + h)  # two gate projections
    return qkvo


def layer_param_count(cfg: ModelConfig, kind: str) -> int:
    d, r = cfg.d_model, cfg.mlp_ratio
    mlp = d * (r * d) + r * d + (r * d) * d + d
    norms = 2 * d
    return mixer_param_count(cfg, kind) + mlp + norms


def model_param_count(cfg: ModelConfig) -> int:
    """Total host parameters: embeddings, layers, final norm, unembedding."""
    total = cfg.vocab_size * cfg.d_model * 2 + cfg.d_model
    for kind in cfg.pattern:
        total += layer_param_count(cfg, kind)
    return total


def scorer_total_param_count(cfg: ModelConfig) -> int:
    return scorer_param_count(cfg.n_heads, cfg.d_head) * len(cfg.lte_layers())


def scorer_param_ratio(cfg: ModelConfig) -> float:
    """Scorer parameters as a fraction of host-model parameters."""
    return scorer_total_param_count(cfg) / model_param_count(cfg)
