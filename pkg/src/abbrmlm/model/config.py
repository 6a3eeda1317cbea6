from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping

# Experts per MoE layer grow with depth: 2/1 near the input, 8/2 near the output.
PAPER_REPLICA_MOE_PLAN = {
    1: (2, 1), 3: (2, 1), 5: (2, 1),
    7: (4, 1),
    9: (8, 2), 11: (8, 2), 13: (8, 2), 15: (8, 2),
}
DESK_MOE_PLAN = {1: (2, 1), 3: (4, 2)}

# 21128-token Chinese BERT vocabulary plus 26 letter-mask tokens.
PAPER_REPLICA_VOCAB_SIZE = 21128 + 26


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    max_position: int = 128
    moe_plan: Mapping[int, tuple[int, int]] = field(default_factory=dict)
    # "letter": queries use letter-mask tokens; "single": plain [MASK] (ablation model).
    mask_style: str = "letter"
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        plan = {int(k): (int(v[0]), int(v[1])) for k, v in dict(self.moe_plan).items()}
        object.__setattr__(self, "moe_plan", dict(sorted(plan.items())))
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        for name in ("vocab_size", "num_layers", "hidden_dim", "num_heads", "ffn_dim", "max_position"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for layer, (n_exp, k) in self.moe_plan.items():
            if not 0 <= layer < self.num_layers:
                raise ValueError(f"MoE layer {layer} outside 0..{self.num_layers - 1}")
            if n_exp < 2:
                raise ValueError(f"MoE layer {layer} needs at least 2 routed experts")
            if not 1 <= k <= n_exp:
                raise ValueError(f"MoE layer {layer}: top_k {k} not in 1..{n_exp}")
        if self.mask_style not in ("letter", "single"):
            raise ValueError(f"unknown mask_style {self.mask_style!r}")

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["moe_plan"] = {str(k): list(v) for k, v in self.moe_plan.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["moe_plan"] = {int(k): tuple(v) for k, v in d.get("moe_plan", {}).items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def desk_config(vocab_size: int, **overrides) -> ModelConfig:
    base = ModelConfig(vocab_size=vocab_size, num_layers=4, hidden_dim=64, num_heads=4,
                       ffn_dim=256, max_position=128, moe_plan=DESK_MOE_PLAN)
    return base.with_(**overrides) if overrides else base


def paper_replica_config(vocab_size: int = PAPER_REPLICA_VOCAB_SIZE, **overrides) -> ModelConfig:
    """16 layers at BERT-base width with the pyramid expert plan."""
    base = ModelConfig(vocab_size=vocab_size, num_layers=16, hidden_dim=768, num_heads=12,
                       ffn_dim=3072, max_position=512, moe_plan=PAPER_REPLICA_MOE_PLAN)
    return base.with_(**overrides) if overrides else base


PRESETS = {
    "desk": desk_config,
    "paper-replica-16L": paper_replica_config,
}


def preset(name: str, vocab_size: int, **overrides) -> ModelConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(vocab_size, **overrides)
