"""Encoder with shared-expert mixture-of-experts feed-forward layers."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import NumericError
from .config import ModelConfig

INIT_STD = 0.02


class FeedForward(nn.Module):
    def __init__(self, hidden_dim: int, ffn_dim: int):
        super().__init__()
        self.fc_in = nn.Linear(hidden_dim, ffn_dim)
        self.fc_out = nn.Linear(ffn_dim, hidden_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc_out(F.gelu(self.fc_in(x)))


class MoELayer(nn.Module):
    """One always-on shared expert plus top-k routed experts.

    ``out = alpha * shared(x) + beta * sum_{i in topk(W)} W_i * expert_i(x)``
    where ``W = softmax(router(x))`` and ``alpha, beta = softmax([a, b])``.
    The selected router weights are used as-is, without renormalising over
    the top-k.  Ties in W go to the lower expert index.
    """

    def __init__(self, hidden_dim: int, ffn_dim: int, num_experts: int, top_k: int):
        super().__init__()
        if num_experts < 2 or not 1 <= top_k <= num_experts:
            raise ValueError(f"invalid expert layout ({num_experts}, {top_k})")
        self.num_experts = num_experts
        self.top_k = top_k
        self.router = nn.Linear(hidden_dim, num_experts, bias=False)
        self.experts = nn.ModuleList(FeedForward(hidden_dim, ffn_dim) for _ in range(num_experts))
        self.shared_expert = FeedForward(hidden_dim, ffn_dim)
        self.combine_logits = nn.Parameter(torch.zeros(2))
        # When set to a list, forward() appends one routing record per call.
        self.capture: list[dict] | None = None

    def mixing_weights(self) -> tuple[torch.Tensor, torch.Tensor]:
        alpha_beta = torch.softmax(self.combine_logits, dim=0)
        return alpha_beta[0], alpha_beta[1]

    def route(self, x_flat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (router softmax W, top-k weights, top-k expert indices)."""
        weights = torch.softmax(self.router(x_flat), dim=-1)
        ranked, order = torch.sort(weights, dim=-1, descending=True, stable=True)
        return weights, ranked[:, :self.top_k], order[:, :self.top_k]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NumericError("non-finite input to MoE layer")
        shape = x.shape
        x_flat = x.reshape(-1, shape[-1])
        weights, top_w, top_i = self.route(x_flat)
        routed = torch.zeros_like(x_flat)
        for e, expert in enumerate(self.experts):
            rows, slot = torch.nonzero(top_i == e, as_tuple=True)
            if rows.numel() == 0:
                continue
            contrib = top_w[rows, slot].unsqueeze(-1) * expert(x_flat[rows])
            routed = routed.index_add(0, rows, contrib)
        alpha, beta = self.mixing_weights()
        out = alpha * self.shared_expert(x_flat) + beta * routed
        if self.capture is not None:
            self.capture.append({
                "input": x_flat.detach(), "output": out.detach(),
                "weights": weights.detach(), "experts": top_i.detach(),
            })
        return out.reshape(shape)


def moe_forward(layer: MoELayer, x: torch.Tensor) -> torch.Tensor:
    return layer(x)


class SelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.proj = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, x: torch.Tensor, key_padding: torch.Tensor) -> torch.Tensor:
        b, t, h = x.shape
        d = h // self.num_heads
        q, k, v = self.qkv(x).view(b, t, 3, self.num_heads, d).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(d)
        # key_padding: (b, t) True where the key is padding.
        scores = scores.masked_fill(key_padding[:, None, None, :], torch.finfo(scores.dtype).min)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, h)
        return self.proj(out)


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig, index: int):
        super().__init__()
        h = config.hidden_dim
        self.ln_attn = nn.LayerNorm(h, eps=config.layer_norm_eps)
        self.attn = SelfAttention(h, config.num_heads)
        self.ln_ffn = nn.LayerNorm(h, eps=config.layer_norm_eps)
        if index in config.moe_plan:
            n_exp, k = config.moe_plan[index]
            self.ffn = MoELayer(h, config.ffn_dim, n_exp, k)
        else:
            self.ffn = FeedForward(h, config.ffn_dim)

    @property
    def is_moe(self) -> bool:
        return isinstance(self.ffn, MoELayer)

    def forward(self, x: torch.Tensor, key_padding: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_attn(x), key_padding)
        return x + self.ffn(self.ln_ffn(x))


class MaskedLM(nn.Module):
    """Pre-norm transformer encoder with a weight-tied MLM head.

    ``forward`` returns per-position log-probabilities over the vocabulary.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        h = config.hidden_dim
        self.tok_emb = nn.Embedding(config.vocab_size, h)
        self.pos_emb = nn.Embedding(config.max_position, h)
        self.layers = nn.ModuleList(EncoderLayer(config, i) for i in range(config.num_layers))
        self.ln_final = nn.LayerNorm(h, eps=config.layer_norm_eps)
        self.head_dense = nn.Linear(h, h)
        self.head_ln = nn.LayerNorm(h, eps=config.layer_norm_eps)
        self.head_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=INIT_STD)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, std=INIT_STD)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.head_bias)
        for m in self.modules():
            if isinstance(m, MoELayer):
                nn.init.zeros_(m.combine_logits)

    def moe_layers(self) -> dict[int, MoELayer]:
        return {i: layer.ffn for i, layer in enumerate(self.layers) if layer.is_moe}

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor | None = None) -> torch.Tensor:
        if input_ids.dim() != 2:
            raise ValueError(f"input_ids must be 2-D, got shape {tuple(input_ids.shape)}")
        b, t = input_ids.shape
        if t > self.config.max_position:
            raise ValueError(f"sequence width {t} exceeds max_position {self.config.max_position}")
        if attention_mask is None:
            attention_mask = torch.ones_like(input_ids)
        elif attention_mask.shape != input_ids.shape:
            raise ValueError("attention_mask shape does not match input_ids")
        positions = torch.arange(t, device=input_ids.device)
        x = self.tok_emb(input_ids) + self.pos_emb(positions)[None]
        key_padding = attention_mask == 0
        for layer in self.layers:
            x = layer(x, key_padding)
        x = self.head_ln(F.gelu(self.head_dense(self.ln_final(x))))
        logits = x @ self.tok_emb.weight.T + self.head_bias
        return torch.log_softmax(logits, dim=-1)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> MaskedLM:
    """Construct a freshly initialised model, deterministic in ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MaskedLM(config)
    return model.to(dtype)
