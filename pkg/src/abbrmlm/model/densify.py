from __future__ import annotations

from typing import Mapping

import torch

from .config import ModelConfig
from .modules import INIT_STD, FeedForward, MaskedLM, MoELayer

# softmax([0, -10]) gives beta ~= 4.5e-5, so the converted model starts out
# almost exactly equal to its dense source.
SHARED_LOGIT = 0.0
ROUTED_LOGIT = -10.0


def densify_to_moe(dense: MaskedLM, moe_plan: Mapping[int, tuple[int, int]],
                   seed: int = 0) -> MaskedLM:
    """Return a copy of ``dense`` with the listed FFN layers turned into MoE layers.

    Each new layer's shared expert is an exact copy of the source FFN; routed
    experts and the router are drawn from N(0, 0.02^2) with ``seed``.
    """
    cfg = dense.config
    for idx in moe_plan:
        if not 0 <= int(idx) < cfg.num_layers:
            raise ValueError(f"MoE plan layer {idx} outside 0..{cfg.num_layers - 1}")
        if dense.layers[int(idx)].is_moe:
            raise ValueError(f"layer {idx} is already an MoE layer")
    plan = {**cfg.moe_plan, **{int(k): tuple(v) for k, v in moe_plan.items()}}
    new_cfg = ModelConfig.from_dict({**cfg.to_dict(), "moe_plan": plan})
    param = next(dense.parameters())
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MaskedLM(new_cfg).to(dtype=param.dtype, device=param.device)
        for idx in moe_plan:
            layer = model.layers[int(idx)].ffn
            for expert in layer.experts:
                _init_ffn(expert)
            torch.nn.init.normal_(layer.router.weight, std=INIT_STD)
    target = model.state_dict()
    source = dense.state_dict()
    with torch.no_grad():
        for name, tensor in source.items():
            if name in target:
                target[name].copy_(tensor)
        for idx in moe_plan:
            src = dense.layers[int(idx)].ffn
            dst: MoELayer = model.layers[int(idx)].ffn
            dst.shared_expert.load_state_dict(src.state_dict())
            dst.combine_logits.copy_(torch.tensor([SHARED_LOGIT, ROUTED_LOGIT]))
    model.train(dense.training)
    return model


def _init_ffn(ffn: FeedForward) -> None:
    for lin in (ffn.fc_in, ffn.fc_out):
        torch.nn.init.normal_(lin.weight, std=INIT_STD)
        torch.nn.init.zeros_(lin.bias)
