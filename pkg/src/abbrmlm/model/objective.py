from __future__ import annotations

import warnings
from typing import NamedTuple

import torch

from ..errors import NumericError
from ..masking import IGNORE_INDEX, MaskedBatch
from .modules import MaskedLM


class LossValue(NamedTuple):
    total: torch.Tensor   # sum of -log P(gold) over masked positions
    mean: torch.Tensor    # total / n_masked; what the trainer minimises
    n_masked: int


def batch_tensors(batch: MaskedBatch, device=None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    return (
        torch.as_tensor(batch.input_ids, device=device),
        torch.as_tensor(batch.attention_mask, device=device),
        torch.as_tensor(batch.target_ids, device=device),
    )


def forward(model: MaskedLM, batch: MaskedBatch) -> torch.Tensor:
    input_ids, attention_mask, _ = batch_tensors(batch)
    return model(input_ids, attention_mask)


def mlm_loss(logprobs: torch.Tensor, batch_or_targets) -> LossValue:
    """Cross-entropy over masked positions.

    Summing over every position with a target is the same as summing over each
    letter's index set in turn, since those sets partition the masked positions.
    """
    targets = batch_or_targets
    if isinstance(targets, MaskedBatch):
        targets = targets.target_ids
    targets = torch.as_tensor(targets, device=logprobs.device)
    if logprobs.shape[:-1] != targets.shape:
        raise ValueError(f"logprobs {tuple(logprobs.shape)} do not match targets {tuple(targets.shape)}")
    mask = targets != IGNORE_INDEX
    n = int(mask.sum())
    if n == 0:
        warnings.warn("batch has no masked positions; loss is 0", RuntimeWarning, stacklevel=2)
        zero = (logprobs * 0.0).sum()
        return LossValue(zero, zero, 0)
    picked = logprobs[mask].gather(-1, targets[mask].unsqueeze(-1)).squeeze(-1)
    total = -picked.sum()
    return LossValue(total, total / n, n)


def compute_gradients(model: MaskedLM, batch: MaskedBatch, loss_scale: float = 1.0,
                      reduction: str = "mean") -> dict[str, torch.Tensor]:
    """Gradient of ``loss_scale * loss`` for every named parameter.

    Parameters that the batch never reaches (e.g. experts no token routed to)
    get an explicit zero tensor.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    model.zero_grad(set_to_none=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        loss = mlm_loss(forward(model, batch), batch)
    value = loss.mean if reduction == "mean" else loss.total
    if not torch.isfinite(value):
        raise NumericError(f"loss is not finite: {float(value)}")
    (value * loss_scale).backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    model.zero_grad(set_to_none=True)
    return grads
