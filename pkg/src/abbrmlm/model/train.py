from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..corpus import SegmentedSentence
from ..errors import NumericError, TrainingDivergedError
from ..masking import MaskingConfig, build_batch
from ..pinyin import PinyinTable
from ..tokenizer import Vocabulary
from .modules import MaskedLM
from .objective import forward, mlm_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 32
    batch_size: int = 32
    lr: float = 1e-3
    warmup_epochs: float = 1.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    max_len: int = 128
    seed: int = 0
    masking: MaskingConfig = field(default_factory=MaskingConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.warmup_epochs < 0:
            raise ValueError("lr and warmup_epochs must be non-negative")


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    mean_loss: float   # mean -log P(gold) per masked position
    sum_loss: float    # summed over the epoch's masked positions
    n_masked: int
    lr: float


@dataclass
class TrainResult:
    model: MaskedLM
    history: list[EpochLoss]

    @property
    def final_loss(self) -> float:
        return self.history[-1].mean_loss


def warmup_factor(step: int, warmup_steps: int) -> float:
    """Linear ramp to 1 over ``warmup_steps`` optimiser steps, then constant."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, (step + 1) / warmup_steps)


def train(model: MaskedLM, corpus: Sequence[SegmentedSentence], table: PinyinTable,
          vocab: Vocabulary, config: TrainConfig = TrainConfig(),
          on_epoch: Callable[[EpochLoss], None] | None = None) -> TrainResult:
    """AdamW on the per-masked-position mean loss with linear warmup.

    Masks are re-drawn each epoch from a generator seeded by ``config.seed``.
    On a non-finite loss the model is restored to the end of the last finite
    epoch and :class:`TrainingDivergedError` is raised.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    if len(vocab) != model.config.vocab_size:
        raise ValueError(f"vocabulary size {len(vocab)} != model vocab_size {model.config.vocab_size}")
    masking = config.masking
    if masking.mask_style != model.config.mask_style:
        raise ValueError("masking style does not match the model's mask_style")
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(corpus) / config.batch_size)
    warmup_steps = round(config.warmup_epochs * steps_per_epoch)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, betas=config.betas,
                            eps=config.eps, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: warmup_factor(s, warmup_steps))
    history: list[EpochLoss] = []
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        lr_used = opt.param_groups[0]["lr"]
        for start in range(0, len(order), config.batch_size):
            sents = [corpus[i] for i in order[start:start + config.batch_size]]
            batch = build_batch(sents, masking, table, vocab, config.max_len, rng=rng)
            if batch.num_masked == 0:
                continue
            try:
                loss = mlm_loss(forward(model, batch), batch)
            except NumericError:
                loss = None
            if loss is None or not torch.isfinite(loss.mean):
                model.load_state_dict(last_good)
                raise TrainingDivergedError(epoch, last_good, history)
            opt.zero_grad(set_to_none=True)
            loss.mean.backward()
            if config.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            lr_used = opt.param_groups[0]["lr"]
            opt.step()
            sched.step()
            total += float(loss.total.detach())
            count += loss.n_masked
        if count == 0:
            warnings.warn(f"epoch {epoch} had no masked positions", RuntimeWarning, stacklevel=2)
        entry = EpochLoss(epoch, total / count if count else 0.0, total, count, lr_used)
        history.append(entry)
        last_good = copy.deepcopy(model.state_dict())
        if on_epoch is not None:
            on_epoch(entry)
        log.debug("epoch %d loss %.4f", epoch, entry.mean_loss)
    model.eval()
    return TrainResult(model, history)
