"""Single-device training loop with L1 waveform loss and uSDR model selection."""
from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .data import ChunkSampler, PatternSampler, TrackSet, iter_batches
from .metrics import usdr
from .model import DTTNet, separate, waveform_forward

log = logging.getLogger(__name__)

__all__ = [
    "NumericalError",
    "TrainConfig",
    "TrainState",
    "make_optimizer",
    "train_step",
    "validate",
    "fit",
    "steps_per_epoch",
    "format_epoch_line",
]


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    grad_clip: float = 5.0
    epoch_size: int = 3240
    max_epochs: int = 4082
    batch_size: int = 8
    chunk_seconds: float = 6.0
    seed: int = 0
    mode: str = "base"
    augment: bool = True
    workers: int = 0
    valid_overlap: float = 0.5

    def __post_init__(self):
        if self.mode not in ("base", "vc", "nvc"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.learning_rate <= 0 or self.epoch_size < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("learning_rate, epoch_size, batch_size must be positive; max_epochs >= 0")

    @classmethod
    def finetune(cls, mode: str = "vc", **kw) -> "TrainConfig":
        """Fine-tuning schedule: 324-chunk epochs for 300 epochs."""
        kw.setdefault("epoch_size", 324)
        kw.setdefault("max_epochs", 300)
        return cls(mode=mode, **kw)


@dataclass
class TrainState:
    epoch: int = 0
    best_usdr: float = -math.inf
    best_epoch: int = -1
    best_path: str | None = None
    loss_history: list[float] = field(default_factory=list)
    usdr_history: list[float] = field(default_factory=list)

    def record(self, epoch: int, loss: float, valid_usdr: float) -> bool:
        """Log an epoch; returns True when it sets a new best uSDR."""
        self.epoch = epoch
        self.loss_history.append(loss)
        self.usdr_history.append(valid_usdr)
        if valid_usdr > self.best_usdr:
            self.best_usdr = valid_usdr
            self.best_epoch = epoch
            return True
        return False


def steps_per_epoch(cfg: TrainConfig) -> int:
    return -(-cfg.epoch_size // cfg.batch_size)


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )


def l1_loss(model: nn.Module, mix: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (waveform_forward(model, mix) - target).abs().mean()


def train_step(model, optimizer, mix, target, grad_clip: float | None = 5.0, batch_id=None) -> float:
    """One AdamW update on the waveform L1 loss; returns the pre-update loss."""
    dtype = next(model.parameters()).dtype
    mix = torch.as_tensor(mix, dtype=dtype)
    target = torch.as_tensor(target, dtype=dtype)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = l1_loss(model, mix, target)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()} on batch {batch_id}")
    loss.backward()
    norms = {n: p.grad.norm().item() for n, p in model.named_parameters() if p.grad is not None}
    if not all(math.isfinite(v) for v in norms.values()):
        bad = sorted(n for n, v in norms.items() if not math.isfinite(v))
        raise NumericalError(f"non-finite gradients on batch {batch_id}: {bad[:10]}")
    if grad_clip:
        nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return loss.item()


def validate(model: nn.Module, tracks: TrackSet, target: str = "vocals", overlap: float = 0.5) -> float:
    """Full-track chunked separation, scored by uSDR.

    Runs on a frozen copy, so the caller's parameters are never touched.
    """
    if len(tracks) == 0:
        raise ValueError("empty validation set")
    snapshot = copy.deepcopy(model).eval()
    pairs = [(t.stems[target].samples, separate(t.mixture, snapshot, overlap).samples) for t in tracks]
    return usdr(pairs)


def format_epoch_line(epoch: int, loss: float, valid_usdr: float, best: bool) -> str:
    return f"epoch={epoch} loss={loss:.6f} valid_usdr={valid_usdr:.4f} best={int(best)}"


def _save_snapshot(path: Path, model, optimizer, state: TrainState):
    tmp = path.with_name(path.name + ".tmp")
    torch.save({"model": model.state_dict(), "optimizer": optimizer.state_dict(), "state": asdict(state)}, tmp)
    os.replace(tmp, path)


def fit(
    cfg: TrainConfig,
    model: DTTNet,
    train: TrackSet,
    valid: TrackSet,
    out_dir: str | Path,
    patterns: PatternSampler | None = None,
    resume: str | Path | None = None,
    on_epoch=None,
) -> checkpoint.Checkpoint:
    """Train for ``cfg.max_epochs`` epochs and return the best-uSDR checkpoint.

    ``out_dir`` receives ``best.ckpt`` (the selected model) and
    ``last.snapshot`` (model + optimizer + state, for ``resume``).
    In ``vc`` / ``nvc`` modes a pattern sampler must be supplied.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.mode != "base" and patterns is None:
        raise ValueError(f"mode {cfg.mode!r} needs a pattern sampler")
    if patterns is not None and patterns.mode != cfg.mode:
        raise ValueError(f"pattern sampler mode {patterns.mode!r} != train mode {cfg.mode!r}")
    target = model.cfg.source
    optimizer = make_optimizer(model, cfg)
    state = TrainState()
    if resume is not None:
        snap = torch.load(resume, weights_only=False)
        model.load_state_dict(snap["model"])
        optimizer.load_state_dict(snap["optimizer"])
        state = TrainState(**snap["state"])
        log.info("resumed after epoch %d", state.epoch)
    best_path = out_dir / "best.ckpt"
    if cfg.max_epochs == 0 or state.epoch >= cfg.max_epochs:
        if state.best_path is None:
            checkpoint.save(model, best_path, {"epoch": state.epoch, "best_usdr": None})
            state.best_path = str(best_path)
        return checkpoint.load(state.best_path)

    sampler = ChunkSampler(
        train, target, cfg.chunk_seconds, cfg.seed, cfg.augment,
        patterns if cfg.mode != "base" else None,
    )
    for epoch in range(state.epoch + 1, cfg.max_epochs + 1):
        losses = []
        for b, (mix, tgt) in enumerate(iter_batches(sampler, epoch, cfg.epoch_size, cfg.batch_size, cfg.workers)):
            losses.append(train_step(model, optimizer, mix, tgt, cfg.grad_clip, batch_id=(epoch, b)))
        mean_loss = float(np.mean(losses))
        score = validate(model, valid, target, cfg.valid_overlap)
        improved = state.record(epoch, mean_loss, score)
        if improved:
            checkpoint.save(model, best_path, {"epoch": epoch, "best_usdr": score, "mode": cfg.mode})
            state.best_path = str(best_path)
        line = format_epoch_line(epoch, mean_loss, score, improved)
        log.info(line)
        if on_epoch is not None:
            on_epoch(line)
        _save_snapshot(out_dir / "last.snapshot", model, optimizer, state)
    return checkpoint.load(state.best_path)
