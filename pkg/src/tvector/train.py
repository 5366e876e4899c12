"""Multi-label BCE objective, Adam, and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import WeakUtterance, batch_iterator
from .model import save_checkpoint, snap_to_float32
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


def bce_loss(pred: Tensor, target, clamp: float = 1e-7) -> Tensor:
    """Binary cross entropy summed over labels and over the batch."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise tn.DimensionError(f"bce_loss: prediction {pred.shape} vs target {target.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("bce_loss targets must be 0 or 1")
    p = tn.clip(pred, clamp, 1.0 - clamp)
    ll = tn.mul(target, tn.log(p)) + tn.mul(1.0 - target, tn.log(1.0 - p))
    return tn.scale(tn.sum_all(ll), -1.0)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, names: Sequence[str] | None = None) -> None:
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"optimizer tracks {len(state.m)} parameters, got {len(params)}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for i, p in enumerate(params):
        g = p.grad
        if not np.all(np.isfinite(g)):
            who = names[i] if names else p.name or f"#{i}"
            raise FloatingPointError(f"non-finite gradient for parameter {who}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    lr: float = 1e-4
    lr_multiplier: float = 1.0
    eval_every: int = 0
    checkpoint_path: str | None = None
    clamp: float = 1e-7
    record_time: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 < self.clamp < 0.5:
            raise ValueError("clamp must lie in (0, 0.5)")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    steps: int

    def to_csv(self) -> str:
        rows = ["epoch,mean_loss,wall_seconds"]
        rows += [f"{r.epoch},{r.mean_loss!r},{r.wall_seconds:.3f}" for r in self.history]
        return "\n".join(rows) + "\n"


def train_loop(model, utterances: Sequence[WeakUtterance], config: TrainConfig,
               on_epoch=None) -> TrainResult:
    """Minimise summed BCE with Adam; one optimizer step per batch.

    Utterances of one batch must share a length so they can be stacked.
    Checkpoints are written every ``eval_every`` epochs and at the end when a
    path is configured; parameters are rounded to float32 first so the file
    holds exactly the in-memory model.
    """
    if len(utterances) == 0:
        raise ValueError("empty training set")
    names, params = zip(*model.named_parameters())
    state = AdamState(lr=config.lr * config.lr_multiplier)
    history = []
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for feats, labels in batch_iterator(utterances, config.batch_size,
                                            shuffle_seed=config.seed * 100003 + epoch):
            tn.zero_grad(params)
            with Tape():
                scores = model.forward(feats)
                loss = bce_loss(tn.reshape(scores, labels.shape), labels, config.clamp)
                tn.backward(loss)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            adam_step(params, state, names)
            total += float(loss.data)
            count += len(labels)
        tn.zero_grad(params)
        wall = time.perf_counter() - start if config.record_time else 0.0
        history.append(EpochRecord(epoch, total / count, wall))
        log.info("epoch %d mean loss %.5f", epoch, total / count)
        if config.checkpoint_path and config.eval_every and epoch % config.eval_every == 0:
            _checkpoint(model, config.checkpoint_path)
        if on_epoch is not None:
            on_epoch(history[-1])
    if config.checkpoint_path:
        _checkpoint(model, config.checkpoint_path)
    return TrainResult(history, state.t)


def _checkpoint(model, path) -> None:
    snap_to_float32(model)
    try:
        save_checkpoint(path, model)
    except OSError as exc:
        raise RuntimeError(f"checkpoint write failed for {Path(path)}: {exc}") from exc
