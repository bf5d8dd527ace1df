"""Minibatch training loop shared by every pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .datasets import TaskData, batches
from .models import ParamStore, evaluate, loss_and_grad
from .optim import (AdamState, DivergenceError, RegularizerSpec, SamConfig, SwaState,
                    adam_step, regularizer_term, sam_step, swa_schedule, swa_update)
from .seeding import derive_seed
from .tensor import NonFiniteError

OPTIMIZERS = ("adam", "sam", "swa")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 2e-3
    rho: float = 0.05
    weight_decay: float = 0.0
    # SWA runs Adam with a raised initial rate and averages late checkpoints
    swa_lr: float = 8e-3
    swa_window: float = 0.5
    epochs: int = 20
    batch_size: int = 32
    eval_every: int = 1
    lr_schedule: str = "linear"
    loss_kind: str = "cross-entropy"
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.lr_schedule not in ("linear", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class EvalPoint:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float


@dataclass
class TrainResult:
    best: ParamStore
    best_val: float
    best_epoch: int
    final: ParamStore
    history: list[EvalPoint]


def _eval_epochs(cfg: TrainConfig) -> list[int]:
    pts = list(range(cfg.eval_every, cfg.epochs + 1, cfg.eval_every))
    if cfg.epochs and (not pts or pts[-1] != cfg.epochs):
        pts.append(cfg.epochs)
    return pts


def train(params: ParamStore, data: TaskData, cfg: TrainConfig, seed: int,
          keep: np.ndarray | None = None,
          on_eval: Callable[[int, ParamStore], None] | None = None) -> TrainResult:
    """Train a copy of ``params``; keep the checkpoint with the best validation metric.

    Metric ties are broken by the lower validation loss.

    For SWA the returned ``best`` is the running average of the checkpoints
    from the last ``swa_window`` fraction of evaluation points.
    """
    work = params.copy()
    if keep is not None:
        work.flat[keep == 0] = 0.0
    val = data.val.batch()
    if cfg.epochs == 0:
        vloss, vmetric = evaluate(work, val, cfg.loss_kind)
        return TrainResult(work.copy(), vmetric, 0, work, [EvalPoint(0, math.nan, vloss, vmetric)])

    base_lr = cfg.swa_lr if cfg.optimizer == "swa" else cfg.lr
    state = AdamState.for_params(work, lr=base_lr, weight_decay=cfg.weight_decay)
    sam = SamConfig(cfg.rho) if cfg.optimizer == "sam" else None
    extra = regularizer_term(work, cfg.regularizer)

    def loss_fn(p, batch):
        loss, g, _ = loss_and_grad(p, batch, cfg.loss_kind, extra_loss=extra)
        return loss, g

    eval_pts = _eval_epochs(cfg)
    swa_pts = set()
    swa = None
    if cfg.optimizer == "swa":
        swa = SwaState.for_params(work, cfg.swa_window)
        swa_pts = set(swa_schedule(cfg.epochs, eval_pts)) if cfg.epochs >= 2 and len(eval_pts) >= 2 \
            else {float(cfg.epochs)}

    n_batches = math.ceil(len(data.train) / cfg.batch_size)
    total_steps = n_batches * cfg.epochs
    shuffle_seed = derive_seed(seed, "shuffle")
    step = 0
    history: list[EvalPoint] = []
    best, best_val, best_loss, best_epoch = None, -math.inf, math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in batches(data.train, cfg.batch_size, shuffle_seed, epoch):
            lr = base_lr * (1.0 - step / total_steps) if cfg.lr_schedule == "linear" else base_lr
            try:
                if sam is not None:
                    info = sam_step(work, batch, loss_fn, sam, state, keep=keep, lr=lr)
                    loss = info.loss
                else:
                    loss, g = loss_fn(work, batch)
                    adam_step(work, g, state, keep=keep, lr=lr)
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, step {step}: {exc}") from exc
            if not math.isfinite(loss):
                raise DivergenceError(f"training diverged at epoch {epoch}, step {step}")
            losses.append(loss)
            step += 1
        if epoch not in eval_pts:
            continue
        if swa is not None and float(epoch) in swa_pts:
            swa_update(swa, work)
        vloss, vmetric = evaluate(work, val, cfg.loss_kind)
        history.append(EvalPoint(epoch, float(np.mean(losses)), vloss, vmetric))
        if on_eval is not None:
            on_eval(epoch, work)
        # ties on the metric (common once accuracy saturates) go to the lower loss
        if swa is None and (vmetric > best_val or (vmetric == best_val and vloss < best_loss)):
            best, best_val, best_loss, best_epoch = work.copy(), vmetric, vloss, epoch

    if swa is not None:
        best = work.with_flat(swa.mean)
        _, best_val = evaluate(best, val, cfg.loss_kind)
        best_epoch = cfg.epochs
        if on_eval is not None:
            on_eval(cfg.epochs, best)
    return TrainResult(best, best_val, best_epoch, work, history)
