"""Training protocol: masked cross-entropy, AdamW, stepped or cosine LR
decay, early stopping on validation loss, per-epoch history, checkpointing.

The loss accepts a pluggable ``loss_fn(logits, inputs, labels, indices)``
so the distillation objective can reuse this loop unchanged; validation is
always plain masked cross-entropy against the hard labels, which keeps
model selection comparable across objectives.

All stochasticity (shuffling, dropout) is derived from the config seed, so
two fits with identical inputs produce identical histories and weights on
the same machine.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .adapt import TrainPlan
from .errors import ConfigError, TrainingDivergedError
from .metrics import IGNORE_INDEX, format_float
from .models import save_checkpoint
from .profiler import EfficiencyRecord, ResourceSampler
from .sardata import PatchSet

SCHEDULERS = ("step", "cosine")


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                         ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean cross-entropy over pixels whose label is not ``ignore_index``.

    ``logits``: (B, K, H, W) float; ``labels``: (B, H, W) integer. A batch
    with no valid pixels contributes a zero loss (with a warning) rather
    than NaN, so downstream averaging stays finite.
    """
    if logits.ndim != 4:
        raise ConfigError(f"logits must be (B, K, H, W), got shape {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ConfigError(
            f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}")
    labels = labels.long()
    mask = labels != ignore_index
    if not bool(mask.any()):
        warnings.warn("batch contains no labelled pixels; loss is 0",
                      RuntimeWarning, stacklevel=2)
        return logits.sum() * 0.0
    k = logits.shape[1]
    if bool((labels[mask] < 0).any()) or bool((labels[mask] >= k).any()):
        raise ConfigError(f"labels contain class ids outside [0, {k})")
    logp = F.log_softmax(logits, dim=1)
    safe = labels.masked_fill(~mask, 0)
    picked = logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    return -picked[mask].mean()


def _masked_ce_sums(logits: torch.Tensor, labels: torch.Tensor) -> tuple[float, int]:
    """(summed CE over valid pixels, valid pixel count) for pooled averaging."""
    labels = labels.long()
    mask = labels != IGNORE_INDEX
    n = int(mask.sum())
    if n == 0:
        return 0.0, 0
    logp = F.log_softmax(logits, dim=1)
    safe = labels.masked_fill(~mask, 0)
    picked = logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    return float(-picked[mask].sum()), n


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    scheduler: str = "step"  # "step": lr * gamma^(epoch // step_every); or "cosine"
    step_gamma: float = 0.9
    step_every: int = 10
    batch_size: int = 8
    max_epochs: int = 30
    early_stop_patience: int = 20
    min_delta: float = 1e-6  # an epoch improves only if val drops by more than this
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}; expected {SCHEDULERS}")
        if not 0 < self.step_gamma <= 1:
            raise ConfigError(f"step_gamma must lie in (0, 1], got {self.step_gamma}")
        if self.step_every < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("step_every, batch_size and max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if cfg.scheduler == "step":
        return cfg.lr * cfg.step_gamma ** (epoch // cfg.step_every)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.max_epochs))


class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without real improvement.

    Improvement means the validation loss is strictly lower than the best
    seen by more than ``min_delta``; equal-to-best epochs count as stalls.
    """

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.stalled = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.stalled = 0
            return True
        self.stalled += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stalled >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float
    stopped_epoch: int
    efficiency: EfficiencyRecord
    plan: TrainPlan | None = None
    checkpoint_path: Path | None = None
    flagged_batches: int = 0

    def save_history(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for s in self.history:
                writer.writerow([s.epoch, format_float(s.train_loss),
                                 format_float(s.val_loss), format_float(s.lr)])


def _as_tensors(data: PatchSet, in_channels: int) -> tuple[torch.Tensor, torch.Tensor]:
    if data.channels.shape[1] != in_channels:
        raise ConfigError(
            f"patch stack has {data.channels.shape[1]} channels but the model "
            f"expects {in_channels}")
    x = torch.from_numpy(np.ascontiguousarray(data.channels))
    y = torch.from_numpy(data.labels.astype(np.int64))
    return x, y


def fit(plan: TrainPlan, train_data: PatchSet, val_data: PatchSet,
        cfg: TrainConfig, profiler: ResourceSampler | None = None,
        out_dir: str | Path | None = None, loss_fn=None,
        checkpoint_meta: dict | None = None) -> TrainResult:
    """Train the plan's trainable parameters; restore and return the best
    (lowest validation loss) weights.

    ``loss_fn(logits, inputs, labels, indices) -> scalar`` overrides the
    training objective; ``indices`` are the patch positions of the batch
    within ``train_data``, so objectives may look up per-patch side
    information (e.g. cached teacher outputs). Validation always scores
    masked cross-entropy. If ``out_dir`` is given, the best checkpoint and
    per-epoch history CSV are written there.
    """
    cfg.validate()
    plan.validate()
    model = plan.model
    in_ch = model.spec.in_channels
    x_train, y_train = _as_tensors(train_data, in_ch)
    x_val, y_val = _as_tensors(val_data, in_ch)
    if len(train_data) == 0 or len(val_data) == 0:
        raise ConfigError("train and val patch sets must be non-empty")

    params = plan.trainable_parameters()
    if not params:
        raise ConfigError(f"strategy {plan.strategy!r} left nothing trainable")
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                            betas=(0.9, 0.999), eps=1e-8)
    objective = loss_fn if loss_fn is not None else (
        lambda logits, inputs, labels, indices: masked_cross_entropy(logits, labels))

    sampler = profiler if profiler is not None else ResourceSampler()
    sampler.start()
    stopper = EarlyStopper(cfg.early_stop_patience, cfg.min_delta)
    history: list[EpochStats] = []
    best_state: dict | None = None
    flagged = 0
    n = len(train_data)

    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            for epoch in range(cfg.max_epochs):
                lr = lr_at_epoch(cfg, epoch)
                for group in opt.param_groups:
                    group["lr"] = lr

                shuffle = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, epoch]))
                order = torch.from_numpy(shuffle.permutation(n))
                model.train()
                batch_losses = []
                for start in range(0, n, cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    xb, yb = x_train[idx], y_train[idx]
                    if not bool((yb != IGNORE_INDEX).any()):
                        flagged += 1
                    logits = model(xb)
                    loss = objective(logits, xb, yb, idx)
                    if not torch.isfinite(loss):
                        raise TrainingDivergedError(
                            f"non-finite loss at epoch {epoch}, "
                            f"batch {start // cfg.batch_size} (lr {lr:g}); "
                            f"last finite train losses: {batch_losses[-3:]}")
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
                    batch_losses.append(loss.item())
                train_loss = sum(batch_losses) / len(batch_losses)

                model.eval()
                ce_sum, ce_count = 0.0, 0
                with torch.no_grad():
                    for start in range(0, len(val_data), cfg.batch_size):
                        logits = model(x_val[start:start + cfg.batch_size])
                        s, c = _masked_ce_sums(logits, y_val[start:start + cfg.batch_size])
                        ce_sum += s
                        ce_count += c
                val_loss = ce_sum / ce_count if ce_count else 0.0

                if stopper.update(epoch, val_loss):
                    best_state = {k: v.detach().clone()
                                  for k, v in model.state_dict().items()}
                history.append(EpochStats(epoch, train_loss, val_loss, lr))
                if stopper.should_stop:
                    break
    finally:
        sampler.stop()

    stopped_epoch = history[-1].epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    record = sampler.record("train", epochs=len(history))

    checkpoint_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"strategy": plan.strategy, "strategy_config": plan.strategy_config,
                "train_config": cfg.to_dict(), "best_epoch": stopper.best_epoch,
                "best_val_loss": stopper.best, **(checkpoint_meta or {})}
        checkpoint_path = out / "model.pt"
        save_checkpoint(model, meta, checkpoint_path)

    result = TrainResult(
        history=history,
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best,
        stopped_epoch=stopped_epoch,
        efficiency=record,
        plan=plan,
        checkpoint_path=checkpoint_path,
        flagged_batches=flagged,
    )
    if out_dir is not None:
        result.save_history(Path(out_dir) / "history.csv")
    return result
