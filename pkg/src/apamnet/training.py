"""Training loop: BCE over logits, Adam with stepped learning rate decay.

The learning rate starts at `lr0` and is multiplied by `lr_decay_factor`
every `lr_decay_every` epochs. Weight decay defaults to Adam's coupled L2
form; a flag switches to decoupled AdamW. Validation runs after every epoch
and the checkpoint with the best mean AUC wins.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .evaluation import mean_auc
from .model import ApamClassifier, save_checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 15
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 4
    decoupled_weight_decay: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs it)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch index."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def bce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Multi-label binary cross entropy on raw logits.

    Uses the log-sum-exp form, so large-magnitude logits cannot overflow.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def build_optimizer(model: ApamClassifier, config: TrainConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if config.decoupled_weight_decay else torch.optim.Adam
    return cls(
        model.parameters(),
        lr=config.lr0,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=config.weight_decay,
    )


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_mean_auc: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int
    best_val_auc: float
    best_checkpoint: Path | None
    last_checkpoint: Path | None


def _iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled batch index arrays; a trailing batch of size 1 is dropped
    because batch norm cannot normalize it in training mode."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        batch = order[start : start + batch_size]
        if len(batch) == 1:
            continue
        yield batch


def train_model(
    model: ApamClassifier,
    bank,
    config: TrainConfig,
    out_dir=None,
    log_fn=print,
) -> TrainResult:
    """Train on the bank's train split, validating each epoch on val.

    `bank` is an experiment.SampleBank (or anything matching its batch
    interface). When `out_dir` is given, `best.ckpt`, `last.ckpt`, and a
    `train_log.csv` are written there.
    """
    train_records = bank.split_records("train")
    val_records = bank.split_records("val")
    if not train_records:
        raise ValueError("training split is empty")
    if config.batch_size > len(train_records):
        raise ValueError(
            f"batch_size {config.batch_size} exceeds the training split "
            f"({len(train_records)} images)"
        )

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = build_optimizer(model, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    best_path = out_dir / "best.ckpt" if out_dir else None
    last_path = out_dir / "last.ckpt" if out_dir else None

    history = []
    best_auc = -np.inf
    best_epoch = -1
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        set_lr(optimizer, lr)
        model.train()
        losses = []
        for idx in _iter_batches(len(train_records), config.batch_size, rng):
            batch = bank.batch([train_records[i] for i in idx], train=True, rng=rng)
            optimizer.zero_grad()
            out = model(*batch.model_args())
            loss = bce_loss(out.logits, batch.labels_tensor())
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch} "
                    f"(lr={lr:g}, batch of {len(idx)})"
                )
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        train_loss = float(np.mean(losses))

        val_auc = evaluate_mean_auc(model, bank, val_records, config.batch_size)
        history.append(EpochStats(epoch=epoch, lr=lr, train_loss=train_loss, val_mean_auc=val_auc))
        log_fn(
            f"epoch {epoch:3d}  lr {lr:.2e}  train_loss {train_loss:.4f}  "
            f"val_mean_auc {val_auc:.4f}"
        )
        if np.isfinite(val_auc) and val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            if best_path:
                save_checkpoint(model, best_path, extra={"epoch": epoch, "val_mean_auc": val_auc})

    if last_path:
        save_checkpoint(
            model,
            last_path,
            extra={"epoch": config.epochs - 1, "val_mean_auc": history[-1].val_mean_auc},
        )
    if best_epoch < 0:
        # no epoch produced a finite validation AUC; keep the final weights
        best_epoch = config.epochs - 1
        best_auc = history[-1].val_mean_auc
        if best_path:
            save_checkpoint(model, best_path, extra={"epoch": best_epoch, "val_mean_auc": best_auc})

    if out_dir:
        with open(out_dir / "train_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "train_loss", "val_mean_auc"])
            for s in history:
                writer.writerow([s.epoch, f"{s.lr:.10g}", f"{s.train_loss:.6f}", f"{s.val_mean_auc:.6f}"])

    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_auc=float(best_auc),
        best_checkpoint=best_path,
        last_checkpoint=last_path,
    )


@torch.no_grad()
def predict_scores(model: ApamClassifier, bank, records, batch_size: int = 16):
    """Sigmoid scores and labels for a record list, center-cropped."""
    model.eval()
    scores = []
    labels = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch = bank.batch(chunk, train=False)
        out = model(*batch.model_args())
        scores.append(torch.sigmoid(out.logits).cpu().numpy())
        labels.append(batch.labels)
    return np.concatenate(scores), np.concatenate(labels)


def evaluate_mean_auc(model: ApamClassifier, bank, records, batch_size: int = 16) -> float:
    if not records:
        return float("nan")
    scores, labels = predict_scores(model, bank, records, batch_size)
    mean, _ = mean_auc(labels, scores, on_single_class="nan")
    return mean
