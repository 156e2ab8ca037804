"""Training loop, evaluation, checkpoints and learning-rate sweeps."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, from_dict, to_dict
from .data import BitemporalPair, stack_pairs
from .decoder import ChangeDetector
from .errors import ConfigError, DivergenceError, PreconditionError
from .metrics import ConfusionCounts, bce_loss, confusion_counts, metrics_from_counts, metrics_report

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOG_HEADER = ("epoch", "loss", "val_f1", "val_iou", "val_precision", "val_recall", "lr")


def cosine_lr(t: int, T: int, lr0: float, lr_min: float) -> float:
    if T < 1 or not 0 <= t <= T:
        raise PreconditionError(f"cosine schedule needs 0 <= t <= T, got t={t}, T={T}")
    return lr_min + (lr0 - lr_min) * (1 + math.cos(math.pi * t / T)) / 2


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    # no decay on biases and normalization scales (all 1-d parameters)
    decay = [p for p in model.parameters() if p.requires_grad and p.ndim > 1]
    no_decay = [p for p in model.parameters() if p.requires_grad and p.ndim <= 1]
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr0, betas=tuple(cfg.betas))


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    parameters: dict
    optimizer_state: Optional[dict] = None
    epoch: int = 0
    best_val_f1: float = 0.0
    train_config: Optional[TrainConfig] = None
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def build_model(self) -> ChangeDetector:
        model = ChangeDetector(self.model_config)
        model.load_state_dict(self.parameters)
        model.eval()
        return model

    def save(self, path) -> None:
        payload = {
            "format_version": self.format_version,
            "model_config": to_dict(self.model_config),
            "train_config": to_dict(self.train_config) if self.train_config else None,
            "parameters": self.parameters,
            "optimizer_state": self.optimizer_state,
            "epoch": self.epoch,
            "best_val_f1": self.best_val_f1,
        }
        torch.save(payload, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        version = payload.get("format_version") if isinstance(payload, dict) else None
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint format_version {version!r}")
        tc = payload.get("train_config")
        return cls(
            model_config=from_dict(ModelConfig, payload["model_config"]),
            parameters=payload["parameters"],
            optimizer_state=payload["optimizer_state"],
            epoch=payload["epoch"],
            best_val_f1=payload["best_val_f1"],
            train_config=from_dict(TrainConfig, tc) if tc else None,
        )


# ---------------------------------------------------------------------------
# evaluation


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


@torch.no_grad()
def predict_probs(model: ChangeDetector, pairs: Sequence[BitemporalPair], batch_size: int = 8) -> np.ndarray:
    model.eval()
    a, b, _ = stack_pairs(pairs)
    dtype = next(model.parameters()).dtype
    out = []
    for sl in _batches(len(pairs), batch_size):
        xa = torch.from_numpy(a[sl]).to(dtype)
        xb = torch.from_numpy(b[sl]).to(dtype)
        out.append(torch.sigmoid(model(xa, xb)).numpy())
    return np.concatenate(out)


def evaluate_model(model: ChangeDetector, pairs: Sequence[BitemporalPair], batch_size: int = 8,
                   threshold: Optional[float] = None) -> dict:
    """Micro-averaged metrics report over all pixels of ``pairs``."""
    if not pairs:
        raise PreconditionError("cannot evaluate on an empty dataset")
    if any(p.label is None for p in pairs):
        raise PreconditionError("evaluation needs labelled pairs")
    thr = model.cfg.threshold if threshold is None else threshold
    probs = predict_probs(model, pairs, batch_size)
    counts = ConfusionCounts()
    for p, prob in zip(pairs, probs):
        counts = counts + confusion_counts((prob > thr).astype(np.uint8), p.label)
    return metrics_report(counts)


def evaluate(checkpoint: Checkpoint, pairs: Sequence[BitemporalPair], batch_size: int = 8) -> dict:
    return evaluate_model(checkpoint.build_model(), pairs, batch_size)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)
    model: Optional[ChangeDetector] = None  # final-epoch weights
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.log[-1]["loss"]

    @property
    def initial_loss(self) -> float:
        return self.log[0]["loss"]


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_HEADER})


def train_step(model, optimizer, xa, xb, y, eps: float) -> float:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = bce_loss(torch.sigmoid(model(xa, xb)), y, eps)
    if torch.isfinite(loss):
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_pairs: Sequence[BitemporalPair],
    val_pairs: Optional[Sequence[BitemporalPair]] = None,
    log_path=None,
    checkpoint_path=None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Fit a fresh model; the returned checkpoint holds the best-validation weights.

    Raises :class:`DivergenceError` on a non-finite epoch loss, or when the
    loss stays above ``divergence_factor`` x the first-epoch loss for
    ``divergence_patience`` consecutive epochs.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not train_pairs:
        raise PreconditionError("training set is empty")
    if any(p.label is None for p in train_pairs):
        raise PreconditionError("training pairs need labels")

    start = time.perf_counter()
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = ChangeDetector(model_cfg).to(dtype)
    optimizer = build_optimizer(model, train_cfg)

    a, b, y = (torch.from_numpy(t).to(dtype) for t in stack_pairs(train_pairs))
    n = len(train_pairs)
    metric_key = train_cfg.best_metric

    rows = []
    best = None
    best_score = -1.0
    initial_loss = None
    over = 0
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr0, train_cfg.lr_floor)
        set_lr(optimizer, lr)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for sl in _batches(n, train_cfg.batch_size):
            idx = torch.from_numpy(order[sl])
            xa, xb, yy = a[idx], b[idx], y[idx]
            if train_cfg.flip_augment:
                if rng.random() < 0.5:
                    xa, xb, yy = xa.flip(-1), xb.flip(-1), yy.flip(-1)
                if rng.random() < 0.5:
                    xa, xb, yy = xa.flip(-2), xb.flip(-2), yy.flip(-2)
            loss = train_step(model, optimizer, xa, xb, yy, train_cfg.eps_bce)
            total += loss * len(idx)
            count += len(idx)
            if not math.isfinite(loss):
                break
        epoch_loss = total / count
        if not math.isfinite(epoch_loss):
            raise DivergenceError(epoch + 1, lr, epoch_loss)
        if initial_loss is None:
            initial_loss = epoch_loss
        over = over + 1 if epoch_loss > train_cfg.divergence_factor * initial_loss else 0
        if over >= train_cfg.divergence_patience:
            raise DivergenceError(
                epoch + 1, lr, epoch_loss,
                f"loss above {train_cfg.divergence_factor:g}x initial for {over} epochs",
            )

        if val_pairs:
            report = evaluate_model(model, val_pairs, train_cfg.batch_size)
        else:
            report = {"f1": float("nan"), "iou": float("nan"), "precision": float("nan"), "recall": float("nan")}
        row = {
            "epoch": epoch + 1,
            "loss": epoch_loss,
            "val_f1": report["f1"],
            "val_iou": report["iou"],
            "val_precision": report["precision"],
            "val_recall": report["recall"],
            "lr": lr,
        }
        rows.append(row)
        score = report[metric_key] if val_pairs else float(epoch)
        if best is None or score > best_score:
            best_score = score
            best = Checkpoint(
                model_config=model_cfg,
                parameters=copy.deepcopy(model.state_dict()),
                optimizer_state=copy.deepcopy(optimizer.state_dict()),
                epoch=epoch + 1,
                best_val_f1=report["f1"] if val_pairs else float("nan"),
                train_config=train_cfg,
            )
            if checkpoint_path is not None:
                best.save(checkpoint_path)
        log.debug("epoch %d loss %.5f val_f1 %.4f lr %.2e", epoch + 1, epoch_loss, row["val_f1"], lr)
        if log_path is not None:
            write_log_csv(rows, log_path)

    model.eval()
    return TrainResult(best, rows, model, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# learning-rate sweep


def lr_sweep(
    lrs: Sequence[float],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_pairs: Sequence[BitemporalPair],
    val_pairs: Sequence[BitemporalPair],
    eval_pairs: Optional[Sequence[BitemporalPair]] = None,
) -> list[dict]:
    """One independent training run per learning rate, same seed for all.

    Each row carries the final metrics of the best checkpoint on
    ``eval_pairs`` (default: ``val_pairs``). Divergent runs are flagged with
    zeroed metrics rather than aborting the sweep.
    """
    if any(lr <= 0 for lr in lrs):
        raise ConfigError("all sweep learning rates must be positive")
    eval_pairs = val_pairs if eval_pairs is None else eval_pairs
    rows = []
    for lr in lrs:
        cfg = copy.deepcopy(train_cfg)
        cfg.lr0 = float(lr)
        cfg.lr_min = None
        row = {"lr": float(lr), "divergent": False, "error": "", "f1": 0.0, "iou": 0.0, "precision": 0.0, "recall": 0.0}
        try:
            result = train(model_cfg, cfg, train_pairs, val_pairs)
            report = evaluate(result.checkpoint, eval_pairs)
            row.update({k: report[k] for k in ("f1", "iou", "precision", "recall")})
            row["final_loss"] = result.final_loss
        except DivergenceError as exc:
            row.update(divergent=True, error=str(exc))
        rows.append(row)
    return rows


def format_table(rows: Sequence[dict], key: str = "lr") -> str:
    lines = [f"{key:>12} {'F1':>7} {'IoU':>7} {'Prec':>7} {'Recall':>7}  note"]
    for r in rows:
        label = f"{r[key]:.0e}" if isinstance(r[key], float) else str(r[key])
        note = "DIVERGED" if r.get("divergent") else ""
        lines.append(
            f"{label:>12} {100 * r['f1']:7.2f} {100 * r['iou']:7.2f} {100 * r['precision']:7.2f} "
            f"{100 * r['recall']:7.2f}  {note}"
        )
    return "\n".join(lines)


