"""
QuantumLeak Lab - Training Module

This module trains QNN models with mini-batch Adam over parameter-shift gradients
and evaluates their accuracy. It is used for the victim model and for every
substitute model the attacks build.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from optimization import AdamState, LossKind, adam_step, loss_and_grad
from qnn_model import Noise, QnnModel, forward_batch, predict_batch

HISTORY_COLUMNS = ["epoch", "train_loss", "val_accuracy"]


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    loss: LossKind = field(default_factory=LossKind)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    init_sigma: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError(f"Invalid optimizer settings lr={self.lr}, weight_decay={self.weight_decay}")

    def config_hash(self) -> str:
        """Short stable hash of every field, stored with checkpoints."""
        payload = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def evaluate_accuracy(model: QnnModel, features: np.ndarray, labels: np.ndarray,
                      noise: Noise = None) -> float:
    """Fraction of samples whose predicted label matches the given labels."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("Cannot evaluate accuracy on an empty set")
    preds = predict_batch(forward_batch(model, features, noise))
    return float(np.mean(preds == labels))


def train(model: QnnModel, features: np.ndarray, targets, cfg: TrainConfig,
          val: Optional[Tuple[np.ndarray, np.ndarray]] = None, noise: Noise = None,
          verbose: bool = False) -> Tuple[QnnModel, pd.DataFrame]:
    """
    Train a model with shuffled mini-batches.

    Args:
        model: Initial model
        features: Array of shape (N, F)
        targets: Integer labels (N,) or raw oracle vectors (N, K)
        cfg: Training configuration; cfg.seed drives the batch order
        val: Optional (features, labels) evaluated after every epoch
        noise: Optional (profile, t) for training against a noisy forward pass
        verbose: Print one line per epoch

    Returns:
        Tuple of (trained model, history DataFrame with HISTORY_COLUMNS)

    Raises:
        TrainingDivergedError: when a batch loss or gradient is non-finite
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.asarray(targets)
    n = features.shape[0]
    if n == 0:
        raise ValueError("Cannot train on an empty dataset")
    if len(targets) != n:
        raise ValueError(f"Got {n} samples but {len(targets)} targets")

    rng = np.random.default_rng(cfg.seed)
    theta = np.array(model.theta, dtype=float)
    state = AdamState.zeros(len(theta), cfg.lr, cfg.weight_decay)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                value, grad = loss_and_grad(model.with_theta(theta), features[idx], targets[idx], cfg.loss, noise)
                theta, state = adam_step(theta, grad, state)
            except ValueError as e:
                raise TrainingDivergedError(f"Training diverged at epoch {epoch}, step {state.step + 1}: {e}") from e
            losses.append(value * len(idx))
        train_loss = float(np.sum(losses) / n)
        val_acc = np.nan
        if val is not None:
            val_acc = evaluate_accuracy(model.with_theta(theta), val[0], val[1], noise)
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_accuracy": val_acc})
        if verbose:
            msg = f"  epoch {epoch}/{cfg.epochs}: loss {train_loss:.5f}"
            if val is not None:
                msg += f", val acc {val_acc:.4f}"
            print(msg)

    return model.with_theta(theta), pd.DataFrame(rows, columns=HISTORY_COLUMNS)
