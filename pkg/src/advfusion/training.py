"""Training loops for the surrogate classifiers and the autoencoder.

Loops are deliberately plain: Adam, shuffled minibatches from a seeded
generator, per-epoch history. Images stay uint8 in memory and are scaled per
batch, which keeps the desk-scale corpus cheap to hold.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import TrainingFailure
from .physical import ViewDistribution, simulate_view
from .seeding import derive_seed, numpy_generator


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices)
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _to_float(images_u8: torch.Tensor, idx: np.ndarray) -> torch.Tensor:
    return images_u8[torch.from_numpy(idx)].to(torch.float32) / 255.0


def train_classifier(
    model: nn.Module,
    images_u8: torch.Tensor,
    labels: torch.Tensor,
    train_idx: list[int],
    val_idx: list[int],
    settings: TrainSettings,
    augment_views: ViewDistribution | None = None,
) -> dict:
    """Train in place; returns {"train_loss": [...], "val_accuracy": float}.

    With ``augment_views``, half the batches (seeded coin flip) are warped by a
    condition sampled from the distribution before the forward pass. Models
    that never see an oblique or distant view during training are blind to
    them, which makes any view-robustness measurement meaningless; validation
    accuracy is still computed on unwarped images.
    """
    rng = numpy_generator(settings.seed)
    train_idx = np.asarray(train_idx)
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.lr)
    history: list[float] = []
    model.train()
    step = 0
    for _ in range(settings.epochs):
        losses = []
        for batch in _batches(train_idx, settings.batch_size, rng):
            xb = _to_float(images_u8, batch)
            yb = labels[torch.from_numpy(batch)]
            if augment_views is not None and step % 2 == 1:
                cond = augment_views.sample(derive_seed(settings.seed, "aug", step))
                with torch.no_grad():
                    xb = simulate_view(xb, cond)
            step += 1
            optimizer.zero_grad()
            loss = F.cross_entropy(model(xb), yb)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
    model.eval()
    return {"train_loss": history, "val_accuracy": evaluate_accuracy(model, images_u8, labels, val_idx)}


def evaluate_accuracy(
    model: nn.Module, images_u8: torch.Tensor, labels: torch.Tensor, idx: list[int]
) -> float:
    model.eval()
    idx = np.asarray(idx)
    correct = 0
    with torch.no_grad():
        for start in range(0, len(idx), 256):
            batch = idx[start : start + 256]
            xb = _to_float(images_u8, batch)
            pred = model(xb).argmax(dim=-1)
            correct += int((pred == labels[torch.from_numpy(batch)]).sum())
    return correct / max(len(idx), 1)


def train_autoencoder(
    model: nn.Module,
    images_u8: torch.Tensor,
    train_idx: list[int],
    val_idx: list[int],
    settings: TrainSettings,
    mae_budget: float = 0.05,
) -> dict:
    """Train to reconstruct; fails loudly if validation MAE misses the budget.

    Returns {"train_loss": [...], "val_mae": float}. Raises TrainingFailure
    (carrying the achieved MAE) when the budget is not met, because every
    downstream stage assumes the latent space reproduces its inputs.
    """
    rng = numpy_generator(settings.seed)
    train_idx = np.asarray(train_idx)
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.lr)
    history: list[float] = []
    model.train()
    for _ in range(settings.epochs):
        losses = []
        for batch in _batches(train_idx, settings.batch_size, rng):
            xb = _to_float(images_u8, batch)
            optimizer.zero_grad()
            loss = F.l1_loss(model(xb), xb)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
    model.eval()
    val_mae = reconstruction_mae(model, images_u8, val_idx)
    if val_mae > mae_budget:
        raise TrainingFailure(
            f"autoencoder validation MAE {val_mae:.4f} exceeds budget {mae_budget:.4f}",
            final_metric=val_mae,
        )
    return {"train_loss": history, "val_mae": val_mae}


def reconstruction_mae(model: nn.Module, images_u8: torch.Tensor, idx: list[int]) -> float:
    model.eval()
    idx = np.asarray(idx)
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, len(idx), 256):
            batch = idx[start : start + 256]
            xb = _to_float(images_u8, batch)
            total += float((model(xb) - xb).abs().mean()) * len(batch)
            count += len(batch)
    return total / max(count, 1)
