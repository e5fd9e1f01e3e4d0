"""Similarity and attack-quality metrics.

SSIM here is the windowed variant (11x11 Gaussian, sigma 1.5, K1=0.01,
K2=0.03, unit dynamic range) computed on luma for color inputs, written in
torch ops end to end so it can sit inside optimization losses.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import torch
import torch.nn.functional as F

from .archives import write_json
from .ensemble import ModelEnsemble
from .exceptions import MetricUnavailable
from .images import luma

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_window(dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    half = (SSIM_WINDOW - 1) / 2
    coords = torch.arange(SSIM_WINDOW, dtype=torch.float64, device=device) - half
    g = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    window = torch.outer(g, g)
    return window.to(dtype).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean windowed SSIM between two images in [0, 1]; differentiable.

    Color inputs are collapsed to luma first. Windows are evaluated only where
    the 11x11 support fits, so inputs must be at least 11 pixels on each side.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    squeeze = a.dim() == 3
    if squeeze:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() != 4:
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(a.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")

    ya, yb = luma(a), luma(b)
    window = _gaussian_window(ya.dtype, ya.device)

    mu_a = F.conv2d(ya, window)
    mu_b = F.conv2d(yb, window)
    var_a = F.conv2d(ya * ya, window) - mu_a * mu_a
    var_b = F.conv2d(yb * yb, window) - mu_b * mu_b
    cov = F.conv2d(ya * yb, window) - mu_a * mu_b

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    ssim_map = num / den
    per_image = ssim_map.mean(dim=(1, 2, 3))
    return per_image[0] if squeeze else per_image.mean()


def total_variation(m: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: summed absolute differences between spatial neighbors."""
    if m.dim() < 2:
        raise ValueError(f"expected a spatial tensor, got shape {tuple(m.shape)}")
    dv = (m[..., 1:, :] - m[..., :-1, :]).abs().sum()
    dh = (m[..., :, 1:] - m[..., :, :-1]).abs().sum()
    return dv + dh


def l1_norm(m: torch.Tensor) -> torch.Tensor:
    return m.abs().sum()


class PerceptualBackend(Protocol):
    """Anything that scores perceptual distance between two images in [0, 1]."""

    name: str

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> float: ...


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, backend: PerceptualBackend | None) -> float:
    """Distance under the configured backend; absent backend is an error, not a guess."""
    if backend is None:
        raise MetricUnavailable("no perceptual backend configured")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(backend.distance(a, b))


def tasr(
    adversarial: list[torch.Tensor],
    targets: list[int],
    ensemble: ModelEnsemble,
    model_id: str,
) -> float:
    """Fraction of adversarial images one model assigns to their target class."""
    if not adversarial:
        raise ValueError("tasr needs at least one adversarial example")
    if len(adversarial) != len(targets):
        raise ValueError("adversarial images and targets differ in length")
    batch = torch.stack(adversarial)
    preds = ensemble.predict_batch(batch, model_id)
    hits = sum(int(p) == int(t) for p, t in zip(preds, targets))
    return hits / len(targets)


def clean_accuracy(
    images: list[torch.Tensor],
    labels: list[int],
    ensemble: ModelEnsemble,
    model_id: str,
) -> float:
    if not images:
        raise ValueError("clean_accuracy needs at least one image")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    batch = torch.stack(images)
    preds = ensemble.predict_batch(batch, model_id)
    return sum(int(p) == int(l) for p, l in zip(preds, labels)) / len(labels)


def _round4(value):
    if value is None:
        return None
    return round(float(value), 4)


@dataclass
class MetricReport:
    """Flat summary of one evaluation pass, serializable to JSON and CSV."""

    tasr_by_model: dict[str, float]
    clean_accuracy_by_model: dict[str, float]
    ssim_mean: float
    ssim_values: list[float] = field(default_factory=list)
    perceptual_mean: float | None = None
    perceptual_backend: str | None = None
    attack_count: int = 0

    def to_json_dict(self) -> dict:
        return {
            "attack_count": self.attack_count,
            "tasr": {k: _round4(v) for k, v in sorted(self.tasr_by_model.items())},
            "clean_accuracy": {
                k: _round4(v) for k, v in sorted(self.clean_accuracy_by_model.items())
            },
            "ssim_mean": _round4(self.ssim_mean),
            "ssim_values": [_round4(v) for v in self.ssim_values],
            "perceptual": {
                "available": self.perceptual_mean is not None,
                "backend": self.perceptual_backend,
                "mean": _round4(self.perceptual_mean),
            },
        }

    def write(self, json_path: Path | str, csv_path: Path | str) -> None:
        write_json(json_path, self.to_json_dict())
        rows = [("metric", "model", "value")]
        for mid, v in sorted(self.tasr_by_model.items()):
            rows.append(("tasr", mid, f"{_round4(v):.4f}"))
        for mid, v in sorted(self.clean_accuracy_by_model.items()):
            rows.append(("clean_accuracy", mid, f"{_round4(v):.4f}"))
        rows.append(("ssim_mean", "", f"{_round4(self.ssim_mean):.4f}"))
        perceptual = "" if self.perceptual_mean is None else f"{_round4(self.perceptual_mean):.4f}"
        rows.append(("perceptual_mean", self.perceptual_backend or "unavailable", perceptual))
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
