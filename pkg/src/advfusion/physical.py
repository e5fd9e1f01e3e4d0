"""Differentiable stand-in for photographing a printed image.

A view is: perspective warp (print rotated about its vertical axis, pinhole
camera), distance rescale (content shrinks, surroundings turn mid-gray),
multiplicative brightness jitter, additive sensor noise, clamp. The geometric
part is one grid_sample, so gradients flow back to the source image and the
whole transform can sit inside an attack loop.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .archives import write_json
from .ensemble import ModelEnsemble
from .seeding import derive_seed, torch_generator

# Distance from pinhole to print center, in units of half the print's width.
# Depth 2.0 keeps a 45 degree pose fully framed with moderate foreshortening.
CAMERA_DEPTH = 2.0
PAD_VALUE = 0.5
MAX_ANGLE_DEG = 60.0
MAX_BRIGHTNESS_JITTER = 0.5
MAX_NOISE_SIGMA = 0.1


@dataclass(frozen=True)
class ViewCondition:
    """One reproducible viewing geometry plus photometric jitter."""

    distance_scale: float = 1.0
    angle_deg: float = 0.0
    brightness_jitter: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.distance_scale <= 1.0:
            raise ValueError(f"distance_scale must be in (0, 1], got {self.distance_scale}")
        if not 0.0 <= self.angle_deg <= MAX_ANGLE_DEG:
            raise ValueError(f"angle_deg must be in [0, {MAX_ANGLE_DEG}], got {self.angle_deg}")
        if not 0.0 <= self.brightness_jitter <= MAX_BRIGHTNESS_JITTER:
            raise ValueError(
                f"brightness_jitter must be in [0, {MAX_BRIGHTNESS_JITTER}],"
                f" got {self.brightness_jitter}"
            )
        if not 0.0 <= self.noise_sigma <= MAX_NOISE_SIGMA:
            raise ValueError(
                f"noise_sigma must be in [0, {MAX_NOISE_SIGMA}], got {self.noise_sigma}"
            )

    @property
    def is_identity(self) -> bool:
        return (
            self.distance_scale == 1.0
            and self.angle_deg == 0.0
            and self.brightness_jitter == 0.0
            and self.noise_sigma == 0.0
        )

    def label(self) -> str:
        return (
            f"scale{self.distance_scale:g}_angle{self.angle_deg:g}"
            f"_bright{self.brightness_jitter:g}_noise{self.noise_sigma:g}"
        )


def perspective_matrix(angle_deg: float, depth: float = CAMERA_DEPTH) -> torch.Tensor:
    """Homography taking viewed normalized coords to print coords.

    Derived from a pinhole camera at distance ``depth`` watching a unit print
    rotated by ``angle_deg`` about its vertical axis, with focal length chosen
    so the zero-angle view is the identity.
    """
    theta = torch.deg2rad(torch.tensor(float(angle_deg), dtype=torch.float64))
    cos, sin = torch.cos(theta), torch.sin(theta)
    d = float(depth)
    return torch.tensor(
        [
            [d, 0.0, 0.0],
            [0.0, d * cos, 0.0],
            [sin, 0.0, d * cos],
        ],
        dtype=torch.float64,
    )


def scale_matrix(distance_scale: float) -> torch.Tensor:
    """Homography for content shrinking by ``distance_scale`` in the frame."""
    s = float(distance_scale)
    return torch.tensor(
        [[1.0 / s, 0.0, 0.0], [0.0, 1.0 / s, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64
    )


def view_homography(cond: ViewCondition) -> torch.Tensor:
    """Combined output-to-source map: rescale the already-warped print."""
    return perspective_matrix(cond.angle_deg) @ scale_matrix(cond.distance_scale)


def warp_homography(x: torch.Tensor, matrix: torch.Tensor, pad_value: float = PAD_VALUE) -> torch.Tensor:
    """Resample ``x`` so output pixel u shows source pixel H(u); pad uncovered area."""
    squeeze = x.dim() == 3
    xb = x.unsqueeze(0) if squeeze else x
    b, _, h, w = xb.shape

    ys = (torch.arange(h, dtype=torch.float64) * 2 + 1) / h - 1
    xs = (torch.arange(w, dtype=torch.float64) * 2 + 1) / w - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    ones = torch.ones_like(gx)
    coords = torch.stack([gx, gy, ones], dim=-1) @ matrix.to(torch.float64).T
    grid = (coords[..., :2] / coords[..., 2:3]).to(xb.dtype)
    grid = grid.unsqueeze(0).expand(b, -1, -1, -1)

    sampled = F.grid_sample(xb, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    coverage = F.grid_sample(
        torch.ones(b, 1, h, w, dtype=xb.dtype),
        grid,
        mode="bilinear",
        padding_mode="zeros",
        align_corners=False,
    )
    out = sampled + pad_value * (1.0 - coverage)
    return out.squeeze(0) if squeeze else out


def simulate_view(x: torch.Tensor, cond: ViewCondition) -> torch.Tensor:
    """Apply one view condition; identity conditions return the input untouched."""
    if x.dim() not in (3, 4):
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(x.shape)}")
    if cond.is_identity:
        return x.clone()

    out = x
    if cond.angle_deg != 0.0 or cond.distance_scale != 1.0:
        out = warp_homography(out, view_homography(cond))

    gen = torch_generator(derive_seed(cond.seed, "view", cond.label()))
    if cond.brightness_jitter > 0.0:
        factor = 1.0 + (torch.rand(1, generator=gen) * 2 - 1) * cond.brightness_jitter
        out = out * factor.to(out.dtype)
    if cond.noise_sigma > 0.0:
        shape = out.shape[-3:]
        noise = torch.randn(*shape, generator=gen) * cond.noise_sigma
        out = out + noise.to(out.dtype)
    return torch.clamp(out, 0.0, 1.0)


@dataclass(frozen=True)
class ViewDistribution:
    """Ranges the in-loop sampler draws conditions from."""

    angle_range: tuple[float, float] = (0.0, 45.0)
    scale_range: tuple[float, float] = (0.5, 1.0)
    brightness_jitter: float = 0.2
    noise_sigma: float = 0.02

    def __post_init__(self):
        lo, hi = self.angle_range
        if not 0.0 <= lo <= hi <= MAX_ANGLE_DEG:
            raise ValueError(f"angle_range must satisfy 0 <= lo <= hi <= {MAX_ANGLE_DEG}")
        slo, shi = self.scale_range
        if not 0.0 < slo <= shi <= 1.0:
            raise ValueError("scale_range must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.brightness_jitter <= MAX_BRIGHTNESS_JITTER:
            raise ValueError(f"brightness_jitter must be in [0, {MAX_BRIGHTNESS_JITTER}]")
        if not 0.0 <= self.noise_sigma <= MAX_NOISE_SIGMA:
            raise ValueError(f"noise_sigma must be in [0, {MAX_NOISE_SIGMA}]")

    def sample(self, seed: int) -> ViewCondition:
        gen = torch_generator(derive_seed(seed, "condition"))
        draws = torch.rand(2, generator=gen)
        lo, hi = self.angle_range
        angle = lo + float(draws[0]) * (hi - lo)
        slo, shi = self.scale_range
        scale = slo + float(draws[1]) * (shi - slo)
        return ViewCondition(
            distance_scale=scale,
            angle_deg=angle,
            brightness_jitter=self.brightness_jitter,
            noise_sigma=self.noise_sigma,
            seed=seed,
        )


def eot_batch(x: torch.Tensor, n: int, dist: ViewDistribution, seed: int) -> list[torch.Tensor]:
    """n independently sampled views of x, reproducible from the seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [simulate_view(x, dist.sample(derive_seed(seed, "eot", i))) for i in range(n)]


@dataclass
class SweepReport:
    """tASR per (view condition, model), plus the nominal-view baseline."""

    condition_labels: list[str]
    tasr: dict[str, dict[str, float]]  # model id -> condition label -> tASR
    attack_count: int = 0
    nominal_label: str = "nominal"
    notes: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "attack_count": self.attack_count,
            "nominal_label": self.nominal_label,
            "conditions": list(self.condition_labels),
            "tasr": {
                mid: {label: round(float(v), 4) for label, v in sorted(per.items())}
                for mid, per in sorted(self.tasr.items())
            },
            "notes": self.notes,
        }

    def write(self, json_path: Path | str, csv_path: Path | str) -> None:
        write_json(json_path, self.to_json_dict())
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model"] + list(self.condition_labels))
            for mid in sorted(self.tasr):
                row = [mid] + [
                    f"{self.tasr[mid][label]:.4f}" for label in self.condition_labels
                ]
                writer.writerow(row)


def robustness_sweep(
    adversarial: list[torch.Tensor],
    targets: list[int],
    conditions: dict[str, ViewCondition],
    ensemble: ModelEnsemble,
    model_ids: list[str] | None = None,
) -> SweepReport:
    """Re-evaluate stored attacks under each view condition for each model."""
    if not adversarial:
        raise ValueError("robustness_sweep needs at least one adversarial example")
    if len(adversarial) != len(targets):
        raise ValueError("adversarial images and targets differ in length")
    model_ids = list(model_ids) if model_ids is not None else ensemble.ids
    labels = list(conditions)
    report = SweepReport(condition_labels=labels, tasr={mid: {} for mid in model_ids},
                         attack_count=len(adversarial))
    for label, cond in conditions.items():
        viewed = torch.stack([simulate_view(img, cond) for img in adversarial])
        for mid in model_ids:
            preds = ensemble.predict_batch(viewed, mid)
            hits = sum(int(p) == int(t) for p, t in zip(preds, targets))
            report.tasr[mid][label] = hits / len(targets)
    return report
