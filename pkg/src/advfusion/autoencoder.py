"""Convolutional autoencoder providing the latent space for feature surgery.

The latent is spatial, (latent_channels, H/8, W/8), so attention maps and
channel blends keep a geometric meaning. The decoder ends in a sigmoid, which
already lands pixels in [0, 1]; decode clamps anyway as a hard guarantee.
"""

from pathlib import Path

import torch
from torch import nn

from .archives import read_json, write_json
from .exceptions import ConfigurationError
from .seeding import seed_torch_globally

DOWNSAMPLE_FACTOR = 8


class ConvAutoencoder(nn.Module):
    def __init__(self, in_channels: int = 3, latent_channels: int = 64, image_size: int = 64):
        super().__init__()
        if image_size % DOWNSAMPLE_FACTOR != 0:
            raise ConfigurationError(
                f"image_size must be a multiple of {DOWNSAMPLE_FACTOR}, got {image_size}"
            )
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.image_size = image_size

        # No normalization layers: they slow pixel-exact reconstruction badly,
        # and the reconstruction budget is what downstream stages lean on.
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 96, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(96, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 64, 3, padding=1),
            nn.GELU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(64, 48, 3, padding=1),
            nn.GELU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(48, 32, 3, padding=1),
            nn.GELU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(32, 16, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(16, in_channels, 3, padding=1),
            nn.Sigmoid(),
        )

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.image_size // DOWNSAMPLE_FACTOR
        return (self.latent_channels, side, side)

    def _check_image(self, x: torch.Tensor) -> None:
        if x.shape[-3:] != (self.in_channels, self.image_size, self.image_size):
            raise ConfigurationError(
                f"expected image shaped (*, {self.in_channels}, {self.image_size},"
                f" {self.image_size}), got {tuple(x.shape)}"
            )

    def _check_latent(self, f: torch.Tensor) -> None:
        if f.shape[-3:] != self.latent_shape:
            raise ConfigurationError(
                f"expected latent shaped (*, {', '.join(map(str, self.latent_shape))}),"
                f" got {tuple(f.shape)}"
            )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Image (or batch) -> spatial latent. Accepts (C,H,W) or (B,C,H,W)."""
        self._check_image(x)
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        f = self.encoder(x)
        return f.squeeze(0) if squeeze else f

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        """Latent (or batch) -> image with pixels clamped to [0, 1]."""
        self._check_latent(f)
        squeeze = f.dim() == 3
        if squeeze:
            f = f.unsqueeze(0)
        x = torch.clamp(self.decoder(f), 0.0, 1.0)
        return x.squeeze(0) if squeeze else x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def build_autoencoder(
    in_channels: int,
    latent_channels: int,
    image_size: int,
    init_seed: int | None = None,
) -> ConvAutoencoder:
    if init_seed is not None:
        seed_torch_globally(init_seed)
    return ConvAutoencoder(
        in_channels=in_channels, latent_channels=latent_channels, image_size=image_size
    )


def save_autoencoder(
    model: ConvAutoencoder,
    path: Path | str,
    *,
    training_seed: int,
    metrics: dict[str, float],
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    write_json(
        path.with_suffix(".json"),
        {
            "architecture": "conv_autoencoder",
            "input_shape": [model.in_channels, model.image_size, model.image_size],
            "latent_shape": list(model.latent_shape),
            "training_seed": training_seed,
            "metrics": {k: round(float(v), 6) for k, v in metrics.items()},
        },
    )


def load_autoencoder(path: Path | str) -> tuple[ConvAutoencoder, dict]:
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not path.exists() or not manifest_path.exists():
        raise ConfigurationError(f"autoencoder weights or sidecar missing at {path}")
    manifest = read_json(manifest_path)
    channels, height, _ = manifest["input_shape"]
    model = ConvAutoencoder(
        in_channels=channels,
        latent_channels=manifest["latent_shape"][0],
        image_size=height,
    )
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, manifest
