"""Classifier architectures, the registry, and weight persistence.

Three small CNNs with deliberately different topologies (plain strided stack,
VGG-style blocks, residual) so transfer can be measured across genuinely
distinct surrogates. All of them use GELU and average pooling; piecewise-linear
activations would make finite-difference gradient checks flaky near kinks.

Each model exposes ``gradcam_layer``, the last convolution, for attention maps.
"""

from pathlib import Path

import torch
from torch import nn

from .archives import read_json, write_json
from .exceptions import ConfigurationError
from .seeding import seed_torch_globally


class ConvNetA(nn.Module):
    """Plain strided conv stack with global average pooling."""

    def __init__(self, class_count: int, in_channels: int = 3):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, stride=1, padding=1),
            nn.BatchNorm2d(32),
            nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.BatchNorm2d(64),
            nn.GELU(),
            nn.Conv2d(64, 96, 3, stride=2, padding=1),
            nn.BatchNorm2d(96),
            nn.GELU(),
            nn.Conv2d(96, 128, 3, stride=2, padding=1),
            nn.BatchNorm2d(128),
            nn.GELU(),
            nn.Conv2d(128, 128, 3, padding=1),
            nn.BatchNorm2d(128),
            nn.GELU(),
        )
        self.head = nn.Linear(128, class_count)
        self.gradcam_layer = self.features[12]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.mean(dim=(2, 3)))


class _VggBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = nn.GELU()
        self.pool = nn.AvgPool2d(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act(self.bn1(self.conv1(x)))
        x = self.act(self.bn2(self.conv2(x)))
        return self.pool(x)


class ConvNetB(nn.Module):
    """VGG-flavored double-conv blocks with a fully connected head."""

    def __init__(self, class_count: int, in_channels: int = 3):
        super().__init__()
        self.block1 = _VggBlock(in_channels, 32)
        self.block2 = _VggBlock(32, 64)
        self.block3 = _VggBlock(64, 96)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.LazyLinear(256),
            nn.GELU(),
            nn.Linear(256, class_count),
        )
        self.gradcam_layer = self.block3.conv2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.block3(self.block2(self.block1(x)))
        return self.head(x)


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = nn.GELU()
        self.skip = nn.Sequential()
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.act(h + self.skip(x))


class ConvNetC(nn.Module):
    """Small residual network; held out of the surrogate ensemble by default."""

    def __init__(self, class_count: int, in_channels: int = 3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.GELU(),
        )
        self.block1 = _ResBlock(32, 64, stride=2)
        self.block2 = _ResBlock(64, 96, stride=2)
        self.block3 = _ResBlock(96, 128, stride=2)
        self.head = nn.Linear(128, class_count)
        self.gradcam_layer = self.block3.conv2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.block3(self.block2(self.block1(self.stem(x))))
        return self.head(x.mean(dim=(2, 3)))


ARCHITECTURES: dict[str, type[nn.Module]] = {
    "cnn_a": ConvNetA,
    "cnn_b": ConvNetB,
    "cnn_c": ConvNetC,
}


def build_model(
    architecture: str,
    class_count: int,
    in_channels: int = 3,
    image_size: int | None = None,
    init_seed: int | None = None,
) -> nn.Module:
    if architecture not in ARCHITECTURES:
        known = ", ".join(sorted(ARCHITECTURES))
        raise ConfigurationError(f"unknown architecture {architecture!r} (known: {known})")
    if class_count < 2:
        raise ConfigurationError(f"class_count must be >= 2, got {class_count}")
    if init_seed is not None:
        seed_torch_globally(init_seed)
    model = ARCHITECTURES[architecture](class_count=class_count, in_channels=in_channels)
    if image_size is not None:
        # Materialize lazy layers so state dicts are complete before training.
        with torch.no_grad():
            model(torch.zeros(1, in_channels, image_size, image_size))
    return model


def save_model(
    model: nn.Module,
    path: Path | str,
    *,
    architecture: str,
    input_shape: tuple[int, int, int],
    class_count: int,
    training_seed: int,
    metrics: dict[str, float],
) -> None:
    """Write weights plus a JSON sidecar describing what the weights are."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    write_json(
        path.with_suffix(".json"),
        {
            "architecture": architecture,
            "input_shape": list(input_shape),
            "class_count": class_count,
            "training_seed": training_seed,
            "metrics": {k: round(float(v), 6) for k, v in metrics.items()},
        },
    )


def load_model(path: Path | str) -> tuple[nn.Module, dict]:
    """Rebuild a model from weights + sidecar; returns (model, manifest)."""
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not path.exists() or not manifest_path.exists():
        raise ConfigurationError(f"model weights or sidecar missing at {path}")
    manifest = read_json(manifest_path)
    channels, height, _ = manifest["input_shape"]
    model = build_model(
        manifest["architecture"],
        class_count=manifest["class_count"],
        in_channels=channels,
        image_size=height,
    )
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, manifest
