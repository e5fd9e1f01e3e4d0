"""Image tensor conventions and PNG round-tripping.

Images are float32 tensors shaped (C, H, W) with values in [0, 1]; batches add
a leading dimension. Everything written to disk goes through ``quantize`` so a
reloaded PNG reproduces the in-memory tensor exactly.
"""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

# BT.601 luma weights, the usual choice for perceptual metrics on sRGB data.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] and snap to the 8-bit lattice.

    Emitted images pass through this exactly once, which makes metrics
    computed in memory identical to metrics recomputed from the stored PNG.
    """
    return torch.round(torch.clamp(x, 0.0, 1.0) * 255.0) / 255.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) float in [0, 1] -> (H, W, C) uint8 array."""
    if x.dim() != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {tuple(x.shape)}")
    arr = torch.round(torch.clamp(x, 0.0, 1.0) * 255.0).to(torch.uint8)
    return arr.permute(1, 2, 0).contiguous().numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """(H, W, C) or (H, W) uint8 array -> (C, H, W) float tensor in [0, 1]."""
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D array, got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr).copy())
    return t.permute(2, 0, 1).to(torch.float32) / 255.0


def save_png(path: Path | str, x: torch.Tensor) -> None:
    arr = to_uint8(x.detach().cpu())
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(Path(path), format="PNG")


def load_png(path: Path | str) -> torch.Tensor:
    with Image.open(Path(path)) as img:
        img = img.convert("RGB") if img.mode not in ("L", "RGB") else img.copy()
    return from_uint8(np.asarray(img))


def luma(x: torch.Tensor) -> torch.Tensor:
    """Collapse an RGB image (or batch) to one luma channel; pass grayscale through."""
    channels = x.shape[-3]
    if channels == 1:
        return x
    if channels != 3:
        raise ValueError(f"expected 1 or 3 channels, got {channels}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device).view(3, 1, 1)
    return (x * w).sum(dim=-3, keepdim=True)
