"""Class activation heatmaps from the designated last convolution."""

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import UnsupportedModelError


def gradcam(model: nn.Module, x: torch.Tensor, class_id: int) -> torch.Tensor:
    """Heatmap of where ``model`` looks when scoring ``class_id``.

    Channel weights are the spatial average of the class-score gradient at the
    designated conv layer; the weighted activation sum is rectified, upsampled
    to the input size, and min-max normalized to [0, 1]. A constant map (e.g.
    a dead class) normalizes to all zeros rather than dividing by zero.
    """
    if x.dim() != 3:
        raise ValueError(f"expected a single (C,H,W) image, got shape {tuple(x.shape)}")
    layer = getattr(model, "gradcam_layer", None)
    if not isinstance(layer, nn.Conv2d):
        raise UnsupportedModelError(
            f"{type(model).__name__} does not designate a conv layer for heatmaps"
        )

    captured: list[torch.Tensor] = []

    def keep(module, inputs, output):
        captured.append(output)

    handle = layer.register_forward_hook(keep)
    try:
        with torch.enable_grad():
            # Parameters are frozen inside ensembles, so the graph must be
            # anchored at the input for the activation gradient to exist.
            inp = x.detach().unsqueeze(0).requires_grad_(True)
            logits = model(inp)
            if not 0 <= int(class_id) < logits.shape[-1]:
                raise ValueError(f"class_id {class_id} outside [0, {logits.shape[-1]})")
            activations = captured[0]
            grads = torch.autograd.grad(logits[0, int(class_id)], activations)[0]
    finally:
        handle.remove()

    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * activations.detach()).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]

    lo, hi = cam.min(), cam.max()
    if (hi - lo) <= 1e-12:
        return torch.zeros_like(cam)
    return (cam - lo) / (hi - lo)
