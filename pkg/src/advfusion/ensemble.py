"""Model ensemble wrapper: prediction and the averaged cross-entropy objective."""

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError
from .models import load_model


@dataclass
class ClassifierOutput:
    logits: torch.Tensor         # (class_count,)
    probabilities: torch.Tensor  # (class_count,), softmax of logits


class ModelEnsemble:
    """An ordered set of frozen classifiers sharing one label space."""

    def __init__(self, models: dict[str, nn.Module], class_count: int):
        if not models:
            raise ConfigurationError("an ensemble needs at least one model")
        self.class_count = int(class_count)
        self._models = dict(models)
        for model in self._models.values():
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)

    @property
    def ids(self) -> list[str]:
        return list(self._models)

    def __len__(self) -> int:
        return len(self._models)

    def model(self, model_id: str) -> nn.Module:
        if model_id not in self._models:
            raise ConfigurationError(
                f"unknown model id {model_id!r} (have: {', '.join(self.ids)})"
            )
        return self._models[model_id]

    def _as_batch(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            return x.unsqueeze(0)
        if x.dim() == 4:
            return x
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(x.shape)}")

    def predict(self, x: torch.Tensor, model_id: str) -> ClassifierOutput:
        """Single-image prediction by one member, gradient-free."""
        if x.dim() != 3:
            raise ValueError("predict takes a single (C,H,W) image")
        model = self.model(model_id)
        with torch.no_grad():
            logits = model(x.unsqueeze(0))[0]
        return ClassifierOutput(logits=logits, probabilities=F.softmax(logits, dim=-1))

    def predict_batch(self, x: torch.Tensor, model_id: str) -> torch.Tensor:
        """(B,C,H,W) -> (B,) predicted labels by one member, gradient-free."""
        model = self.model(model_id)
        with torch.no_grad():
            return model(self._as_batch(x)).argmax(dim=-1)

    def per_model_ce(self, x: torch.Tensor, label: int) -> dict[str, torch.Tensor]:
        """Cross-entropy toward ``label`` for each member, batch-averaged, with grad."""
        self._check_label(label)
        xb = self._as_batch(x)
        targets = torch.full((xb.shape[0],), int(label), dtype=torch.long)
        return {mid: F.cross_entropy(m(xb), targets) for mid, m in self._models.items()}

    def ce_loss(self, x: torch.Tensor, label: int) -> torch.Tensor:
        """Ensemble objective: cross-entropy toward ``label`` averaged over members."""
        losses = self.per_model_ce(x, label)
        return torch.stack(list(losses.values())).mean()

    def average_probabilities(self, x: torch.Tensor) -> torch.Tensor:
        """(B,C,H,W) -> (B,class_count) softmax averaged over members, gradient-free."""
        xb = self._as_batch(x)
        with torch.no_grad():
            probs = [F.softmax(m(xb), dim=-1) for m in self._models.values()]
        return torch.stack(probs).mean(dim=0)

    def consensus_label(self, x: torch.Tensor) -> int:
        """Argmax of the ensemble-averaged probabilities for one image."""
        if x.dim() != 3:
            raise ValueError("consensus_label takes a single (C,H,W) image")
        return int(self.average_probabilities(x.unsqueeze(0))[0].argmax())

    def consensus_labels(self, x: torch.Tensor) -> torch.Tensor:
        return self.average_probabilities(x).argmax(dim=-1)

    def _check_label(self, label: int) -> None:
        if not 0 <= int(label) < self.class_count:
            raise ValueError(f"label {label} outside [0, {self.class_count})")

    @classmethod
    def from_weights(cls, model_dir: Path | str, model_ids: list[str], class_count: int):
        model_dir = Path(model_dir)
        models: dict[str, nn.Module] = {}
        for mid in model_ids:
            model, manifest = load_model(model_dir / f"{mid}.pt")
            if manifest["class_count"] != class_count:
                raise ConfigurationError(
                    f"model {mid!r} was trained for {manifest['class_count']} classes,"
                    f" ensemble expects {class_count}"
                )
            models[mid] = model
        return cls(models, class_count=class_count)
