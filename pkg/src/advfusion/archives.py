"""Serialization helpers: named tensor archives, canonical JSON, content hashes."""

import hashlib
import json
from pathlib import Path

import numpy as np
import torch


def save_tensors(path: Path | str, **tensors: torch.Tensor) -> None:
    """Store named tensors as an uncompressed .npz archive.

    np.savez writes fixed zip timestamps, so identical tensors produce
    byte-identical files; reproducibility checks rely on that.
    """
    arrays = {name: t.detach().cpu().numpy() for name, t in tensors.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_tensors(path: Path | str) -> dict[str, torch.Tensor]:
    with np.load(Path(path)) as data:
        return {name: torch.from_numpy(data[name].copy()) for name in data.files}


def canonical_json(obj) -> str:
    """Stable JSON rendering: sorted keys, no float repr surprises beyond json's own."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False)


def write_json(path: Path | str, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj) + "\n", encoding="utf-8")


def read_json(path: Path | str):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
