"""Dataset ingestion and the procedural shape corpus.

Ingestion reads a folder-of-class-folders layout (sorted folder names define
the label order), resizes to the working resolution, and carves deterministic
stratified train/val/attack splits. The shape corpus is a self-contained
10-class generator used for desk-scale experiments and the acceptance run;
classes differ by geometry while colors stay uninformative, so classifiers
must learn shape.
"""

import argparse
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .seeding import derive_seed, numpy_generator

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp"}


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    attack: float = 0.1

    def __post_init__(self):
        for name in ("train", "val", "attack"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} fraction must be in [0, 1]")
        if abs(self.train + self.val + self.attack - 1.0) > 1e-6:
            raise ValueError("split fractions must sum to 1")


@dataclass
class IndexedDataset:
    images: torch.Tensor              # (N, C, H, W) uint8
    labels: torch.Tensor              # (N,) int64
    class_names: list[str]
    splits: dict[str, list[int]]      # "train" / "val" / "attack"
    paths: list[str]
    skipped: list[str] = field(default_factory=list)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def image(self, index: int) -> torch.Tensor:
        return self.images[index].to(torch.float32) / 255.0

    def split_images(self, split: str) -> list[torch.Tensor]:
        return [self.image(i) for i in self.splits[split]]

    def split_labels(self, split: str) -> list[int]:
        return [int(self.labels[i]) for i in self.splits[split]]


def _load_one(path: Path, image_size: int, channels: int) -> np.ndarray | None:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB" if channels == 3 else "L")
            if img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError):
        return None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def ingest_dataset(
    root: Path | str,
    image_size: int = 64,
    split: SplitSpec = SplitSpec(),
    seed: int = 0,
    channels: int = 3,
) -> IndexedDataset:
    """Load a folder-of-class-folders corpus into memory with fixed splits.

    Unreadable files are skipped with a warning; a class folder with no
    readable image at all is a hard error because every class must be both
    attackable and targetable.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ValueError(f"need at least 2 class folders under {root}, found {len(class_dirs)}")

    arrays: list[np.ndarray] = []
    labels: list[int] = []
    paths: list[str] = []
    skipped: list[str] = []
    per_class_indices: list[list[int]] = []

    for class_id, class_dir in enumerate(class_dirs):
        files = sorted(
            p for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        indices: list[int] = []
        for f in files:
            arr = _load_one(f, image_size, channels)
            if arr is None:
                skipped.append(str(f))
                warnings.warn(f"skipping unreadable image {f}", stacklevel=2)
                continue
            indices.append(len(arrays))
            arrays.append(arr)
            labels.append(class_id)
            paths.append(str(f))
        if not indices:
            raise ValueError(f"class folder {class_dir} has no readable image")
        per_class_indices.append(indices)

    splits: dict[str, list[int]] = {"train": [], "val": [], "attack": []}
    for class_id, indices in enumerate(per_class_indices):
        rng = numpy_generator(derive_seed(seed, "split", class_id))
        order = rng.permutation(indices)
        n = len(order)
        n_train = int(round(split.train * n))
        n_val = int(round(split.val * n))
        n_train = min(n_train, n)
        n_val = min(n_val, n - n_train)
        splits["train"].extend(int(i) for i in order[:n_train])
        splits["val"].extend(int(i) for i in order[n_train : n_train + n_val])
        splits["attack"].extend(int(i) for i in order[n_train + n_val :])

    stacked = np.stack(arrays)  # (N, H, W, C)
    images = torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()
    return IndexedDataset(
        images=images,
        labels=torch.tensor(labels, dtype=torch.int64),
        class_names=[d.name for d in class_dirs],
        splits={k: sorted(v) for k, v in splits.items()},
        paths=paths,
        skipped=skipped,
    )


def assign_targets(labels: list[int], class_count: int, seed: int) -> list[int]:
    """Uniform target class per item, never the item's own label."""
    if class_count < 2:
        raise ValueError("need at least 2 classes to assign targets")
    targets = []
    for position, label in enumerate(labels):
        if not 0 <= int(label) < class_count:
            raise ValueError(f"label {label} outside [0, {class_count})")
        rng = numpy_generator(derive_seed(seed, "target", position))
        t = int(rng.integers(0, class_count - 1))
        if t >= int(label):
            t += 1
        targets.append(t)
    return targets


# --- procedural shape corpus -------------------------------------------------

SHAPE_CLASSES = (
    "disk", "square", "triangle", "h_stripes", "v_stripes",
    "checker", "ring", "cross", "x_cross", "dot_grid",
)


def _shape_mask(name: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    """Boolean foreground mask on a 2x supersampled grid, for soft edges."""
    ss = size * 2
    ys, xs = np.mgrid[0:ss, 0:ss]
    x = (xs + 0.5) / 2.0 - cx
    y = (ys + 0.5) / 2.0 - cy
    if name == "disk":
        return x * x + y * y <= r * r
    if name == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= r
    if name == "triangle":
        return (y >= -r) & (y <= r) & (np.abs(x) <= (y + r) / 2.0)
    if name == "h_stripes":
        inside = np.maximum(np.abs(x), np.abs(y)) <= r
        period = max(r / 2.0, 4.0)
        return inside & ((np.floor(y / period).astype(int) % 2) == 0)
    if name == "v_stripes":
        inside = np.maximum(np.abs(x), np.abs(y)) <= r
        period = max(r / 2.0, 4.0)
        return inside & ((np.floor(x / period).astype(int) % 2) == 0)
    if name == "checker":
        inside = np.maximum(np.abs(x), np.abs(y)) <= r
        cell = max(r / 2.0, 4.0)
        return inside & (((np.floor(x / cell) + np.floor(y / cell)).astype(int) % 2) == 0)
    if name == "ring":
        d2 = x * x + y * y
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if name == "cross":
        w = r / 3.0
        inside = np.maximum(np.abs(x), np.abs(y)) <= r
        return inside & ((np.abs(x) <= w) | (np.abs(y) <= w))
    if name == "x_cross":
        w = r / 3.0
        inside = np.maximum(np.abs(x), np.abs(y)) <= r
        return inside & ((np.abs(x - y) <= w) | (np.abs(x + y) <= w))
    if name == "dot_grid":
        pitch = max(r / 1.5, 6.0)
        dot = pitch / 3.0
        gx = (np.mod(x + pitch / 2.0, pitch)) - pitch / 2.0
        gy = (np.mod(y + pitch / 2.0, pitch)) - pitch / 2.0
        inside = np.maximum(np.abs(x), np.abs(y)) <= r
        return inside & (gx * gx + gy * gy <= dot * dot)
    raise ValueError(f"unknown shape {name!r}")


def render_shape(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (size, size, 3) uint8 sample with jittered geometry and free colors."""
    cx = size / 2.0 + rng.uniform(-size / 10.0, size / 10.0)
    cy = size / 2.0 + rng.uniform(-size / 10.0, size / 10.0)
    r = size * rng.uniform(0.28, 0.38)

    mask = _shape_mask(name, size, cx, cy, r).astype(np.float32)
    # 2x2 box filter folds the supersampled mask down to soft-edged [0, 1].
    mask = mask.reshape(size, 2, size, 2).mean(axis=(1, 3))[:, :, None]

    bg_top = rng.uniform(0.1, 0.9, size=3)
    bg_bottom = np.clip(bg_top + rng.uniform(-0.25, 0.25, size=3), 0.0, 1.0)
    ramp = np.linspace(0.0, 1.0, size, dtype=np.float32)[:, None, None]
    background = bg_top * (1 - ramp) + bg_bottom * ramp

    foreground = rng.uniform(0.0, 1.0, size=3)
    while np.abs(foreground - background.mean(axis=(0, 1))).sum() < 0.6:
        foreground = rng.uniform(0.0, 1.0, size=3)

    img = mask * foreground + (1 - mask) * background
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def generate_shape_dataset(
    root: Path | str,
    per_class: int = 100,
    image_size: int = 64,
    seed: int = 0,
) -> Path:
    """Write the 10-class shape corpus as class folders of PNGs; returns root."""
    root = Path(root)
    for class_id, name in enumerate(SHAPE_CLASSES):
        class_dir = root / f"{class_id:02d}_{name}"
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            rng = numpy_generator(derive_seed(seed, "shape", class_id, i))
            arr = render_shape(name, image_size, rng)
            Image.fromarray(arr).save(class_dir / f"{name}_{i:04d}.png")
    log.info("wrote %d x %d shape images under %s", len(SHAPE_CLASSES), per_class, root)
    return root


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="generate the procedural shape corpus")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--per-class", type=int, default=100)
    parser.add_argument("--image-size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    generate_shape_dataset(args.out, args.per_class, args.image_size, args.seed)
    print(f"shape corpus written to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
