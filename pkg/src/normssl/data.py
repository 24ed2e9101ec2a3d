"""Datasets: procedurally generated shapes and the CIFAR binary format."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = (
    "disk", "square", "diamond", "triangle", "ring",
    "plus", "cross", "bar", "frame", "half-disk",
)

# CIFAR-10 binary record: 1 label byte + 3 planes of 32x32 uint8 (R, G, B).
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE

INPUT_MEAN = 0.5
INPUT_STD = 0.25


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    labels: np.ndarray  # (N,) int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def normalize(images: np.ndarray) -> np.ndarray:
    return (images - INPUT_MEAN) / INPUT_STD


def _shape_masks(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Stack of (10, ...) boolean masks; dx, dy are offsets in units of the radius."""
    ax, ay = np.abs(dx), np.abs(dy)
    r = np.sqrt(dx * dx + dy * dy)
    box = np.maximum(ax, ay)
    return np.stack([
        r <= 1.0,
        box <= 0.8,
        ax + ay <= 1.0,
        (dy <= 0.8) & (dy >= -1.0) & (ax <= (dy + 1.0) / 2.0),
        (r <= 1.0) & (r >= 0.55),
        ((ax <= 0.3) & (ay <= 1.0)) | ((ay <= 0.3) & (ax <= 1.0)),
        (np.abs(ax - ay) <= 0.3) & (box <= 1.0),
        (ay <= 0.3) & (ax <= 1.0),
        (box <= 0.9) & (box >= 0.55),
        (r <= 1.0) & (dy >= 0.0),
    ])


def make_shapes(n: int, size: int = 32, num_classes: int = 10, seed: int = 0) -> Dataset:
    """Colored shapes on noisy backgrounds; the label is the shape class.

    Position, radius, shape color and background color are random, so only
    the geometry carries the label.
    """
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((n, size, size, 3))
    for i in range(n):
        radius = rng.uniform(0.22, 0.4) * size
        cx, cy = rng.uniform(radius * 0.8, size - radius * 0.8, size=2)
        masks = _shape_masks((xx - cx) / radius, (yy - cy) / radius)
        mask = masks[labels[i]][..., None]
        bg = rng.uniform(0.0, 0.45, size=3)
        fg = rng.uniform(0.55, 1.0, size=3)
        img = np.where(mask, fg, bg) + rng.normal(0.0, 0.05, size=(size, size, 3))
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64))


def read_cifar_bin(path: str | Path) -> Dataset:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    planes = recs[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return Dataset(images, labels)


def write_cifar_bin(path: str | Path, data: Dataset) -> None:
    imgs = np.clip(np.rint(data.images * 255.0), 0, 255).astype(np.uint8)
    if imgs.shape[1:] != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise ValueError("CIFAR binary records hold 32x32 RGB images")
    planes = imgs.transpose(0, 3, 1, 2).reshape(len(imgs), -1)
    recs = np.concatenate([data.labels.astype(np.uint8)[:, None], planes], axis=1)
    recs.tofile(path)


def _resize(images: np.ndarray, size: int) -> np.ndarray:
    if images.shape[1] == size:
        return images
    from .augment import crop_resize

    n, h, w, _ = images.shape
    return np.stack([crop_resize(img, 0, 0, h, w, size) for img in images])


def load_datasets(cfg) -> tuple[Dataset, Dataset]:
    """Train/test split for a config's ``dataset`` field."""
    if cfg.dataset == "synthetic":
        train = make_shapes(cfg.n_train, cfg.image_size, cfg.num_classes, seed=10_000 + cfg.data_seed)
        test = make_shapes(cfg.n_test, cfg.image_size, cfg.num_classes, seed=20_000 + cfg.data_seed)
        return train, test
    path = Path(cfg.dataset.split(":", 1)[1])
    if path.is_dir():
        train_files = sorted(path.glob("data_batch_*.bin"))
        test_file = path / "test_batch.bin"
        if not train_files or not test_file.exists():
            raise FileNotFoundError(f"{path}: expected data_batch_*.bin and test_batch.bin")
        parts = [read_cifar_bin(p) for p in train_files]
        train = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
        test = read_cifar_bin(test_file)
    else:
        full = read_cifar_bin(path)
        cut = len(full) - min(cfg.n_test, len(full) // 2)
        train = Dataset(full.images[:cut], full.labels[:cut])
        test = Dataset(full.images[cut:], full.labels[cut:])
    train = Dataset(_resize(train.images[: cfg.n_train], cfg.image_size), train.labels[: cfg.n_train])
    test = Dataset(_resize(test.images[: cfg.n_test], cfg.image_size), test.labels[: cfg.n_test])
    return train, test
