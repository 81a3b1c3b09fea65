"""Dataset ingestion: CIFAR-10 binary batches and a seeded synthetic set."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import DataError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 channel-planar pixels
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_ENV = "ZEBRA_CIFAR10_DIR"


@dataclass
class Dataset:
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor

    @property
    def num_classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1


def subset_indices(n: int, k: int | None, seed: int) -> np.ndarray:
    """Seeded, sorted choice of ``k`` of ``n`` indices (all of them if ``k`` is None)."""
    if k is None or k >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False))


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not raw:
        raise DataError(f"{path}: empty file")
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DataError(
            f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records; "
            f"partial record starts at byte offset {whole * CIFAR_RECORD}"
        )
    records = np.frombuffer(raw, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def _normalize(images: np.ndarray, mean, std) -> torch.Tensor:
    x = torch.from_numpy(images.astype(np.float32) / 255.0)
    m = torch.tensor(mean, dtype=torch.float32)[:, None, None]
    s = torch.tensor(std, dtype=torch.float32)[:, None, None]
    return (x - m) / s


def ingest_cifar10(
    path=None,
    train_subset: int | None = None,
    test_subset: int | None = None,
    seed: int = 7,
    mean=(0.4914, 0.4822, 0.4465),
    std=(0.2470, 0.2435, 0.2616),
) -> Dataset:
    """Load the standard CIFAR-10 binary batches from ``path``.

    ``path`` defaults to ``$ZEBRA_CIFAR10_DIR``. Subsets are chosen with a seeded
    RNG before normalization, so only the selected images are converted.
    """
    path = path or os.environ.get(CIFAR_ENV)
    if not path:
        raise DataError(f"no CIFAR-10 directory given (set data.path or ${CIFAR_ENV})")
    root = Path(path)
    if root.is_dir() and not (root / CIFAR_TEST_FILE).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    missing = [f for f in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE] if not (root / f).is_file()]
    if missing:
        raise DataError(f"{root}: missing CIFAR-10 file(s) {missing}")

    parts = [read_cifar_batch(root / f) for f in CIFAR_TRAIN_FILES]
    train_imgs = np.concatenate([p[0] for p in parts])
    train_lbls = np.concatenate([p[1] for p in parts])
    test_imgs, test_lbls = read_cifar_batch(root / CIFAR_TEST_FILE)

    tr = subset_indices(len(train_lbls), train_subset, seed)
    te = subset_indices(len(test_lbls), test_subset, seed + 1)
    return Dataset(
        _normalize(train_imgs[tr], mean, std),
        torch.from_numpy(train_lbls[tr]),
        _normalize(test_imgs[te], mean, std),
        torch.from_numpy(test_lbls[te]),
    )


def _class_prototypes(num_classes: int, size: int):
    rng = np.random.default_rng(12345)
    margin = max(1, size // 6)
    centers = rng.uniform(margin, size - 1 - margin, size=(num_classes, 2))
    colors = rng.uniform(0.2, 1.0, size=(num_classes, 3))
    widths = rng.uniform(size / 12, size / 7, size=num_classes)
    return centers, colors, widths


def make_synthetic(n: int, size: int = 16, num_classes: int = 10, seed: int = 0):
    """Gaussian blobs on an exactly-zero background.

    Each class has a fixed blob position, colour and width; samples jitter the
    position and scale the intensity, and carry a dimmer distractor blob drawn
    from a random class. Values under 0.05 are cut to zero so background
    blocks are genuinely empty.
    """
    centers, colors, widths = _class_prototypes(num_classes, size)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    distractors = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    def blobs(cls, gain_lo, gain_hi):
        c = centers[cls] + rng.normal(0, size / 12, size=(n, 2))
        w = widths[cls][:, None, None]
        bump = np.exp(-((yy - c[:, 0, None, None]) ** 2 + (xx - c[:, 1, None, None]) ** 2) / (2 * w**2))
        gain = rng.uniform(gain_lo, gain_hi, size=(n, 1, 1, 1))
        return colors[cls][:, :, None, None] * bump[:, None] * gain, bump

    main, bump = blobs(labels, 0.6, 1.2)
    extra, extra_bump = blobs(distractors, 0.3, 0.8)
    support = np.maximum(bump, extra_bump)[:, None]
    noise = rng.normal(0, 0.1, size=(n, 3, size, size)) * support
    imgs = main + extra
    imgs = np.where(imgs >= 0.05, np.clip(imgs + noise, 0, None), 0.0)
    return torch.from_numpy(imgs.astype(np.float32)), torch.from_numpy(labels.astype(np.int64))


def load_dataset(cfg) -> Dataset:
    d = cfg.data
    if cfg.dataset == "cifar10":
        return ingest_cifar10(d.path, d.train_subset, d.test_subset, d.subset_seed, d.mean, d.std)
    train_x, train_y = make_synthetic(d.synthetic_train, d.image_size, d.num_classes, seed=cfg.seed * 2 + 1)
    test_x, test_y = make_synthetic(d.synthetic_test, d.image_size, d.num_classes, seed=cfg.seed * 2 + 2)
    return Dataset(train_x, train_y, test_x, test_y)
