"""CIFAR-100 binary-format data handling.

The on-disk layout is the standard CIFAR-100 binary distribution: each
record is 3074 bytes, one coarse-label byte, one fine-label byte, then
3072 pixel bytes as channel-major 32x32 planes (red, green, blue).

The same format is used for the synthetic stand-in datasets this repo can
generate for desk-scale training runs, so the loader and its filtering
path are exercised identically with or without the real data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SHAPE = (3, 32, 32)
RECORD_BYTES = 2 + 3 * 32 * 32


class CifarFormatError(ValueError):
    """The byte stream does not follow the CIFAR-100 binary layout."""


@dataclass(frozen=True)
class Dataset:
    """Loaded records: float64 images in [0,1] and integer labels.

    When a class filter was applied, `labels` are contiguous ids
    0..len(classes)-1 and `classes` maps them back to the original fine
    labels (ascending order).
    """

    images: np.ndarray  # (count, 3, 32, 32)
    labels: np.ndarray  # (count,)
    classes: tuple[int, ...]

    @property
    def count(self) -> int:
        return self.images.shape[0]


def load_cifar100(path, class_filter=None) -> Dataset:
    """Load one CIFAR-100 binary file, optionally keeping only the fine
    labels in `class_filter` (relabeled to contiguous ids)."""
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        full = (raw.size // RECORD_BYTES) * RECORD_BYTES
        raise CifarFormatError(
            f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}; "
            f"{raw.size - full} stray bytes starting at offset {full}"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    fine = records[:, 1].astype(np.int64)
    images = records[:, 2:].reshape(-1, *IMAGE_SHAPE).astype(np.float64) / 255.0
    if class_filter is None:
        return Dataset(images=images, labels=fine,
                       classes=tuple(range(100)))
    classes = tuple(sorted(int(c) for c in class_filter))
    if not classes:
        return Dataset(images=images[:0], labels=fine[:0], classes=())
    keep = np.isin(fine, classes)
    relabel = {c: i for i, c in enumerate(classes)}
    labels = np.array([relabel[c] for c in fine[keep]], dtype=np.int64)
    return Dataset(images=images[keep], labels=labels, classes=classes)


def write_records(path, fine_labels, images_u8, coarse_labels=None) -> None:
    """Write records in the CIFAR-100 binary layout.

    `images_u8` is (count, 3, 32, 32) uint8; coarse labels default to
    fine // 5 (the real dataset groups five fine classes per coarse one).
    """
    fine = np.asarray(fine_labels, dtype=np.uint8)
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    count = fine.shape[0]
    if images_u8.shape != (count, *IMAGE_SHAPE):
        raise ValueError(
            f"images have shape {images_u8.shape}, expected "
            f"{(count, *IMAGE_SHAPE)}"
        )
    coarse = (fine // 5 if coarse_labels is None
              else np.asarray(coarse_labels, dtype=np.uint8))
    records = np.empty((count, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = coarse
    records[:, 1] = fine
    records[:, 2:] = images_u8.reshape(count, -1)
    records.tofile(str(path))


def take_per_class(ds: Dataset, per_class: int) -> Dataset:
    """First `per_class` records of every class, in file order."""
    keep = np.zeros(ds.count, dtype=bool)
    for label in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == label)[:per_class]
        keep[idx] = True
    return Dataset(images=ds.images[keep], labels=ds.labels[keep],
                   classes=ds.classes)


def _disk_image(rng, cls: int) -> np.ndarray:
    """Noisy image with a bright disk at a class-dependent position and a
    small class tint on one channel (the tint survives global pooling)."""
    img = rng.normal(120.0, 35.0, size=IMAGE_SHAPE)
    centers = [(8, 8), (24, 24), (8, 24), (24, 8), (16, 16)]
    cy, cx = centers[cls % len(centers)]
    yy, xx = np.ogrid[:32, :32]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= 49
    img[:, mask] += 80.0
    img[cls % 3] += 15.0
    return np.clip(img, 0, 255).astype(np.uint8)


def _blob_image(rng, cls: int) -> np.ndarray:
    """Gaussian pixel cloud around a class-dependent mean level; the two
    clouds are linearly separable in raw pixel space."""
    level = 80.0 + 90.0 * (cls % 2)
    img = rng.normal(level, 12.0, size=IMAGE_SHAPE)
    return np.clip(img, 0, 255).astype(np.uint8)


_GENERATORS = {"disks": _disk_image, "blobs": _blob_image}


def synthesize_split(kind: str, classes, per_class: int,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic synthetic records: class-interleaved labels and
    images from one of the named generators."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown synthetic kind {kind!r}; "
                         f"have {sorted(_GENERATORS)}")
    make = _GENERATORS[kind]
    rng = np.random.default_rng(seed)
    classes = [int(c) for c in classes]
    labels, images = [], []
    for i in range(per_class):
        for cls in classes:
            labels.append(cls)
            images.append(make(rng, cls))
    return np.array(labels, dtype=np.uint8), np.stack(images)


def ensure_synthetic_files(kind: str, data_dir, classes,
                           train_per_class: int, test_per_class: int,
                           seed: int = 20240) -> tuple[Path, Path]:
    """Write (or reuse) the synthetic train/test files for one
    configuration; filenames encode the parameters so stale files are
    never silently reused.

    The generated files also contain two decoy classes so that loading
    with a class filter exercises the real filtering path.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    classes = sorted(int(c) for c in classes)
    decoys = []
    probe = (max(classes) + 1) if classes else 0
    while len(decoys) < 2:
        if probe % 100 not in classes:
            decoys.append(probe % 100)
        probe += 1
    all_classes = classes + decoys
    tag = f"{kind}-c{'-'.join(map(str, classes))}-s{seed}"
    paths = []
    for split, per_class in (("train", train_per_class),
                             ("test", test_per_class)):
        path = data_dir / f"synthetic-{tag}-{split}-{per_class}.bin"
        if not path.exists():
            labels, images = synthesize_split(
                kind, all_classes, per_class, seed + (0 if split == "train"
                                                     else 1)
            )
            write_records(path, labels, images)
        paths.append(path)
    return paths[0], paths[1]
