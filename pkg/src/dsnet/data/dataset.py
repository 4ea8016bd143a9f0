"""Samples, dataset scanning and the resize protocol for image/label pairs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..engine.functional import bilinear_resize
from ..engine.rng import RngState
from ..engine.tensor import Tensor
from .codecs import read_image, read_label, write_image, write_label

IGNORE_INDEX = 255


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # float32 (1, 3, H, W) in [0, 1]
    label: np.ndarray  # int64 (H, W)
    id: str = ""

    def __post_init__(self):
        if self.image.ndim == 3:
            self.image = self.image[None]
        if self.image.shape[0] != 1 or self.image.shape[2:] != self.label.shape:
            raise DatasetError(f"sample {self.id!r}: image {self.image.shape} and label {self.label.shape} are not aligned")

    @property
    def size(self) -> tuple[int, int]:
        return self.label.shape


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel nearest-neighbour source index for each output index."""
    src = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.clip(src, 0, n_in - 1)


def resize_label(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = label.shape
    if (h, w) == (out_h, out_w):
        return label.copy()
    return label[np.ix_(nearest_indices(h, out_h), nearest_indices(w, out_w))]


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return bilinear_resize(Tensor(image), out_h, out_w).data


def resize_pair(sample: Sample, target_h: int, target_w: int) -> Sample:
    """Bilinear for the image, nearest for the label so class ids never blend."""
    if target_h < 1 or target_w < 1:
        raise DatasetError(f"resize target must be positive, got {target_h}x{target_w}")
    return Sample(resize_image(sample.image, target_h, target_w), resize_label(sample.label, target_h, target_w), sample.id)


@dataclass
class DatasetIndex:
    root: Path
    split: str
    pairs: list[tuple[Path, Path]]
    num_classes: int
    ignore_index: int = IGNORE_INDEX
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> Sample:
        img_path, lab_path = self.pairs[i]
        return Sample(read_image(img_path), read_label(lab_path, self.num_classes, self.ignore_index), img_path.stem)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def stems(self) -> list[str]:
        return [p.stem for p, _ in self.pairs]

    def load_all(self) -> list[Sample]:
        return list(self)


def read_class_sidecar(root: str | os.PathLike) -> dict:
    """Optional ``classes.json`` at the dataset root: ``{"names": [...], "ignore_index": 255}``."""
    path = Path(root) / "classes.json"
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def scan_dataset(root: str | os.PathLike, split: str, num_classes: int, ignore_index: int | None = None) -> DatasetIndex:
    """Match ``root/images/<split>/*.ppm`` with ``root/labels/<split>/*.pgm`` by stem."""
    root = Path(root)
    img_dir = root / "images" / split
    lab_dir = root / "labels" / split
    images = {p.stem: p for p in img_dir.glob("*.ppm")} if img_dir.is_dir() else {}
    labels = {p.stem: p for p in lab_dir.glob("*.pgm")} if lab_dir.is_dir() else {}
    if not images and not labels:
        raise DatasetError(f"empty split {split!r} under {root}")
    for stem in sorted(images):
        if stem not in labels:
            raise DatasetError(f"image {stem!r} has no label in {lab_dir}")
    for stem in sorted(labels):
        if stem not in images:
            raise DatasetError(f"label {stem!r} has no image in {img_dir}")
    sidecar = read_class_sidecar(root)
    if ignore_index is None:
        ignore_index = int(sidecar.get("ignore_index", IGNORE_INDEX))
    pairs = [(images[s], labels[s]) for s in sorted(images)]
    return DatasetIndex(root, split, pairs, num_classes, ignore_index, list(sidecar.get("names", [])))


def write_dataset(root: str | os.PathLike, split: str, samples: list[Sample]) -> None:
    root = Path(root)
    (root / "images" / split).mkdir(parents=True, exist_ok=True)
    (root / "labels" / split).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "images" / split / f"{s.id}.ppm", s.image)
        write_label(root / "labels" / split / f"{s.id}.pgm", s.label)


def synthetic_samples(n: int, height: int = 64, width: int = 64, num_classes: int = 4, seed: int = 0) -> list[Sample]:
    """Toy scenes: class 0 background with rectangles and discs of the other classes.

    Each class has its own base colour plus mild per-pixel noise, so a
    segmentation net can fit them from scratch. Pixel values are quantized
    to multiples of 1/255 so a PPM round trip is lossless.
    """
    rng = RngState(seed)
    palette = np.array([[0.2, 0.25, 0.3], [0.85, 0.2, 0.15], [0.15, 0.75, 0.25], [0.2, 0.3, 0.9], [0.9, 0.85, 0.2], [0.7, 0.3, 0.8]])
    yy, xx = np.mgrid[0:height, 0:width]
    out = []
    for i in range(n):
        label = np.zeros((height, width), dtype=np.int64)
        for c in range(1, num_classes):
            for _ in range(2):
                cy = rng.integers(0, height - 1)
                cx = rng.integers(0, width - 1)
                r = rng.integers(height // 10 + 2, height // 4 + 2)
                if rng.uniform(1)[0] < 0.5:
                    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                else:
                    mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r // 2 + 1)
                label[mask] = c
        colours = palette[np.arange(num_classes) % len(palette)]
        img = colours[label].transpose(2, 0, 1) + 0.05 * (rng.uniform((3, height, width)) - 0.5)
        img = np.rint(np.clip(img, 0, 1) * 255) / 255
        out.append(Sample(img.astype(np.float32)[None], label, f"synth_{i:03d}"))
    return out
