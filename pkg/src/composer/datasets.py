"""MNIST IDX ingestion, Wide-MNIST synthesis and batch iteration."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from composer.errors import DataError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

DOWNLOAD_HINT = (
    "Download the four MNIST IDX files (train-images-idx3-ubyte, train-labels-idx1-ubyte, "
    "t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte; .gz accepted) from "
    "http://yann.lecun.com/exdb/mnist/ or any mirror and point data.mnist_dir at them."
)


@dataclass
class LabeledDataset:
    """Images with integer labels.

    ``pixels`` is ``[count, rows, cols]``; uint8 pixels are scaled to [0, 1]
    on access so a full Wide-MNIST split stays small in memory.
    """

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 3:
            raise DataError(f"{self.name}: images must be [count, rows, cols]")
        if len(self.pixels) != len(self.labels):
            raise DataError(
                f"{self.name}: {len(self.pixels)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"{self.name}: labels outside [0, {self.num_classes})")
        if self.pixels.dtype != np.uint8:
            self.pixels = np.asarray(self.pixels, dtype=np.float64)
            if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
                raise DataError(f"{self.name}: float pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    @property
    def images(self) -> np.ndarray:
        return self._scale(self.pixels)

    def _scale(self, block: np.ndarray) -> np.ndarray:
        if block.dtype == np.uint8:
            return block / 255.0
        return block.astype(np.float64)

    def batch(self, index) -> tuple[np.ndarray, np.ndarray]:
        """Flattened float64 inputs and labels for the given example indices."""
        block = self.pixels[index]
        return self._scale(block).reshape(len(block), -1), self.labels[index]

    def subset(self, count: int) -> "LabeledDataset":
        return LabeledDataset(
            self.pixels[:count], self.labels[:count], self.num_classes, self.name,
            dict(self.provenance, limit=count),
        )


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzip-compressed)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataError(f"{path}: corrupt gzip stream ({exc})") from None
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise DataError(f"{path}: bad magic number {magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw) - header} bytes, expected {expected - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str = "") -> LabeledDataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected an image file (magic {IMAGE_MAGIC})")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: expected a label file (magic {LABEL_MAGIC})")
    if len(images) != len(labels):
        raise DataError(
            f"{labels_path}: {len(labels)} labels but {images_path} holds {len(images)} images"
        )
    if num_classes is None:
        num_classes = 10 if labels.size == 0 or labels.max() < 10 else int(labels.max()) + 1
    return LabeledDataset(
        images, labels.astype(np.int64), num_classes, name or Path(images_path).name,
        {"images": str(images_path), "labels": str(labels_path),
         "images_sha256": _digest(images_path), "labels_sha256": _digest(labels_path)},
    )


def find_mnist(directory, split: str) -> tuple[Path, Path]:
    directory = Path(directory)
    found = []
    for stem in MNIST_FILES[split]:
        for candidate in (directory / stem, directory / (stem + ".gz")):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise DataError(f"MNIST file {stem} not found in {directory}. {DOWNLOAD_HINT}")
    return found[0], found[1]


def load_mnist(directory, split: str = "train") -> LabeledDataset:
    images, labels = find_mnist(directory, split)
    return load_idx(images, labels, num_classes=10, name=f"mnist-{split}")


def write_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Export a dataset in the IDX layout (pixels re-quantised to bytes)."""
    pixels = dataset.pixels
    if pixels.dtype != np.uint8:
        pixels = np.rint(pixels * 255.0).astype(np.uint8)
    count, rows, cols = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, count))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def side_bits(seed: int, count: int) -> np.ndarray:
    """Counter-based fair coin per example index: 0 = left, 1 = right."""
    with np.errstate(over="ignore"):
        key = _splitmix64(np.array([seed], dtype=np.uint64))[0]
        mixed = _splitmix64(np.arange(count, dtype=np.uint64) ^ key)
    return (mixed >> np.uint64(63)).astype(np.int64)


def make_wide_mnist(source: LabeledDataset, seed: int) -> LabeledDataset:
    """Place each digit in the left or right half of a blank 28x56 canvas.

    Left digits keep their label; right digits get label ``10 + digit``.
    """
    if source.num_classes != 10 or source.shape != (28, 28):
        raise DataError(f"{source.name}: Wide-MNIST needs 28x28 images with 10 classes")
    side = side_bits(seed, len(source))
    wide = np.zeros((len(source), 28, 56), dtype=source.pixels.dtype)
    left = side == 0
    wide[left, :, :28] = source.pixels[left]
    wide[~left, :, 28:] = source.pixels[~left]
    labels = source.labels + 10 * side
    return LabeledDataset(
        wide, labels, 20, f"wide-{source.name}",
        {"source": source.provenance, "source_name": source.name, "synthesis_seed": seed},
    )


def batch_indices(count: int, N: int, epoch_seed: int) -> Iterator[np.ndarray]:
    """Index blocks of one shuffled epoch; the final short block is dropped."""
    if not 0 < N <= count:
        raise DataError(f"batch size {N} must be in [1, {count}]")
    order = np.random.default_rng(epoch_seed).permutation(count)
    for start in range(0, count - N + 1, N):
        yield order[start : start + N]


def batch_iterator(dataset: LabeledDataset, N: int, epoch_seed: int):
    for index in batch_indices(len(dataset), N, epoch_seed):
        yield dataset.batch(index)
