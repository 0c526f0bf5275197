"""Datasets: CIFAR-style raw binary files, synthetic blob images, batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError


@dataclass
class Dataset:
    images: np.ndarray  # [N_d, C, H, W] in [0, 1]
    labels: np.ndarray | None
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be [N, C, H, W], got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise FormatError("need exactly one label per image")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise FormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def unlabeled(self) -> "Dataset":
        return Dataset(self.images, None, self.num_classes, self.split)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx],
                       self.num_classes, split or self.split)


# raw binary -----------------------------------------------------------------
#
# One record per image: 1 label byte followed by C*H*W pixel bytes in
# channel-major order (the CIFAR-10 binary layout). A sidecar text file
# ``<path>.meta`` holds ``key=value`` lines: channels, height, width,
# records, num_classes, split, labeled.

META_KEYS = ("channels", "height", "width", "records", "num_classes", "split", "labeled")


def load_raw_binary(path, channels: int, height: int, width: int, records: int,
                    num_classes: int = 256, labeled: bool = True, split: str = "train") -> Dataset:
    raw = np.fromfile(path, dtype=np.uint8)
    rec = 1 + channels * height * width
    expected = records * rec
    if raw.size != expected:
        raise FormatError(f"{path}: expected {expected} bytes ({records} x {rec}), found {raw.size}")
    table = raw.reshape(records, rec)
    labels = table[:, 0].astype(np.int64)
    if labeled and labels.size and labels.max() >= num_classes:
        raise FormatError(f"{path}: label byte {labels.max()} >= num_classes {num_classes}")
    images = table[:, 1:].reshape(records, channels, height, width) / 255.0
    return Dataset(images, labels if labeled else None, num_classes, split)


def save_raw_binary(ds: Dataset, path, write_meta: bool = True) -> None:
    pixels = np.round(np.clip(ds.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    labels = np.zeros(len(ds), dtype=np.uint8) if ds.labels is None else ds.labels.astype(np.uint8)
    table = np.concatenate([labels[:, None], pixels.reshape(len(ds), -1)], axis=1)
    table.tofile(path)
    if write_meta:
        c, h, w = ds.shape
        write_meta_file(f"{path}.meta", {
            "channels": c, "height": h, "width": w, "records": len(ds),
            "num_classes": ds.num_classes, "split": ds.split, "labeled": int(ds.labels is not None),
        })


def write_meta_file(path, meta: dict) -> None:
    Path(path).write_text("".join(f"{k}={meta[k]}\n" for k in META_KEYS if k in meta))


def read_meta_file(path) -> dict:
    meta = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        meta[k] = v if k == "split" else int(v)
    missing = {"channels", "height", "width", "records"} - set(meta)
    if missing:
        raise FormatError(f"{path}: missing keys {sorted(missing)}")
    return meta


def load_dataset(path) -> Dataset:
    """Load a raw binary file using its ``.meta`` sidecar."""
    meta = read_meta_file(f"{path}.meta")
    return load_raw_binary(path, meta["channels"], meta["height"], meta["width"], meta["records"],
                           num_classes=meta.get("num_classes", 256),
                           labeled=bool(meta.get("labeled", 1)), split=meta.get("split", "train"))


# synthetic ------------------------------------------------------------------

def _blob(h, w, cy, cx, sigma_major, sigma_minor=None, angle=0.0):
    sigma_minor = sigma_major if sigma_minor is None else sigma_minor
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.exp(-0.5 * ((u / sigma_major) ** 2 + (v / sigma_minor) ** 2))


def class_patterns(c: int, channels: int, pattern_seed: int, blobs: int = 2, spread: float = 1.5):
    """Per-class layouts of elongated blobs.

    Class k is oriented at ``phase + k * pi / c`` so classes are evenly
    separated in angle; offsets, elongation and colours are random per class.
    """
    rng = np.random.default_rng(pattern_seed)
    phase = rng.uniform(0.0, np.pi / c)
    patterns = []
    for k in range(c):
        angle = phase + k * np.pi / c
        offsets = rng.uniform(-spread, spread, (blobs, 2))
        offsets -= offsets.mean(axis=0)
        major = rng.uniform(1.4, 2.0, blobs)
        minor = rng.uniform(0.45, 0.7, blobs)
        colours = rng.uniform(0.4, 1.0, (blobs, channels))
        patterns.append((angle, offsets, major, minor, colours))
    return patterns


def make_synthetic(c: int, per_class: int, shape=(1, 8, 8), seed: int = 0,
                   pattern_seed: int | None = None, noise: float = 0.05, jitter: float = 0.3,
                   angle_jitter: float = 0.15, distractors: int = 0, split: str = "train") -> Dataset:
    """Class-conditional Gaussian-blob images.

    Each class owns a small layout of elongated blobs with a class-specific
    orientation (drawn from ``pattern_seed``). A sample places the layout at
    a random position, jitters blob positions and angles, scales the
    amplitude, adds ``distractors`` round blobs and pixel noise. Pixel values
    are quantized to multiples of 1/255 so they survive the raw binary format
    unchanged. Use one ``pattern_seed`` with different ``seed`` values for
    the splits of one task; different pattern seeds give different domains.
    """
    if c < 2:
        raise ParameterError("need at least two classes")
    channels, h, w = shape
    patterns = class_patterns(c, channels, seed if pattern_seed is None else pattern_seed)
    rng = np.random.default_rng(seed)
    # centres stay 2 px from the border when the image is large enough
    lo = np.minimum(2.0, [(h - 1) / 2, (w - 1) / 2])
    hi = np.maximum(lo, [h - 3.0, w - 3.0])
    n = c * per_class
    labels = np.repeat(np.arange(c), per_class)
    images = np.zeros((n, channels, h, w))
    for i, y in enumerate(labels):
        angle, offsets, major, minor, colours = patterns[y]
        centre = rng.uniform(lo, hi)
        amp = rng.uniform(0.7, 1.0)
        img = np.zeros((channels, h, w))
        for (dy, dx), sa, sb, col in zip(offsets, major, minor, colours):
            cy, cx = centre + (dy, dx) + rng.normal(0.0, jitter, 2)
            a = angle + rng.normal(0.0, angle_jitter)
            img += amp * col[:, None, None] * _blob(h, w, cy, cx, sa, sb, a)
        for _ in range(distractors):
            cy, cx = rng.uniform(0, [h - 1, w - 1])
            col = rng.uniform(0.2, 0.8, channels)
            img += col[:, None, None] * _blob(h, w, cy, cx, rng.uniform(0.6, 1.2))
        img += rng.normal(0.0, noise, img.shape)
        images[i] = img
    images = np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], c, split)


# batching -------------------------------------------------------------------

@dataclass
class BatchStream:
    """Shuffled mini-batches carrying original dataset indices.

    The order of epoch ``e`` depends only on ``(seed, e)``. A final batch
    smaller than ``min_batch`` is folded into the one before it.
    """

    dataset: Dataset
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    flip: bool = False
    min_batch: int = 1
    epoch: int = 0
    _queue: list = field(default_factory=list, repr=False)

    def epoch_order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.dataset))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))

    def batches(self, epoch: int):
        order = self.epoch_order(epoch)
        flip_rng = np.random.default_rng([self.seed, epoch, 1])
        starts = list(range(0, len(order), self.batch_size))
        if len(starts) > 1 and len(order) - starts[-1] < self.min_batch:
            starts.pop()
        for k, start in enumerate(starts):
            idx = order[start:] if k == len(starts) - 1 else order[start:start + self.batch_size]
            x = self.dataset.images[idx]
            if self.flip:
                mask = flip_rng.random(len(idx)) < 0.5
                x = x.copy()
                x[mask] = x[mask][..., ::-1]
            y = None if self.dataset.labels is None else self.dataset.labels[idx]
            yield x, y, idx

    def __iter__(self):
        return self.batches(self.epoch)


def next_batch(stream: BatchStream):
    """Pull the next batch; rolls over to the following epoch when one ends."""
    if not stream._queue:
        stream._queue = list(stream.batches(stream.epoch))
        stream.epoch += 1
    return stream._queue.pop(0)
