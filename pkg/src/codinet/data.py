"""Datasets, augmentation and grouped batches of ``L`` sources x ``M`` augmentations."""

from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from codinet.rng import Rng

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class DataError(ValueError):
    """Malformed or unusable dataset input."""


@dataclass
class Sample:
    id: int
    image: np.ndarray  # (C, H, W), values in [0, 1]
    label: int


@dataclass(frozen=True)
class BatchSpec:
    L: int
    M: int

    def __post_init__(self):
        if self.L < 1 or self.M < 1:
            raise ValueError(f"batch spec needs L >= 1 and M >= 1, got L={self.L}, M={self.M}")

    @property
    def size(self) -> int:
        return self.L * self.M


@dataclass
class GroupedBatch:
    """``L * M`` items in group-major order; ``group_of[i]`` is the source group of item ``i``."""

    items: List[Sample]
    group_of: np.ndarray
    spec: BatchSpec
    source_ids: List[int] = field(default_factory=list)

    def images(self, mean: Sequence[float] = (0.0,), std: Sequence[float] = (1.0,)) -> np.ndarray:
        return normalize(np.stack([s.image for s in self.items]), mean, std)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.items], dtype=np.int64)


# -- CIFAR-10 binary --------------------------------------------------------------------


def load_cifar10_binary(path: "str | os.PathLike") -> List[Sample]:
    """Read CIFAR-10 binary records (1 label byte + 3072 R,G,B plane bytes each)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise DataError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD} (truncated file?)")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    if labels.size and labels.max() > 9:
        raise DataError(f"{path}: label {int(labels.max())} > 9")
    pixels = records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0
    return [Sample(id=i, image=pixels[i], label=int(labels[i])) for i in range(len(records))]


def write_cifar10_binary(samples: Sequence[Sample], path: "str | os.PathLike") -> None:
    """Inverse of :func:`load_cifar10_binary` (pixels rounded to the nearest byte)."""
    with open(path, "wb") as fh:
        for s in samples:
            if s.image.shape != CIFAR_SHAPE or not 0 <= s.label <= 9:
                raise DataError(f"sample {s.id} is not a CIFAR-10 record")
            fh.write(bytes([s.label]))
            fh.write(np.rint(s.image * 255.0).astype(np.uint8).tobytes())


# -- synthetic blobs -----------------------------------------------------------------------


def _class_prototype(k: int, height: int) -> Tuple[bool, float, float]:
    """(ring, radius scale, intensity) for class ``k``: mixed radix over shape x size x brightness."""
    ring = k % 2 == 1
    scale = (0.09 if (k // 2) % 2 == 0 else 0.16) * height
    level = k // 4
    intensity = 0.95 - 0.45 * (level % 2) - 0.1 * (level // 2)
    return ring, scale, max(intensity, 0.2)


def synthetic_dataset(num_classes: int, per_class: int, size: Tuple[int, int, int], rng: Rng, noise: float = 0.05) -> List[Sample]:
    """Class-conditional blob and ring images.

    The class fixes the shape (filled blob or ring), its size and its
    brightness, all of which survive flips, 90-degree rotations and small
    crops.  The centre is drawn uniformly from the middle half of the image.
    Samples are interleaved by class and numbered in generation order.
    """
    c, h, w = size
    if num_classes <= 0 or h <= 0 or w <= 0 or c <= 0:
        raise ValueError("synthetic_dataset sizes must be positive")
    if per_class < 0:
        raise ValueError("per_class must be non-negative")
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    samples: List[Sample] = []
    for i in range(per_class):
        for k in range(num_classes):
            draw = rng.child("sample", i, k)
            ring, scale, intensity = _class_prototype(k, h)
            cy, cx = (0.25 + 0.5 * draw.uniform(2)) * (np.array([h, w]) - 1)
            r = np.sqrt((rows - cy) ** 2 + (cols - cx) ** 2)
            if ring:
                shape = np.exp(-((r - 1.6 * scale) ** 2) / (2.0 * (0.35 * scale) ** 2))
            else:
                shape = np.exp(-(r**2) / (2.0 * scale**2))
            img = intensity * shape[None, :, :] + draw.normal((c, h, w), scale=noise)
            samples.append(Sample(id=len(samples), image=np.clip(img, 0.0, 1.0), label=k))
    return samples


def split(samples: Sequence[Sample], val_fraction: float, rng: Rng) -> Tuple[List[Sample], List[Sample]]:
    """Random train/validation partition (ids are kept)."""
    order = rng.permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    val = sorted((samples[i] for i in order[:n_val]), key=lambda s: s.id)
    train = sorted((samples[i] for i in order[n_val:]), key=lambda s: s.id)
    return train, val


# -- augmentation ------------------------------------------------------------------------------


def crop_flip(image: np.ndarray, dy: int, dx: int, flip: bool, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, take the ``H x W`` window at ``(dy, dx)``, optionally mirror columns."""
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    out = padded[:, dy : dy + h, dx : dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(s: Sample, rng: Rng, pad: int = 4, hflip: bool = True) -> Sample:
    """Random crop after zero padding, then a horizontal flip with probability 0.5."""
    if s.image.shape[1] != s.image.shape[2]:
        raise DataError("augment expects square images")
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    flip = bool(hflip and rng.uniform() < 0.5)
    return replace(s, image=crop_flip(s.image, dy, dx, flip, pad))


EVAL_AUGMENTATIONS = ("identity", "crop", "hflip", "vflip", "rot90", "mixed")


def eval_augment(s: Sample, kind: str, rng: Rng, pad: int = 4) -> Sample:
    """Probe augmentations; ``mixed`` picks one of crop/hflip/vflip/rot90 per sample."""
    if kind not in EVAL_AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {kind!r}; choose from {EVAL_AUGMENTATIONS}")
    if kind == "mixed":
        kind = ("crop", "hflip", "vflip", "rot90")[int(rng.integers(0, 4))]
    img = s.image
    if kind == "identity":
        out = img.copy()
    elif kind == "crop":
        while True:
            dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
            if (dy, dx) != (pad, pad):
                break
        out = crop_flip(img, dy, dx, False, pad)
    elif kind == "hflip":
        out = np.ascontiguousarray(img[:, :, ::-1])
    elif kind == "vflip":
        out = np.ascontiguousarray(img[:, ::-1, :])
    else:
        out = np.ascontiguousarray(np.rot90(img, k=1, axes=(1, 2)))
    return replace(s, image=out)


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` on a ``(N, C, H, W)`` or ``(C, H, W)`` array."""
    m = np.asarray(mean, dtype=np.float64)
    s = np.asarray(std, dtype=np.float64)
    shape = (-1, 1, 1)
    return (images - m.reshape(shape)) / s.reshape(shape)


# -- batching ------------------------------------------------------------------------------------


def _expand(sources: Sequence[Sample], spec: BatchSpec, rng: Rng, hflip: bool) -> GroupedBatch:
    items = []
    for i, src in enumerate(sources):
        for j in range(spec.M):
            items.append(augment(src, rng.child("aug", i, j), hflip=hflip))
    group_of = np.repeat(np.arange(spec.L), spec.M)
    return GroupedBatch(items=items, group_of=group_of, spec=spec, source_ids=[s.id for s in sources])


def build_grouped_batch(pool: Sequence[Sample], spec: BatchSpec, rng: Rng, hflip: bool = True) -> GroupedBatch:
    """Draw ``L`` distinct sources and expand each into ``M`` augmentations."""
    if len(pool) < spec.L:
        raise DataError(f"pool of {len(pool)} samples is smaller than L={spec.L}")
    picks = rng.generator.choice(len(pool), size=spec.L, replace=False)
    return _expand([pool[int(i)] for i in picks], spec, rng, hflip)


def epoch_batches(pool: Sequence[Sample], spec: BatchSpec, rng: Rng, hflip: bool = True) -> Iterator[GroupedBatch]:
    """One pass over ``pool`` in a random order; the incomplete tail is dropped.

    Batch ``b`` draws its augmentations from the stream ``rng.child("batch", b)``.
    """
    if len(pool) < spec.L:
        raise DataError(f"pool of {len(pool)} samples is smaller than L={spec.L}")
    order = rng.child("order").permutation(len(pool))
    for b in range(len(pool) // spec.L):
        chunk = order[b * spec.L : (b + 1) * spec.L]
        yield _expand([pool[int(i)] for i in chunk], spec, rng.child("batch", b), hflip)


def prefetch(batches: Iterable, depth: int = 2) -> Iterator:
    """Produce items on a worker thread through a bounded queue, preserving order."""
    if depth <= 0:
        yield from batches
        return
    q: "queue.Queue" = queue.Queue(maxsize=depth)
    done = object()
    failure: list = []
    stop = threading.Event()

    def work():
        try:
            for item in batches:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # re-raised on the consumer side
            failure.append(exc)
        q.put(done)

    worker = threading.Thread(target=work, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            yield item
        if failure:
            raise failure[0]
    finally:
        stop.set()
