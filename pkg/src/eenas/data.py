"""Desk-scale datasets: a procedural image generator and the CIFAR-10 binary format."""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, MalformedFileError

log = logging.getLogger(__name__)

CIFAR_SIZE = 32


@dataclass(frozen=True)
class Dataset:
    """Images ``(N, C, H, W)`` in [0, 1] with integer labels in ``[0, num_classes)``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if images.ndim != 4:
            raise ContractViolation(f"images must be N x C x H x W, got shape {images.shape}")
        if len(labels) == 0 or images.shape[0] == 0:
            raise ContractViolation("dataset must contain at least one sample")
        if labels.shape != (images.shape[0],):
            raise ContractViolation(f"{len(labels)} labels for {images.shape[0]} images")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ContractViolation(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, provenance=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, provenance or self.provenance)


def generate_synthetic(seed, n_per_class, classes=10, size=16, noise=0.3):
    """Seeded procedural 10-class images.

    Class ``c`` is a sinusoidal texture with orientation ``pi * (c % 5) / 5`` and
    frequency ``2 * (1 + c // 5)`` cycles per image, plus a gradient
    perpendicular to the texture.  Phase and gradient sign are random per
    sample, so the class means are flat and a linear read-out of pixels cannot
    separate classes, while oriented conv filters can.  Pixels are quantized to
    8 bits.
    """
    if n_per_class < 1:
        raise ContractViolation("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    n = n_per_class * classes
    labels = np.repeat(np.arange(classes), n_per_class)
    images = np.empty((n, 3, size, size))
    phases = rng.uniform(0, 2 * np.pi, size=n)
    signs = rng.choice([-1.0, 1.0], size=n)
    amps = rng.uniform(0.15, 0.3, size=n)
    for i, c in enumerate(labels):
        angle = np.pi * (c % 5) / 5
        freq = 2.0 * (1 + c // 5)
        proj = xx * np.cos(angle) + yy * np.sin(angle)
        perp = -xx * np.sin(angle) + yy * np.cos(angle)
        grad = signs[i] * 0.3 * (perp - perp.mean())
        for ch in range(3):
            tex = amps[i] * np.sin(2 * np.pi * freq * proj + phases[i] + ch * 2 * np.pi / 3)
            images[i, ch] = 0.5 + tex + grad
    if noise > 0:
        images += rng.normal(0.0, noise, size=images.shape)
    images = np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], classes, f"synthetic(seed={seed},n={n_per_class},size={size},noise={noise})")


def _record_len(size):
    return 1 + 3 * size * size


def load_cifar10_binary(path, size=CIFAR_SIZE, num_classes=10):
    """Parse ``label byte + 3*size*size channel-planar pixel bytes`` records."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_cifar10_bytes(blob, size, num_classes, provenance=f"cifar10-binary:{path}")


def parse_cifar10_bytes(blob, size=CIFAR_SIZE, num_classes=10, provenance="cifar10-binary"):
    rec = _record_len(size)
    if len(blob) % rec:
        offset = (len(blob) // rec) * rec
        raise MalformedFileError(
            f"truncated record at byte offset {offset}: {len(blob) - offset} of {rec} bytes", offset=offset
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        offset = int(bad[0]) * rec
        raise MalformedFileError(f"label {labels[bad[0]]} >= {num_classes} at byte offset {offset}", offset=offset)
    images = raw[:, 1:].reshape(-1, 3, size, size).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes, provenance)


def write_cifar10_binary(ds, path):
    """Write ``ds`` in the same record layout (any square 3-channel resolution)."""
    c, h, w = ds.image_shape
    if c != 3 or h != w:
        raise ContractViolation(f"binary export needs 3 x S x S images, got {ds.image_shape}")
    if ds.num_classes > 256:
        raise ContractViolation("labels must fit in one byte")
    pixels = np.round(ds.images * 255.0).clip(0, 255).astype(np.uint8).reshape(len(ds), -1)
    out = np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1)
    with open(path, "wb") as fh:
        fh.write(out.tobytes())


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    support: Dataset
    batch_size: int
    seed: int

    def batches(self, split="train", epoch=0):
        ds = getattr(self, split) if isinstance(split, str) else split
        return iter_batches(ds, self.batch_size, self.seed, epoch)


def iter_batches(ds, batch_size, seed, epoch=0, shuffle=True):
    n = len(ds)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def split_and_batch(ds, fractions=(0.8, 0.2), batch_size=64, seed=0, support_per_class=10):
    """Stratified train/validation split plus a class-balanced support set from train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ContractViolation(f"fractions must be two non-negative values summing to 1, got {fractions}")
    if fractions[1] == 0:
        raise ContractViolation("a non-empty validation split is required")
    if fractions[0] == 0:
        raise ContractViolation("a non-empty training split is required")
    rng = np.random.default_rng(seed)
    train_idx, val_idx, support_idx = [], [], []
    for c in range(ds.num_classes):
        members = np.nonzero(ds.labels == c)[0]
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        n_train = int(round(fractions[0] * members.size))
        n_train = min(max(n_train, 1), members.size - 1) if members.size > 1 else members.size
        tr, va = members[:n_train], members[n_train:]
        train_idx.append(tr)
        val_idx.append(va)
        if support_per_class:
            if tr.size < support_per_class:
                raise ContractViolation(
                    f"class {c} has {tr.size} training samples, fewer than support size {support_per_class}"
                )
            support_idx.append(np.sort(tr[rng.permutation(tr.size)[:support_per_class]]))
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    if val_idx.size == 0:
        raise ContractViolation("validation split came out empty")
    support = ds.subset(np.concatenate(support_idx), "support") if support_idx else None
    return Splits(ds.subset(train_idx, "train"), ds.subset(val_idx, "val"), support, int(batch_size), int(seed))
