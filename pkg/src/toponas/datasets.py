"""Desk-scale data sources: seeded synthetic blobs and CIFAR-10 binary files.

Synthetic blobs give each class a fixed per-channel mean direction plus
pixel noise, so global average pooling keeps the classes linearly
separable.  The CIFAR-10 loader reads the standard 3073-byte records
(1 label byte + 3072 pixel bytes) and normalizes with fixed per-channel
constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float64)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float64)
CIFAR_RECORD = 3073


class DataError(Exception):
    """Missing, truncated or malformed dataset input."""


@dataclass
class DatasetSpec:
    source: str = "synthetic-blobs"  # synthetic-blobs | cifar10-binary
    path: str = ""
    image_size: int = 16
    channels: int = 3
    classes: int = 4
    n_train: int = 256
    n_test: int = 64
    noise: float = 0.3
    split_seed: int = 0
    train_fraction: float = 0.5
    val_fraction: float = 0.5
    downscale: int = 1

    def validate(self) -> None:
        if self.source not in ("synthetic-blobs", "cifar10-binary"):
            raise DataError(f"unknown dataset source {self.source!r}")
        if self.train_fraction + self.val_fraction > 1.0 + 1e-9:
            raise DataError("train/val fractions must sum to at most 1")
        if self.downscale < 1:
            raise DataError("downscale must be a positive integer")


def make_synthetic_blobs(spec: DatasetSpec, n: int, seed: int):
    """Images with class-dependent channel means; fully determined by the seed."""
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((spec.classes, spec.channels))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    labels = rng.integers(0, spec.classes, size=n)
    shape = (n, spec.channels, spec.image_size, spec.image_size)
    x = rng.standard_normal(shape) * spec.noise
    x += protos[labels][:, :, None, None]
    return x.astype(np.float64), labels.astype(np.int64)


def load_cifar10_binary(path: str | Path, downscale: int = 1):
    """Parse CIFAR-10 batch files (one file or every *.bin under a directory)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.bin"))
        if not files:
            raise DataError(f"no .bin files under {path}")
    elif path.exists():
        files = [path]
    else:
        raise DataError(f"dataset path not found: {path}")
    images = []
    labels = []
    for f in files:
        raw = f.read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise DataError(f"{f} is not a sequence of {CIFAR_RECORD}-byte records")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(arr[:, 0].astype(np.int64))
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32))
    x = np.concatenate(images).astype(np.float64) / 255.0
    y = np.concatenate(labels)
    if y.max() > 9:
        raise DataError("labels out of range for CIFAR-10")
    x = (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]
    if downscale > 1:
        if 32 % downscale != 0:
            raise DataError("downscale must divide the 32-pixel image size")
        n, c, h, w = x.shape
        x = x.reshape(n, c, h // downscale, downscale, w // downscale, downscale)
        x = x.mean(axis=(3, 5))
    return x, y


class BatchStream:
    """Deterministically shuffled mini-batches over a fixed array split."""

    def __init__(self, x: np.ndarray, y: np.ndarray, seed: int, tag: str):
        if len(x) != len(y):
            raise DataError("images and labels disagree in length")
        self.x = x
        self.y = y
        self.seed = seed
        self.tag = tag

    def __len__(self):
        return len(self.y)

    def batches_per_epoch(self, batch_size: int) -> int:
        return len(self.y) // batch_size

    def epoch_batches(self, epoch: int, batch_size: int, dtype=np.float32):
        """Yield (images, labels, split_tag); order depends only on seed+epoch."""
        rng = np.random.default_rng((self.seed, epoch))
        order = rng.permutation(len(self.y))
        nb = self.batches_per_epoch(batch_size)
        for b in range(nb):
            idx = order[b * batch_size:(b + 1) * batch_size]
            yield self.x[idx].astype(dtype), self.y[idx], self.tag


@dataclass
class DataBundle:
    train: BatchStream
    val: BatchStream
    test: BatchStream


def load_dataset(spec: DatasetSpec) -> DataBundle:
    """Materialize train/val/test streams with a seeded disjoint split."""
    spec.validate()
    if spec.source == "synthetic-blobs":
        x, y = make_synthetic_blobs(spec, spec.n_train, seed=spec.split_seed)
        xt, yt = make_synthetic_blobs(spec, spec.n_test, seed=spec.split_seed + 1)
    else:
        x, y = load_cifar10_binary(spec.path, downscale=spec.downscale)
        xt, yt = x[-spec.n_test:], y[-spec.n_test:]
        x, y = x[:len(x) - spec.n_test], y[:len(y) - spec.n_test]
        if spec.n_train and spec.n_train < len(x):
            x, y = x[:spec.n_train], y[:spec.n_train]
    rng = np.random.default_rng(spec.split_seed)
    order = rng.permutation(len(y))
    n_tr = int(len(y) * spec.train_fraction)
    n_va = int(len(y) * spec.val_fraction)
    tr_idx = order[:n_tr]
    va_idx = order[n_tr:n_tr + n_va]
    return DataBundle(
        train=BatchStream(x[tr_idx], y[tr_idx], seed=spec.split_seed * 3 + 1,
                          tag="train"),
        val=BatchStream(x[va_idx], y[va_idx], seed=spec.split_seed * 3 + 2,
                        tag="val"),
        test=BatchStream(xt, yt, seed=spec.split_seed * 3 + 3, tag="test"),
    )


def parse_dataset_arg(arg: str) -> DatasetSpec:
    """Parse CLI dataset descriptors like ``synthetic:classes=4,size=16,n=256``
    or ``cifar10:path=data/,downscale=2``."""
    kind, _, rest = arg.partition(":")
    kv = {}
    if rest:
        for part in rest.split(","):
            if not part:
                continue
            key, _, value = part.partition("=")
            if not value:
                raise DataError(f"dataset option {part!r} needs key=value")
            kv[key.strip()] = value.strip()
    if kind in ("synthetic", "synthetic-blobs"):
        spec = DatasetSpec(
            source="synthetic-blobs",
            classes=int(kv.pop("classes", 4)),
            image_size=int(kv.pop("size", 16)),
            n_train=int(kv.pop("n", 256)),
            n_test=int(kv.pop("n_test", 64)),
            noise=float(kv.pop("noise", 0.3)),
            split_seed=int(kv.pop("seed", 0)),
        )
    elif kind in ("cifar10", "cifar10-binary"):
        if "path" not in kv:
            raise DataError("cifar10 dataset needs path=<dir or file>")
        spec = DatasetSpec(
            source="cifar10-binary",
            path=kv.pop("path"),
            n_train=int(kv.pop("n", 0)),
            n_test=int(kv.pop("n_test", 64)),
            downscale=int(kv.pop("downscale", 1)),
            split_seed=int(kv.pop("seed", 0)),
            classes=10,
        )
    else:
        raise DataError(f"unknown dataset kind {kind!r}")
    if kv:
        raise DataError(f"unknown dataset options: {', '.join(sorted(kv))}")
    return spec
