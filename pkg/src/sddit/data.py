"""Tiny labelled datasets: a synthetic two-texture generator and directories of images."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np
import torch
from PIL import Image

from .config import DatasetConfig

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm"}


def stream_seed(seed: int, name: str) -> int:
    """Stable 63-bit seed for a named random stream."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


class LatentAdapter(Protocol):
    def encode(self, x: torch.Tensor) -> torch.Tensor: ...

    def decode(self, z: torch.Tensor) -> torch.Tensor: ...


class IdentityAdapter:
    """Model space == pixel space in [-1, 1]."""

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


class ArrayDataset:
    """In-memory ``(x0, label)`` pairs with a deterministic shuffle per ``(seed, epoch)``."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, class_names: list[str], seed: int = 0):
        if len(images) == 0:
            raise ValueError("dataset is empty")
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        self.images = images
        self.labels = labels.long()
        self.class_names = class_names
        self.seed = seed

    def __len__(self) -> int:
        return len(self.images)

    def steps_per_epoch(self, batch_size: int) -> int:
        return max(1, len(self) // batch_size)

    def permutation(self, epoch: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(stream_seed(self.seed, f"shuffle/{epoch}"))
        return torch.randperm(len(self), generator=g)

    def batch_at(self, step: int, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        """The batch consumed at global ``step``; depends only on (seed, step)."""
        spe = self.steps_per_epoch(batch_size)
        epoch, j = divmod(step, spe)
        perm = self.permutation(epoch)
        idx = torch.arange(j * batch_size, (j + 1) * batch_size) % len(self)
        sel = perm[idx]
        return self.images[sel], self.labels[sel]

    def iter_epoch(self, epoch: int, batch_size: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        spe = self.steps_per_epoch(batch_size)
        for j in range(spe):
            yield self.batch_at(epoch * spe + j, batch_size)

    def class_means(self) -> torch.Tensor:
        return torch.stack([self.images[self.labels == c].mean(0) for c in range(len(self.class_names))])


def stripe_pattern(size: int = 8, horizontal: bool = True, period: int = 4) -> torch.Tensor:
    """+1/-1 stripes, ``period`` pixels per cycle, starting with +1 at index 0."""
    idx = torch.arange(size)
    wave = torch.where((idx % period) < period // 2, 1.0, -1.0)
    img = wave.reshape(-1, 1).expand(size, size) if horizontal else wave.reshape(1, -1).expand(size, size)
    return img.clone()


def two_texture(n_per_class: int, seed: int = 0, size: int = 8, noise_std: float = 0.1) -> ArrayDataset:
    """Class 0: horizontal stripes, class 1: vertical stripes.

    Each image is ``a * pattern + noise`` with ``a ~ U(0.5, 0.9)`` and Gaussian
    pixel noise, clipped to [-1, 1]. Before clipping the class mean is
    ``0.7 * pattern``.
    """
    g = torch.Generator().manual_seed(stream_seed(seed, "two_texture"))
    images, labels = [], []
    for label, horizontal in enumerate((True, False)):
        pattern = stripe_pattern(size, horizontal)
        amp = 0.5 + 0.4 * torch.rand(n_per_class, 1, 1, 1, generator=g)
        noise = noise_std * torch.randn(n_per_class, 1, size, size, generator=g)
        images.append((amp * pattern + noise).clamp(-1, 1))
        labels.append(torch.full((n_per_class,), label))
    return ArrayDataset(torch.cat(images), torch.cat(labels), ["horizontal", "vertical"], seed)


def to_model_range(pixels: np.ndarray) -> np.ndarray:
    """8-bit ``[0, 255]`` -> ``[-1, 1]``."""
    return pixels.astype(np.float32) / 127.5 - 1.0


def load_image_dir(root: str | Path, classes: list[str] | None = None, seed: int = 0) -> ArrayDataset:
    """``root/<class>/<image>``; class ids follow sorted directory names (or ``classes``)."""
    root = Path(root)
    found = sorted(p.name for p in root.iterdir() if p.is_dir())
    if classes is None:
        classes = found
    else:
        unknown = [c for c in found if c not in classes]
        if unknown:
            raise ValueError(f"unknown class directory {unknown[0]!r} under {root}")
        missing = [c for c in classes if c not in found]
        if missing:
            raise ValueError(f"class directory {missing[0]!r} not found under {root}")
    images, labels, shape = [], [], None
    for label, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            arr = np.asarray(Image.open(f))
            if arr.ndim == 2:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"{f}: image shape {arr.shape} differs from {shape}")
            images.append(to_model_range(arr))
            labels.append(label)
    if not images:
        raise ValueError(f"no images found under {root}")
    return ArrayDataset(torch.from_numpy(np.stack(images)), torch.tensor(labels), list(classes), seed)


def load_dataset(spec: DatasetConfig, seed: int = 0, image_size: int = 8) -> ArrayDataset:
    if spec.kind == "two_texture":
        return two_texture(spec.n_per_class, seed, image_size, spec.noise_std)
    if spec.kind == "directory":
        return load_image_dir(spec.path, spec.classes, seed)
    raise ValueError(f"unknown dataset kind {spec.kind!r}")
