"""Synthetic "Gaussian blobs" image distribution.

IID standard-normal noise is smoothed by repeated box averaging and then
thresholded to a binary {0, 1} image.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .core import RngStream


@dataclass(frozen=True)
class BlobsConfig:
    height: int = 64
    width: int = 64
    rounds: int = 10
    kernel_size: int = 3
    threshold: float = 0.0
    boundary: str = "circular"

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("blob images need positive height and width")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd positive integer")
        if self.boundary not in ("circular", "zero_pad"):
            raise ValueError(f"unknown boundary {self.boundary!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth(field: np.ndarray, cfg: BlobsConfig) -> np.ndarray:
    mode = "wrap" if cfg.boundary == "circular" else "constant"
    axes = (field.ndim - 2, field.ndim - 1)
    for _ in range(cfg.rounds):
        field = uniform_filter(field, size=cfg.kernel_size, mode=mode, cval=0.0, axes=axes)
    return field


def sample_blob(cfg: BlobsConfig, rng: RngStream) -> np.ndarray:
    field = rng.normal((cfg.height, cfg.width))
    return (_smooth(field, cfg) > cfg.threshold).astype(np.float64)


def sample_batch(cfg: BlobsConfig, rng: RngStream, batch_size: int) -> np.ndarray:
    """Stack of ``batch_size`` independent blob images, shape (B, H, W).

    Draws are made image by image, so ``sample_batch(cfg, rng, 1)[0]`` equals
    ``sample_blob(cfg, rng)`` for an identically keyed stream.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    field = np.stack([rng.normal((cfg.height, cfg.width)) for _ in range(batch_size)])
    return (_smooth(field, cfg) > cfg.threshold).astype(np.float64)
