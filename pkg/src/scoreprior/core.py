"""Numeric substrate: grids, unitary 2-D DFT, convolutions, seeded streams.

Grids are plain 2-D ``float64`` numpy arrays (complex128 for spectra).
"""
from __future__ import annotations

import numpy as np


def as_grid(g, name: str = "grid") -> np.ndarray:
    """Validate and return ``g`` as a finite 2-D float64 array."""
    a = np.asarray(g, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D grid, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def dft2(g) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes."""
    g = np.asarray(g)
    if g.ndim < 2 or min(g.shape[-2:]) < 1:
        raise ValueError(f"dft2 needs at least a 2-D input, got shape {g.shape}")
    return np.fft.fft2(g, norm="ortho")


def idft2(G) -> np.ndarray:
    """Inverse of :func:`dft2`."""
    G = np.asarray(G)
    if G.ndim < 2 or min(G.shape[-2:]) < 1:
        raise ValueError(f"idft2 needs at least a 2-D input, got shape {G.shape}")
    return np.fft.ifft2(G, norm="ortho")


def _check_kernel(kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel dimensions must be odd, got {k.shape}")
    return k


def conv2_same(g, kernel) -> np.ndarray:
    """Same-size cross-correlation with zero padding (CNN convention).

    ``out[i, j] = sum_{a, b} g[i + a - ca, j + b - cb] * kernel[a, b]`` where
    ``(ca, cb)`` is the kernel centre. Works on leading batch axes too.
    """
    k = _check_kernel(kernel)
    g = np.asarray(g, dtype=np.float64)
    kh, kw = k.shape
    ch, cw = kh // 2, kw // 2
    H, W = g.shape[-2:]
    pad = [(0, 0)] * (g.ndim - 2) + [(ch, ch), (cw, cw)]
    gp = np.pad(g, pad)
    out = np.zeros_like(g)
    for a in range(kh):
        for b in range(kw):
            if k[a, b] != 0.0:
                out += k[a, b] * gp[..., a:a + H, b:b + W]
    return out


def conv2_same_adjoint(h, kernel) -> np.ndarray:
    """Adjoint of :func:`conv2_same` for a fixed kernel."""
    k = _check_kernel(kernel)
    return conv2_same(h, k[::-1, ::-1])


def conv2_circular(g, kernel) -> np.ndarray:
    """Same-size cross-correlation with periodic boundary."""
    k = _check_kernel(kernel)
    g = np.asarray(g, dtype=np.float64)
    kh, kw = k.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros_like(g)
    for a in range(kh):
        for b in range(kw):
            if k[a, b] != 0.0:
                out += k[a, b] * np.roll(g, (ch - a, cw - b), axis=(-2, -1))
    return out


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox-4x64 bit generator: the key is the pair of 64-bit
    words, so distinct stream ids give independent, non-overlapping streams.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def draw_gaussian(rng: RngStream, shape, mean: float = 0.0, variance: float = 1.0) -> np.ndarray:
    """IID normal grid with the given mean and variance."""
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    if variance == 0:
        return np.full(shape, float(mean))
    return mean + np.sqrt(variance) * rng.normal(shape)
