"""Image-quality metrics: MSE, PSNR and measurement-domain data fidelity."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class MetricRecord:
    name: str
    value: float
    units: str
    run_id: str = ""
    image_id: str = ""


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(reference, estimate, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` for a perfect match."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(reference, estimate)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def data_fidelity(meas, reconstruction, y, peak: float = 1.0) -> float:
    """PSNR of ``A(reconstruction)`` against ``y``.

    For masked operators only observed pixels count.
    """
    pred = meas.apply(reconstruction)
    y = np.asarray(y, dtype=np.float64)
    mask = getattr(meas.operator, "mask", None)
    if mask is not None:
        keep = mask.astype(bool)
        return psnr(y[..., keep], pred[..., keep], peak)
    return psnr(y, pred, peak)
