"""Measurement operators and Gaussian log-likelihood gradients.

All samplers and optimizers consume the gradient of the *log*-likelihood,
i.e. the ascent direction ``-(1/eta^2) J^T (A(x) - y)``.
"""
from __future__ import annotations

import numpy as np

from .core import RngStream


class InpaintingOp:
    """Pixel mask, 1 = observed. ``A x`` is the zero-filled masked image, so
    ``A^T A = diag(mask)`` and ``A^T = A``."""

    name = "inpaint"

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim != 2:
            raise ValueError("mask must be a 2-D grid")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        if mask.sum() < 1:
            raise ValueError("mask must observe at least one pixel")
        self.mask = mask

    @classmethod
    def center_crop(cls, shape=(64, 64), hole=(32, 32)) -> "InpaintingOp":
        H, W = shape
        h, w = hole
        top, left = (H - h) // 2, (W - w) // 2
        return cls.from_rect(shape, top, left, h, w)

    @classmethod
    def from_rect(cls, shape, top: int, left: int, height: int, width: int) -> "InpaintingOp":
        mask = np.ones(shape)
        mask[top:top + height, left:left + width] = 0.0
        return cls(mask)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != self.mask.shape:
            raise ValueError(f"grid shape {x.shape[-2:]} does not match mask {self.mask.shape}")
        return x

    def apply(self, x) -> np.ndarray:
        return self.mask * self._check(x)

    def adjoint(self, y) -> np.ndarray:
        return self.mask * self._check(y)

    def vjp(self, x, g) -> np.ndarray:
        return self.adjoint(g)

    def to_dict(self) -> dict:
        return {"operator": self.name, "observed_pixels": int(self.mask.sum())}


def inpaint_apply(op: InpaintingOp, x):
    return op.apply(x)


def inpaint_adjoint(op: InpaintingOp, y):
    return op.adjoint(y)


class MagnitudeRetrievalOp:
    """``A(x) = Re F^-1( F(x) / max(|F(x)|, eps) )``.

    ``F`` is the unnormalised DFT and ``F^-1`` its inverse (carrying 1/N), so
    a delta maps to itself and ``A(x)`` has a unit-modulus ``F`` spectrum.
    ``A`` is invariant to positive rescaling of ``x``.
    """

    name = "magnitude"

    def __init__(self, epsilon: float = 1e-12):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.epsilon = float(epsilon)

    def _spectrum(self, x):
        u = np.fft.fft2(np.asarray(x, dtype=np.float64))
        m = np.maximum(np.abs(u), self.epsilon)
        return u, m

    def apply(self, x) -> np.ndarray:
        u, m = self._spectrum(x)
        return np.fft.ifft2(u / m).real

    def vjp(self, x, g) -> np.ndarray:
        """``J(x)^T g`` for a real cotangent ``g``."""
        u, m = self._spectrum(x)
        N = u.shape[-1] * u.shape[-2]
        gv = np.fft.fft2(np.asarray(g, dtype=np.float64)) / N
        above = np.abs(u) >= self.epsilon
        radial = np.where(above, (np.conj(gv) * u).real / (m * m), 0.0)
        gu = (gv - u * radial) / m
        return (np.fft.ifft2(gu) * N).real

    def to_dict(self) -> dict:
        return {"operator": self.name, "epsilon": self.epsilon}


def magnitude_apply(op: MagnitudeRetrievalOp, x):
    return op.apply(x)


class MeasurementModel:
    """Forward operator plus white Gaussian noise of variance ``eta2``.

    ``eta2 = inf`` is allowed and means an uninformative likelihood.
    """

    def __init__(self, operator, noise_variance: float):
        if not noise_variance > 0:
            raise ValueError(f"noise variance must be positive, got {noise_variance}")
        self.operator = operator
        self.noise_variance = float(noise_variance)

    def apply(self, x):
        return self.operator.apply(x)

    def log_likelihood(self, x, y) -> float:
        """Gaussian log-likelihood up to its additive constant."""
        if np.isinf(self.noise_variance):
            return 0.0
        r = self.apply(x) - np.asarray(y)
        return -0.5 * float(np.sum(r * r)) / self.noise_variance

    def loglik_grad(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if np.isinf(self.noise_variance):
            return np.zeros_like(x)
        r = self.apply(x) - np.asarray(y)
        return -self.operator.vjp(x, r) / self.noise_variance

    def simulate(self, x, rng: RngStream, noise_variance: float | None = None) -> np.ndarray:
        """Draw ``y = A(x) + N(0, eta^2 I)``; for inpainting the noise only
        lands on observed pixels."""
        v = self.noise_variance if noise_variance is None else noise_variance
        clean = self.apply(x)
        if v == 0:
            return clean
        y = clean + np.sqrt(v) * rng.normal(clean.shape)
        if isinstance(self.operator, InpaintingOp):
            y = self.operator.apply(y)
        return y

    def to_dict(self) -> dict:
        return {**self.operator.to_dict(), "noise_variance": self.noise_variance}


def loglik_grad_linear(model: MeasurementModel, x, y):
    return model.loglik_grad(x, y)


def loglik_grad_magnitude(model: MeasurementModel, x, y):
    return model.loglik_grad(x, y)


def simulate_measurement(model: MeasurementModel, x, rng: RngStream, noise_variance=None):
    return model.simulate(x, rng, noise_variance)
