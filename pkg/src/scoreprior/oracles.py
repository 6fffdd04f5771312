"""Closed-form MMSE denoisers for Gaussian and Gaussian-mixture priors.

Both act on a single (H, W) grid or a (B, H, W) batch and are used as exact
references for the score, Langevin and reconstruction code.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


class IdentityDenoiser:
    """``r(z) = z``; its score is identically zero."""

    def denoise(self, z):
        return np.array(z, dtype=np.float64, copy=True)


class GaussianPriorOracle:
    """Prior X ~ N(mean, cov) on H x W grids.

    ``cov`` may be a scalar (isotropic), a grid of per-pixel variances
    (diagonal) or a dense (N, N) matrix over row-major pixels.
    """

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        if self.mean.ndim != 2:
            raise ValueError("mean must be an (H, W) grid")
        n = self.mean.size
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            if cov < 0:
                raise ValueError("variance must be non-negative")
            self.kind = "iso"
        elif cov.shape == self.mean.shape:
            if np.any(cov < 0):
                raise ValueError("variances must be non-negative")
            self.kind = "diag"
        elif cov.shape == (n, n):
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
                raise ValueError("covariance must be symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
                raise ValueError("covariance must be positive semidefinite")
            self.kind = "dense"
        else:
            raise ValueError(f"covariance shape {cov.shape} does not fit a {self.mean.shape} grid")
        self.cov = cov

    def _solve_shifted(self, r: np.ndarray, sigma2: float) -> np.ndarray:
        """(cov + sigma2 I)^-1 r, batched over leading axes."""
        if self.kind in ("iso", "diag"):
            return r / (self.cov + sigma2)
        flat = r.reshape(-1, self.mean.size).T
        A = self.cov + sigma2 * np.eye(self.mean.size)
        sol = np.linalg.solve(A, flat)
        return sol.T.reshape(r.shape)

    def _apply_cov(self, r: np.ndarray) -> np.ndarray:
        if self.kind in ("iso", "diag"):
            return self.cov * r
        flat = r.reshape(-1, self.mean.size)
        return (flat @ self.cov).reshape(r.shape)

    def denoise_at(self, z, sigma2: float) -> np.ndarray:
        """E[X | X + N(0, sigma2 I) = z]."""
        if sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        z = np.asarray(z, dtype=np.float64)
        return self.mean + self._apply_cov(self._solve_shifted(z - self.mean, sigma2))

    def noisy_score(self, z, sigma2: float) -> np.ndarray:
        """Exact score of the noisy marginal: -(cov + sigma2 I)^-1 (z - mean)."""
        z = np.asarray(z, dtype=np.float64)
        return -self._solve_shifted(z - self.mean, sigma2)

    def at_noise(self, sigma2: float) -> "BoundDenoiser":
        return BoundDenoiser(self, sigma2)


class GmmPriorOracle:
    """Isotropic Gaussian mixture prior sum_k w_k N(mean_k, s_k^2 I)."""

    def __init__(self, weights, means, variances):
        w = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.variances = np.asarray(variances, dtype=np.float64)
        if self.means.ndim != 3 or len(w) != len(self.means) or len(self.variances) != len(w):
            raise ValueError("need one weight, (H, W) mean and variance per component")
        if np.any(w <= 0) or np.any(self.variances <= 0):
            raise ValueError("weights and variances must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w.sum()}")
        self.weights = w

    def _responsibilities(self, z, sigma2):
        z = np.asarray(z, dtype=np.float64)
        n = self.means[0].size
        tot = self.variances + sigma2
        d2 = ((z[..., None, :, :] - self.means) ** 2).sum(axis=(-2, -1))
        logp = np.log(self.weights) - 0.5 * n * np.log(2 * np.pi * tot) - 0.5 * d2 / tot
        return np.exp(logp - logsumexp(logp, axis=-1, keepdims=True)), z, tot

    def denoise_at(self, z, sigma2: float) -> np.ndarray:
        if sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        resp, z, tot = self._responsibilities(z, sigma2)
        shrink = (self.variances / tot)[:, None, None]
        per_comp = self.means + shrink * (z[..., None, :, :] - self.means)
        return np.einsum("...k,...khw->...hw", resp, per_comp)

    def noisy_score(self, z, sigma2: float) -> np.ndarray:
        resp, z, tot = self._responsibilities(z, sigma2)
        per_comp = -(z[..., None, :, :] - self.means) / tot[:, None, None]
        return np.einsum("...k,...khw->...hw", resp, per_comp)

    def at_noise(self, sigma2: float) -> "BoundDenoiser":
        return BoundDenoiser(self, sigma2)


class BoundDenoiser:
    """An oracle fixed at one noise variance, exposing ``denoise(z)``."""

    def __init__(self, oracle, noise_variance: float):
        if noise_variance <= 0:
            raise ValueError("noise_variance must be positive")
        self.oracle = oracle
        self.noise_variance = float(noise_variance)

    def denoise(self, z):
        return self.oracle.denoise_at(z, self.noise_variance)


def gaussian_oracle_denoise(oracle: GaussianPriorOracle, z, sigma2: float) -> np.ndarray:
    return oracle.denoise_at(z, sigma2)


def gmm_oracle_denoise(oracle: GmmPriorOracle, z, sigma2: float) -> np.ndarray:
    return oracle.denoise_at(z, sigma2)
