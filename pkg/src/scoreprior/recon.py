"""Score-based MAP, posterior Langevin sampling and MMSE estimation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import RngStream
from .forward import InpaintingOp, MeasurementModel
from .metrics import psnr
from .score import DivergenceError, ScoreModel, run_langevin

DIVERGENCE_BOUND = 1e3


@dataclass
class MapConfig:
    steps: int = 500
    step_size: float = 0.1
    init: str = "adjoint"           # "adjoint" | "random"
    init_mean: float = 0.5
    init_variance: float | None = None  # None -> prior noise variance
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.step_size <= 0:
            raise ValueError("MAP needs steps >= 1 and a positive step size")
        if self.init not in ("adjoint", "random"):
            raise ValueError(f"unknown MAP init {self.init!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class PosteriorConfig:
    chains: int = 500
    steps_per_chain: int = 500
    tau: float = 1e-3
    init: str = "random"
    init_mean: float = 0.5
    init_variance: float | None = None
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        if self.chains < 1 or self.steps_per_chain < 1 or self.tau <= 0:
            raise ValueError("posterior sampling needs chains >= 1, steps >= 1, tau > 0")
        if self.init not in ("adjoint", "random"):
            raise ValueError(f"unknown posterior init {self.init!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class MapResult:
    x: np.ndarray                 # (H, W), or (R, H, W) for restarts
    grad_norms: np.ndarray        # (steps,) or (steps, R)


@dataclass
class ChainResult:
    samples: np.ndarray           # (n_ok, H, W)
    pixel_mean: np.ndarray
    pixel_std: np.ndarray
    per_sample_psnr: list = field(default_factory=list)
    failed_chains: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


def _initial_stack(meas: MeasurementModel, y, n, init, mean, variance, streams):
    y = np.asarray(y, dtype=np.float64)
    if init == "adjoint":
        op = meas.operator
        x0 = op.adjoint(y) if isinstance(op, InpaintingOp) else y.copy()
        return np.repeat(x0[None], n, axis=0)
    return np.stack([mean + np.sqrt(variance) * s.normal(y.shape) if variance > 0
                     else np.full(y.shape, float(mean)) for s in streams])


def _map_batch(score_model: ScoreModel, meas: MeasurementModel, y, x: np.ndarray,
               steps: int, step_size: float) -> MapResult:
    y = np.asarray(y, dtype=np.float64)
    norms = np.empty((steps, x.shape[0]))
    for k in range(steps):
        # descent on -log f(y|x) - log f_Z(x)
        grad = -meas.loglik_grad(x, y) - score_model.score(x)
        norms[k] = np.sqrt((grad**2).sum(axis=(1, 2)))
        x = x - step_size * grad
        if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_BOUND:
            raise DivergenceError(
                f"MAP iterate diverged at step {k} (max |x| = {np.nanmax(np.abs(x)):.3g}, "
                f"last gradient norm {norms[k].max():.3g})", step=k)
    return MapResult(x, norms)


def map_reconstruct(score_model: ScoreModel, meas: MeasurementModel, y, cfg: MapConfig,
                    init: np.ndarray | None = None) -> MapResult:
    """Fixed-step gradient descent on the MAP objective.

    Only the gradient of the objective is available, so the returned trace is
    the per-step gradient norm. ``init`` overrides ``cfg.init``.
    """
    if init is None:
        variance = score_model.noise_variance if cfg.init_variance is None else cfg.init_variance
        x0 = _initial_stack(meas, y, 1, cfg.init, cfg.init_mean, variance,
                            [RngStream(cfg.seed, cfg.stream_id)])
    else:
        x0 = np.asarray(init, dtype=np.float64)[None].copy()
    res = _map_batch(score_model, meas, y, x0, cfg.steps, cfg.step_size)
    return MapResult(res.x[0], res.grad_norms[:, 0])


def map_restarts(score_model: ScoreModel, meas: MeasurementModel, y, cfg: MapConfig,
                 restarts: int) -> MapResult:
    """``restarts`` MAP runs from random inits on streams ``stream_id + i``."""
    variance = score_model.noise_variance if cfg.init_variance is None else cfg.init_variance
    streams = [RngStream(cfg.seed, cfg.stream_id + i) for i in range(restarts)]
    x0 = _initial_stack(meas, y, restarts, "random", cfg.init_mean, variance, streams)
    return _map_batch(score_model, meas, y, x0, cfg.steps, cfg.step_size)


def posterior_langevin(score_model: ScoreModel, meas: MeasurementModel, y, cfg: PosteriorConfig,
                       ground_truth=None, min_ok_fraction: float = 0.9) -> ChainResult:
    """Independent posterior chains; each chain's final iterate is one sample.

    ``x <- x + tau grad log f(y|x) + (tau / sigma^2)(r(x) - x) + sqrt(2 tau) E``
    """
    y = np.asarray(y, dtype=np.float64)
    variance = score_model.noise_variance if cfg.init_variance is None else cfg.init_variance
    streams = [RngStream(cfg.seed, cfg.stream_id + i) for i in range(cfg.chains)]
    x0 = _initial_stack(meas, y, cfg.chains, cfg.init, cfg.init_mean, variance, streams)

    def drift(x):
        return meas.loglik_grad(x, y) + score_model.score(x)

    run = run_langevin(drift, x0, streams, cfg.steps_per_chain, cfg.tau, bound=DIVERGENCE_BOUND)
    n_ok = int(run.ok.sum())
    failed = [(int(i), int(run.failed_step[i])) for i in np.flatnonzero(~run.ok)]
    if n_ok == 0 or n_ok < min_ok_fraction * cfg.chains:
        raise DivergenceError(f"only {n_ok}/{cfg.chains} posterior chains finished; failures {failed[:5]}")
    samples = run.final[run.ok]
    if n_ok >= 2:
        mean, std = mmse_from_samples(samples)
    else:
        mean, std = samples[0].copy(), np.zeros_like(samples[0])
    scores = [psnr(ground_truth, s) for s in samples] if ground_truth is not None else []
    prov = {"posterior": cfg.to_dict(), "measurement": meas.to_dict(),
            "prior_noise_variance": score_model.noise_variance}
    return ChainResult(samples, mean, std, scores, failed, prov)


def mmse_from_samples(samples):
    """Pixelwise mean and (n - 1)-normalised standard deviation.

    Accumulated in one streaming pass, so ``samples`` may be any iterable of
    grids.
    """
    n = 0
    mean = m2 = None
    for s in samples:
        s = np.asarray(s, dtype=np.float64)
        n += 1
        if mean is None:
            mean = s.copy()
            m2 = np.zeros_like(s)
            continue
        delta = s - mean
        mean += delta / n
        m2 += delta * (s - mean)
    if n < 2:
        raise ValueError("need at least two samples")
    return mean, np.sqrt(np.maximum(m2, 0.0) / (n - 1))
