"""Denoiser-to-score conversion and unadjusted Langevin sampling of the prior."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import RngStream


class DivergenceError(RuntimeError):
    """A chain or optimizer produced a non-finite or runaway iterate."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ScoreModel:
    """A denoiser paired with the noise variance it was built for.

    ``score(z) = (r(z) - z) / sigma2`` approximates the gradient of the log
    density of the noisy data, exactly so for an MMSE denoiser.
    """

    def __init__(self, denoiser, noise_variance: float | None = None):
        if noise_variance is None:
            noise_variance = getattr(denoiser, "noise_variance", None)
        if noise_variance is None or noise_variance <= 0:
            raise ValueError("a positive noise_variance is required")
        self.denoiser = denoiser
        self.noise_variance = float(noise_variance)

    def score(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        r = self.denoiser.denoise(z)
        if not np.all(np.isfinite(r)):
            raise DivergenceError("denoiser returned non-finite values")
        return (r - z) / self.noise_variance


@dataclass
class LangevinConfig:
    steps: int = 2000
    tau: float = 0.01
    init_mean: float = 0.5
    init_variance: float = 0.1
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.init_variance < 0:
            raise ValueError("init_variance must be non-negative")

    @classmethod
    def standard_protocol(cls, noise_variance: float, **kw) -> "LangevinConfig":
        """2,000 steps, tau / sigma^2 = 0.1, init N(0.5, sigma^2)."""
        return cls(steps=2000, tau=0.1 * noise_variance, init_mean=0.5,
                   init_variance=noise_variance, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainRun:
    final: np.ndarray          # (n, H, W); rows of failed chains hold their last finite state
    ok: np.ndarray             # (n,) bool
    failed_step: np.ndarray    # (n,) int, -1 when the chain finished
    trajectory: list | None = None


def run_langevin(drift, init: np.ndarray, streams: list, steps: int, tau: float,
                 bound: float = np.inf, record_every: int = 0, callback=None) -> ChainRun:
    """Unadjusted Langevin: ``x <- x + tau * drift(x) + sqrt(2 tau) * E``.

    ``drift`` maps a (B, H, W) stack to its (B, H, W) log-density gradient.
    Chain ``i`` draws its noise only from ``streams[i]``. A chain stops when
    its iterate turns non-finite or leaves the ``bound`` box. ``callback(k, x)``
    sees the full (n, H, W) state after every step.
    """
    x = np.array(init, dtype=np.float64, copy=True)
    n, H, W = x.shape
    ok = np.ones(n, dtype=bool)
    failed = np.full(n, -1)
    noise_scale = np.sqrt(2.0 * tau)
    traj = [] if record_every else None
    active = np.arange(n)
    for k in range(steps):
        try:
            g = drift(x[active])
        except DivergenceError as e:
            raise DivergenceError(f"{e} at step {k}", step=k) from e
        e = np.stack([streams[i].normal((H, W)) for i in active])
        nxt = x[active] + tau * g + noise_scale * e
        finite = np.all(np.isfinite(nxt), axis=(1, 2))
        bad = ~finite | (np.abs(np.where(finite[:, None, None], nxt, 0.0)).max(axis=(1, 2)) > bound)
        if bad.any():
            ok[active[bad]] = False
            failed[active[bad]] = k
            keep = ~bad
            x[active[keep]] = nxt[keep]
            active = active[keep]
            if active.size == 0:
                break
        else:
            x[active] = nxt
        if callback is not None:
            callback(k, x)
        if record_every and (k + 1) % record_every == 0:
            traj.append(x.copy())
    return ChainRun(x, ok, failed, traj)


def _init_chains(streams, shape, mean, variance):
    return np.stack([mean + np.sqrt(variance) * s.normal(shape) if variance > 0
                     else np.full(shape, float(mean)) for s in streams])


def sample_prior_ensemble(model: ScoreModel, cfg: LangevinConfig, n_samples: int,
                          shape=(64, 64), record_every: int = 0, return_run: bool = False):
    """``n_samples`` independent prior chains on streams ``stream_id + i``.

    Each chain starts from IID N(init_mean, init_variance) and iterates
    ``x <- x + (tau / sigma^2) (r(x) - x) + sqrt(2 tau) E``; the final iterates
    are the samples.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    streams = [RngStream(cfg.seed, cfg.stream_id + i) for i in range(n_samples)]
    init = _init_chains(streams, shape, cfg.init_mean, cfg.init_variance)
    run = run_langevin(model.score, init, streams, cfg.steps, cfg.tau, record_every=record_every)
    if not run.ok.all():
        i = int(np.flatnonzero(~run.ok)[0])
        raise DivergenceError(f"prior chain {i} diverged at step {run.failed_step[i]}",
                              step=int(run.failed_step[i]))
    if return_run:
        return run
    return list(run.final)


def prior_langevin(model: ScoreModel, cfg: LangevinConfig, shape=(64, 64), record_every: int = 0):
    """Single prior chain; returns the final iterate, or ``(final, trajectory)``
    when ``record_every`` is set."""
    run = sample_prior_ensemble(model, cfg, 1, shape, record_every=record_every, return_run=True)
    if record_every:
        return run.final[0], [t[0] for t in run.trajectory]
    return run.final[0]
