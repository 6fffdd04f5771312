"""SGD-with-momentum training of the residual CNN on blob images."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .blobs import BlobsConfig, sample_batch
from .cnn import CnnDenoiser, cnn_forward, cnn_loss_grad, init_cnn, sgd_momentum_step
from .core import RngStream
from .score import DivergenceError

log = logging.getLogger(__name__)

# stream ids under the training seed
DATA_STREAM, NOISE_STREAM, INIT_STREAM = 1, 2, 3
VALIDATION_STREAM = 0xFFFF_0000


def lr_grid(k: int) -> float:
    """Learning-rate grid point 10^(-k/2)."""
    return 10.0 ** (-k / 2.0)


@dataclass
class ArchConfig:
    depth: int = 10
    channels: int = 32
    input_skip: bool = True
    kernel_size: int = 3

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainConfig:
    noise_variance: float = 0.1
    learning_rate: float = 10 ** -1.5
    momentum: float = 0.9
    batch_size: int = 20
    max_steps: int = 20000
    validation_size: int = 100
    eval_every: int = 100
    target_val_loss: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.noise_variance <= 0:
            raise ValueError("noise_variance must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_steps < 0 or self.validation_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size, validation_size, eval_every must be >= 1 and max_steps >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class LogRow:
    step: int
    train_loss: float
    val_loss: float
    best_val_loss: float
    elapsed: float


def validation_set(cfg: TrainConfig, blobs: BlobsConfig):
    """Fixed clean/noisy validation pair drawn from a reserved stream."""
    rng = RngStream(cfg.seed, VALIDATION_STREAM)
    clean = sample_batch(blobs, rng, cfg.validation_size)
    noisy = clean + math.sqrt(cfg.noise_variance) * rng.normal(clean.shape)
    return clean, noisy


def validation_loss(net: CnnDenoiser, clean, noisy, chunk: int = 20) -> float:
    total = 0.0
    for i in range(0, len(clean), chunk):
        r = cnn_forward(net, noisy[i:i + chunk])
        total += float(np.sum((r - clean[i:i + chunk]) ** 2))
    return total / clean.size


def train_denoiser(cfg: TrainConfig, arch: ArchConfig = ArchConfig(),
                   blobs: BlobsConfig = BlobsConfig(), callback=None):
    """Train and return ``(best_network, log_rows)``.

    Validation runs every ``eval_every`` steps and after the last step; the
    network with the lowest validation loss is returned. Training stops early
    once ``target_val_loss`` is reached, when one is given.
    """
    net = init_cnn(arch.depth, arch.channels, RngStream(cfg.seed, INIT_STREAM), arch.input_skip,
                   arch.kernel_size, cfg.noise_variance)
    data_rng = RngStream(cfg.seed, DATA_STREAM)
    noise_rng = RngStream(cfg.seed, NOISE_STREAM)
    clean_val, noisy_val = validation_set(cfg, blobs)

    params = net.parameters()
    velocity = [np.zeros_like(p) for p in params]
    t0 = time.perf_counter()
    best = validation_loss(net, clean_val, noisy_val)
    best_net = net.copy()
    rows = [LogRow(0, math.nan, best, best, 0.0)]
    running, n_running = 0.0, 0
    for step in range(1, cfg.max_steps + 1):
        clean = sample_batch(blobs, data_rng, cfg.batch_size)
        loss, grads = cnn_loss_grad(net, clean, noise_rng, cfg.noise_variance)
        if not math.isfinite(loss):
            raise DivergenceError(f"training loss became {loss} at step {step} "
                                  f"(lr={cfg.learning_rate}, momentum={cfg.momentum})", step=step)
        params, velocity = sgd_momentum_step(params, grads, velocity, cfg.learning_rate, cfg.momentum)
        net = net.with_parameters(params)
        running += loss
        n_running += 1
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            val = validation_loss(net, clean_val, noisy_val)
            if not math.isfinite(val):
                raise DivergenceError(f"validation loss became {val} at step {step}", step=step)
            if val < best:
                best, best_net = val, net.copy()
            row = LogRow(step, running / n_running, val, best, time.perf_counter() - t0)
            rows.append(row)
            running, n_running = 0.0, 0
            log.info("step %d train %.5g val %.5g best %.5g (%.0fs)", step, row.train_loss, val, best, row.elapsed)
            if callback is not None:
                callback(row)
            if cfg.target_val_loss is not None and best < cfg.target_val_loss:
                break
    return best_net, rows


def write_log_csv(rows, stream) -> None:
    stream.write("step,train_loss,val_loss\n")
    for r in rows:
        stream.write(f"{r.step},{r.train_loss!r},{r.val_loss!r}\n")
