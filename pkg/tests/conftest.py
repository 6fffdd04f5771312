import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from scoreprior.blobs import BlobsConfig
from scoreprior.cnn import load_checkpoint, save_checkpoint
from scoreprior.training import ArchConfig, TrainConfig, train_denoiser, write_log_csv

ARTIFACTS = Path(os.environ.get("SCOREPRIOR_ARTIFACTS", Path(__file__).resolve().parent.parent / ".artifacts"))

# desk-scale training budget shared by both noise levels
TRAIN_STEPS = 1500


def trained_network(noise_variance: float, steps: int = TRAIN_STEPS, seed: int = 0):
    """Train (or reuse a cached, identically configured) default-architecture CNN.

    Training is deterministic given the config, so the cache is keyed by a
    hash of the full configuration.
    """
    cfg = TrainConfig(noise_variance=noise_variance, max_steps=steps, seed=seed)
    arch, blobs = ArchConfig(), BlobsConfig()
    config = {"train": cfg.to_dict(), "arch": arch.to_dict(), "blobs": blobs.to_dict()}
    key = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
    ckpt = ARTIFACTS / f"cnn-{key}.ckpt"
    log_path = ARTIFACTS / f"cnn-{key}.csv"
    if not (ckpt.exists() and log_path.exists()):
        ARTIFACTS.mkdir(parents=True, exist_ok=True)
        net, rows = train_denoiser(cfg, arch, blobs)
        save_checkpoint(net, ckpt)
        with open(log_path, "w") as f:
            write_log_csv(rows, f)
        (ARTIFACTS / f"cnn-{key}.json").write_text(json.dumps(config, indent=2))
    rows = np.genfromtxt(log_path, delimiter=",", names=True)
    return load_checkpoint(ckpt), rows


@pytest.fixture(scope="session")
def medium_noise_net():
    return trained_network(0.1)


@pytest.fixture(scope="session")
def low_noise_net():
    return trained_network(0.01)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Use as ``with verdict("label") as note: ...``; ``note(text)`` attaches the
    measured values, and the line is printed in the terminal summary.
    """
    from contextlib import contextmanager

    @contextmanager
    def record(label):
        details = []
        try:
            yield details.append
        except BaseException:
            line = f"FAIL  {label}  {'; '.join(details)}"
            raise
        else:
            line = f"PASS  {label}  {'; '.join(details)}"
        finally:
            ACCEPTANCE_LINES.append(line)
            print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
