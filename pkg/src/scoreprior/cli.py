"""Command-line experiment harness.

Every subcommand resolves its settings as built-in defaults < ``--config``
key=value file < explicit flags, writes its outputs plus a
``manifest.json`` into ``--out-dir`` and draws all randomness from the
seeds recorded there. ``replay`` re-executes a manifest and checks that the
output hashes match.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .blobs import BlobsConfig, sample_blob
from .cnn import CheckpointError, load_checkpoint, save_checkpoint
from .core import RngStream
from .forward import InpaintingOp, MagnitudeRetrievalOp, MeasurementModel
from .gridio import GridFormatError, export_pgm, load_grid, save_grid, write_metrics_csv
from .metrics import MetricRecord, data_fidelity, mse, psnr
from .recon import MapConfig, PosteriorConfig, map_reconstruct, map_restarts, posterior_langevin
from .score import DivergenceError, LangevinConfig, ScoreModel, sample_prior_ensemble
from .training import ArchConfig, TrainConfig, lr_grid, train_denoiser, write_log_csv

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
OUT_ROOT_ENV = "SCOREPRIOR_OUT"


class ConfigError(ValueError):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _opt_float(v):
    if v is None or str(v).strip().lower() in ("", "none"):
        return None
    return float(v)


# name -> (type, default, help). A default of None is filled in by presets.
BLOB_PARAMS = {
    "height": (int, 64, "image height"),
    "width": (int, 64, "image width"),
    "rounds": (int, 10, "box-filter passes"),
    "kernel_size": (int, 3, "box-filter side"),
    "threshold": (float, 0.0, "binarisation threshold"),
    "boundary": (str, "circular", "filter boundary: circular | zero_pad"),
}

COMMANDS = {
    "generate-data": {
        "help": "write blob images in raw grid format",
        "params": {
            "count": (int, 10, "number of images"),
            "seed": (int, 0, "base seed"),
            "stream_id": (int, 0, "stream id of image 0; image i uses stream_id + i"),
            **BLOB_PARAMS,
        },
    },
    "train": {
        "help": "train the residual CNN denoiser",
        "params": {
            "preset": (str, "medium", "medium | low | smoke"),
            "noise_variance": (float, None, "training noise variance sigma^2"),
            "learning_rate": (float, None, "SGD learning rate (overrides lr_k)"),
            "lr_k": (float, None, "learning rate 10^(-k/2)"),
            "momentum": (float, None, "SGD momentum"),
            "batch_size": (int, None, "images per step"),
            "max_steps": (int, None, "training steps"),
            "validation_size": (int, None, "validation images"),
            "eval_every": (int, None, "steps between validations"),
            "target_val_loss": (_opt_float, None, "stop once validation MSE falls below this"),
            "seed": (int, 0, "training seed"),
            "depth": (int, None, "conv layers"),
            "channels": (int, None, "hidden channels"),
            "input_skip": (_bool, None, "concatenate the input onto every layer"),
            "kernel_size_cnn": (int, 3, "CNN kernel side"),
            "sweep_lr_k": (str, "", "comma list of k for a learning-rate sweep"),
            "sweep_depth": (str, "", "comma list of depths"),
            "sweep_channels": (str, "", "comma list of channel counts"),
            "sweep_skip": (str, "", "comma list of true/false"),
            **{k: (t, None, h) for k, (t, _, h) in BLOB_PARAMS.items()},
        },
    },
    "sample-prior": {
        "help": "draw samples from the learned prior by Langevin iteration",
        "params": {
            "checkpoint": (str, None, "denoiser checkpoint"),
            "n": (int, 4, "number of samples (chains)"),
            "steps": (int, 2000, "Langevin steps per chain"),
            "tau_ratio": (float, 0.1, "step size as a multiple of sigma^2"),
            "tau": (_opt_float, None, "absolute step size (overrides tau_ratio)"),
            "init_mean": (float, 0.5, "initial pixel mean"),
            "init_variance": (_opt_float, None, "initial pixel variance (default sigma^2)"),
            "seed": (int, 0, "seed"),
            "stream_id": (int, 0, "stream id of chain 0"),
            "height": (int, 64, "image height"),
            "width": (int, 64, "image width"),
            "record_every": (int, 0, "dump the ensemble every k steps (0 = off)"),
        },
    },
    "reconstruct": {
        "help": "MAP / posterior / MMSE reconstruction for inpainting or magnitude retrieval",
        "params": {
            "checkpoint": (str, None, "denoiser checkpoint"),
            "problem": (str, "inpaint", "inpaint | magnitude"),
            "mode": (str, "map", "map | posterior | mmse"),
            "y": (str, "", "measurement grid file (omit with --simulate)"),
            "simulate": (_bool, False, "draw a ground truth and simulate y"),
            "truth": (str, "", "ground-truth grid file (optional)"),
            "truth_seed": (int, 1, "seed for the simulated ground truth and noise"),
            "noise_variance": (_opt_float, None, "measurement noise eta^2"),
            "hole": (int, 32, "side of the centred square removed by inpainting"),
            "mask": (str, "", "mask grid file (overrides hole)"),
            "epsilon": (float, 1e-12, "magnitude floor"),
            "height": (int, 64, "image height for simulation"),
            "width": (int, 64, "image width for simulation"),
            "map_steps": (int, None, "MAP gradient steps"),
            "map_step_size": (float, None, "MAP step size"),
            "map_init": (str, None, "adjoint | random"),
            "restarts": (int, 1, "MAP restarts from random inits"),
            "chains": (int, 500, "posterior chains"),
            "chain_steps": (int, 500, "iterations per chain"),
            "tau": (float, 1e-3, "posterior Langevin step"),
            "seed": (int, 0, "seed for inits and chains"),
            "save_samples": (_bool, True, "write individual posterior samples"),
        },
    },
}

TRAIN_PRESETS = {
    # best configurations reported for each noise level
    "medium": dict(noise_variance=0.1, lr_k=3, momentum=0.9, depth=10, channels=32, input_skip=True,
                   batch_size=20, max_steps=20000, validation_size=100, eval_every=100),
    "low": dict(noise_variance=0.01, lr_k=1, momentum=0.9, depth=15, channels=16, input_skip=True,
                batch_size=20, max_steps=20000, validation_size=100, eval_every=100),
    "smoke": dict(noise_variance=0.1, lr_k=3, momentum=0.9, depth=3, channels=4, input_skip=True,
                  batch_size=20, max_steps=200, validation_size=10, eval_every=50,
                  height=16, width=16),
}

RECON_PRESETS = {
    "inpaint": dict(noise_variance=0.2, map_steps=500, map_step_size=0.1, map_init="adjoint"),
    "magnitude": dict(noise_variance=1e-4, map_steps=5000, map_step_size=1e-3, map_init="random"),
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    params = COMMANDS[command]["params"]
    unknown = set(file_values) - set(params)
    if unknown:
        raise ConfigError(f"unknown {command} setting(s): {', '.join(sorted(unknown))}")
    cfg = {k: d for k, (_, d, _) in params.items()}
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    for k, v in merged.items():
        conv = params[k][0]
        try:
            cfg[k] = conv(v) if v is not None else None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {k}: {v!r} ({e})") from e
    if command == "train":
        preset = TRAIN_PRESETS.get(cfg["preset"])
        if preset is None:
            raise ConfigError(f"unknown train preset {cfg['preset']!r}")
        for k, v in preset.items():
            if cfg.get(k) is None:
                cfg[k] = v
        for k, (_, d, _) in BLOB_PARAMS.items():
            if cfg[k] is None:
                cfg[k] = d
        if cfg["learning_rate"] is None:
            cfg["learning_rate"] = lr_grid(cfg["lr_k"])
    if command == "reconstruct":
        if cfg["problem"] not in RECON_PRESETS:
            raise ConfigError(f"unknown problem {cfg['problem']!r}")
        if cfg["mode"] not in ("map", "posterior", "mmse"):
            raise ConfigError(f"unknown mode {cfg['mode']!r}")
        for k, v in RECON_PRESETS[cfg["problem"]].items():
            if cfg.get(k) is None:
                cfg[k] = v
        if not cfg["simulate"] and not cfg["y"]:
            raise ConfigError("reconstruct needs --y or --simulate")
    if command in ("sample-prior", "reconstruct") and not cfg["checkpoint"]:
        raise ConfigError(f"{command} needs --checkpoint")
    return cfg


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output directory bookkeeping and manifest writing."""

    def __init__(self, command: str, cfg: dict, out_dir: Path):
        self.command, self.cfg, self.out_dir = command, cfg, out_dir
        self.outputs: list[Path] = []
        self.inputs: dict[str, str] = {}
        self.counts: dict[str, int] = {}
        self.t0 = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def grid(self, name: str, grid, preview: bool = True, peak: float = 1.0):
        save_grid(self.path(name + ".sgrd"), grid)
        if preview:
            export_pgm(grid, self.path(name + ".pgm"), peak)

    def add_input(self, path):
        if path:
            self.inputs[str(path)] = sha256_file(path)

    def finish(self) -> Path:
        manifest = {
            "artifact": "scoreprior",
            "version": __version__,
            "command": self.command,
            "config": self.cfg,
            "inputs": self.inputs,
            "outputs": {str(p.relative_to(self.out_dir)): sha256_file(p) for p in self.outputs},
            "counts": self.counts,
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
        }
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def run_generate_data(cfg: dict, run: Run):
    blobs = BlobsConfig(**{k: cfg[k] for k in BLOB_PARAMS})
    for i in range(cfg["count"]):
        img = sample_blob(blobs, RngStream(cfg["seed"], cfg["stream_id"] + i))
        run.grid(f"blob_{i:05d}", img, preview=False)
    run.counts["images"] = cfg["count"]


def _ints(s, conv=int):
    return [conv(v) for v in str(s).split(",") if v.strip()]


def run_train(cfg: dict, run: Run):
    blobs = BlobsConfig(**{k: cfg[k] for k in BLOB_PARAMS})
    base = dict(depth=cfg["depth"], channels=cfg["channels"], input_skip=cfg["input_skip"],
                learning_rate=cfg["learning_rate"])
    grid = [base]
    for key, field, conv in (("sweep_lr_k", "learning_rate", lambda v: lr_grid(float(v))),
                             ("sweep_depth", "depth", int), ("sweep_channels", "channels", int),
                             ("sweep_skip", "input_skip", _bool)):
        values = _ints(cfg[key], conv)
        if values:
            grid = [{**g, field: v} for g in grid for v in values]
    sweep = len(grid) > 1 or any(cfg[k] for k in ("sweep_lr_k", "sweep_depth", "sweep_channels", "sweep_skip"))
    summary = []
    for idx, point in enumerate(grid):
        tcfg = TrainConfig(noise_variance=cfg["noise_variance"], learning_rate=point["learning_rate"],
                           momentum=cfg["momentum"], batch_size=cfg["batch_size"], max_steps=cfg["max_steps"],
                           validation_size=cfg["validation_size"], eval_every=cfg["eval_every"],
                           target_val_loss=cfg["target_val_loss"], seed=cfg["seed"])
        arch = ArchConfig(point["depth"], point["channels"], point["input_skip"], cfg["kernel_size_cnn"])
        net, rows = train_denoiser(tcfg, arch, blobs)
        prefix = f"run_{idx:03d}/" if sweep else ""
        save_checkpoint(net, run.path(prefix + "checkpoint.scnn"))
        buf = io.StringIO()
        write_log_csv(rows, buf)
        run.path(prefix + "train_log.csv").write_text(buf.getvalue())
        run.counts[prefix + "steps"] = rows[-1].step
        summary.append({**point, "run": prefix.rstrip("/") or "run", "best_val_loss": rows[-1].best_val_loss,
                        "steps": rows[-1].step})
        print(f"{prefix or 'run'}: best validation MSE {rows[-1].best_val_loss:.6g} after {rows[-1].step} steps")
    if sweep:
        run.path("sweep.json").write_text(json.dumps(summary, indent=2) + "\n")


def _load_model(cfg: dict, run: Run) -> ScoreModel:
    run.add_input(cfg["checkpoint"])
    return ScoreModel(load_checkpoint(cfg["checkpoint"]))


def run_sample_prior(cfg: dict, run: Run):
    model = _load_model(cfg, run)
    s2 = model.noise_variance
    lcfg = LangevinConfig(steps=cfg["steps"], tau=cfg["tau"] if cfg["tau"] is not None else cfg["tau_ratio"] * s2,
                          init_mean=cfg["init_mean"],
                          init_variance=s2 if cfg["init_variance"] is None else cfg["init_variance"],
                          seed=cfg["seed"], stream_id=cfg["stream_id"])
    res = sample_prior_ensemble(model, lcfg, cfg["n"], (cfg["height"], cfg["width"]),
                                record_every=cfg["record_every"], return_run=True)
    for i, x in enumerate(res.final):
        run.grid(f"sample_{i:04d}", x)
    for t, stack in enumerate(res.trajectory or []):
        for i, x in enumerate(stack):
            run.grid(f"trajectory/step_{(t + 1) * cfg['record_every']:06d}_chain_{i:04d}", x, preview=False)
    run.counts.update(chains=cfg["n"], steps=cfg["steps"])


def _measurement(cfg: dict, run: Run) -> MeasurementModel:
    if cfg["problem"] == "inpaint":
        if cfg["mask"]:
            run.add_input(cfg["mask"])
            op = InpaintingOp(load_grid(cfg["mask"]))
        else:
            op = InpaintingOp.center_crop((cfg["height"], cfg["width"]), (cfg["hole"], cfg["hole"]))
    else:
        op = MagnitudeRetrievalOp(cfg["epsilon"])
    return MeasurementModel(op, cfg["noise_variance"])


def run_reconstruct(cfg: dict, run: Run):
    model = _load_model(cfg, run)
    meas = _measurement(cfg, run)
    truth = None
    if cfg["simulate"]:
        rng = RngStream(cfg["truth_seed"], 0)
        truth = sample_blob(BlobsConfig(height=cfg["height"], width=cfg["width"]), rng)
        y = meas.simulate(truth, rng)
        run.grid("truth", truth)
    else:
        run.add_input(cfg["y"])
        y = load_grid(cfg["y"])
        if cfg["truth"]:
            run.add_input(cfg["truth"])
            truth = load_grid(cfg["truth"])
    run.grid("y", y, peak=1.0)
    records = []
    rid = f"{cfg['problem']}-{cfg['mode']}"

    def report(image_id, x):
        if truth is not None:
            records.append(MetricRecord("psnr", psnr(truth, x), "dB", rid, image_id))
            records.append(MetricRecord("mse", mse(truth, x), "intensity^2", rid, image_id))
        records.append(MetricRecord("data_fidelity", data_fidelity(meas, x, y), "dB", rid, image_id))

    if cfg["mode"] == "map":
        mcfg = MapConfig(steps=cfg["map_steps"], step_size=cfg["map_step_size"], init=cfg["map_init"],
                         seed=cfg["seed"])
        if cfg["restarts"] > 1:
            res = map_restarts(model, meas, y, mcfg, cfg["restarts"])
            xs, norms = res.x, res.grad_norms
        else:
            res = map_reconstruct(model, meas, y, mcfg)
            xs, norms = res.x[None], res.grad_norms[:, None]
        for r, x in enumerate(xs):
            run.grid(f"map_{r:03d}", x)
            report(f"map_{r:03d}", x)
        np.savetxt(run.path("map_grad_norms.csv"), norms, delimiter=",", fmt="%.17g",
                   header=",".join(f"map_{r:03d}" for r in range(len(xs))), comments="")
        run.counts.update(map_steps=cfg["map_steps"], restarts=len(xs))
    else:
        pcfg = PosteriorConfig(chains=cfg["chains"], steps_per_chain=cfg["chain_steps"], tau=cfg["tau"],
                               seed=cfg["seed"])
        res = posterior_langevin(model, meas, y, pcfg, ground_truth=truth)
        if cfg["mode"] == "posterior" and cfg["save_samples"]:
            for i, x in enumerate(res.samples):
                run.grid(f"samples/sample_{i:04d}", x, preview=False)
                report(f"sample_{i:04d}", x)
        run.grid("mmse", res.pixel_mean)
        run.grid("sigma_mmse", res.pixel_std, peak=max(float(res.pixel_std.max()), 1e-12))
        report("mmse", res.pixel_mean)
        run.counts.update(chains=cfg["chains"], chain_steps=cfg["chain_steps"],
                          failed_chains=len(res.failed_chains))
    buf = io.StringIO()
    write_metrics_csv(records, buf)
    run.path("metrics.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())


RUNNERS = {
    "generate-data": run_generate_data,
    "train": run_train,
    "sample-prior": run_sample_prior,
    "reconstruct": run_reconstruct,
}


def cmd_metrics(args) -> None:
    ref = load_grid(args.reference)
    meas = y = None
    if args.y:
        y = load_grid(args.y)
        op = (InpaintingOp(load_grid(args.mask)) if args.mask else InpaintingOp.center_crop(y.shape, (args.hole,) * 2)) \
            if args.problem == "inpaint" else MagnitudeRetrievalOp(args.epsilon)
        meas = MeasurementModel(op, 1.0)
    records = []
    for path in args.estimates:
        est = load_grid(path)
        records.append(MetricRecord("psnr", psnr(ref, est, args.peak), "dB", args.run_id, Path(path).stem))
        records.append(MetricRecord("mse", mse(ref, est), "intensity^2", args.run_id, Path(path).stem))
        if meas is not None:
            records.append(MetricRecord("data_fidelity", data_fidelity(meas, est, y, args.peak), "dB",
                                        args.run_id, Path(path).stem))
    write_metrics_csv(records, sys.stdout)


def _add_params(p: argparse.ArgumentParser, params: dict):
    for name, (_, default, help_) in params.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                       help=f"{help_} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoreprior", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, entry in COMMANDS.items():
        p = sub.add_parser(name, help=entry["help"])
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out-dir", help=f"output directory (default: ${OUT_ROOT_ENV}/{name} or runs/{name})")
        p.add_argument("--print-config", action="store_true", help="print the resolved settings and exit")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
        _add_params(p, entry["params"])
    m = sub.add_parser("metrics", help="PSNR / MSE / data fidelity of saved grids, CSV to stdout")
    m.add_argument("reference")
    m.add_argument("estimates", nargs="+")
    m.add_argument("--peak", type=float, default=1.0)
    m.add_argument("--y", default="", help="measurement grid; enables data fidelity")
    m.add_argument("--problem", default="inpaint", choices=["inpaint", "magnitude"])
    m.add_argument("--hole", type=int, default=32)
    m.add_argument("--mask", default="")
    m.add_argument("--epsilon", type=float, default=1e-12)
    m.add_argument("--run-id", default="")
    r = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    r.add_argument("manifest")
    r.add_argument("--out-dir", required=True)
    return parser


def execute(command: str, cfg: dict, out_dir: Path, threads=None) -> Path:
    from threadpoolctl import threadpool_limits

    run = Run(command, cfg, out_dir)
    with threadpool_limits(limits=threads):
        RUNNERS[command](cfg, run)
    return run.finish()


def replay(manifest_path, out_dir: Path) -> bool:
    old = json.loads(Path(manifest_path).read_text())
    new_manifest = execute(old["command"], old["config"], out_dir)
    new = json.loads(new_manifest.read_text())
    same = new["outputs"] == old["outputs"]
    for name, digest in old["outputs"].items():
        if new["outputs"].get(name) != digest:
            print(f"MISMATCH {name}")
    print("outputs identical" if same else "outputs differ")
    return same


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "metrics":
            cmd_metrics(args)
            return EXIT_OK
        if args.command == "replay":
            return EXIT_OK if replay(args.manifest, Path(args.out_dir)) else 1
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k: getattr(args, k) for k in COMMANDS[args.command]["params"]}
        cfg = resolve(args.command, file_values, flags)
        if args.print_config:
            for k in sorted(cfg):
                print(f"{k} = {cfg[k]}")
            return EXIT_OK
        out = Path(args.out_dir) if args.out_dir else Path(os.environ.get(OUT_ROOT_ENV, "runs")) / args.command
        execute(args.command, cfg, out, args.threads)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, GridFormatError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
