"""Command-line entry point.

Every command prints ``key=value`` result lines on stdout and writes its
artifacts, the resolved configuration and a log to ``<out>/<command>-<seed>/``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

COMMANDS = ("train", "eval-lines", "interpolate", "classify", "cluster", "gradcheck", "gen-data", "sample-vae")
ARCHES = ("lines64", "real256", "real32")
PIXELS = "pixels"  # classify only: fit the probe on raw pixels


class UsageError(Exception):
    """Bad flags or config; reported before any computation starts."""


@dataclass
class RunConfig:
    command: str = ""
    variant: str = "baseline"
    arch: str = "lines64"
    seed: int = 0
    samples: int = 2 ** 20
    batch: int = 64
    n_steps: int = 16
    ref_size: int = 4096
    pairs: int = 256
    restarts: int = 32
    out: str = ""
    ckpt: str = ""
    data: str = ""

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / f"{self.command}-{self.seed}"

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    try:
        return int(value, 0) if kind in (int, "int") else value
    except ValueError:
        raise UsageError(f"{key} expects an integer, got {value!r}") from None


def read_config_file(path: str | Path) -> dict[str, object]:
    """Parse ``key=value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    out: dict[str, object] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES or key == "command":
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acai", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--variant")
    p.add_argument("--arch", choices=ARCHES)
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int, help="training samples (or images for gen-data)")
    p.add_argument("--batch", type=int)
    p.add_argument("--n-steps", type=int, dest="n_steps", help="interpolation steps N")
    p.add_argument("--ref-size", type=int, dest="ref_size", help="reference lines D")
    p.add_argument("--pairs", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--out")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    return p


def resolve(argv: list[str]) -> RunConfig:
    args = build_parser().parse_args(argv)
    values: dict[str, object] = {"out": os.environ.get("ACAI_OUT", "runs")}
    if args.config:
        values.update(read_config_file(args.config))
    values.update({k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command")})
    cfg = RunConfig(command=args.command, **values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from .models import VARIANTS

    allowed = VARIANTS + (PIXELS,) if cfg.command == "classify" else VARIANTS
    if cfg.variant not in allowed:
        raise UsageError(f"unknown variant {cfg.variant!r} for {cfg.command}; choose from {', '.join(allowed)}")
    if cfg.arch not in ARCHES:
        raise UsageError(f"unknown arch {cfg.arch!r}; choose from {', '.join(ARCHES)}")
    for key in ("samples", "batch", "n_steps", "ref_size", "pairs", "restarts"):
        if getattr(cfg, key) < 1:
            raise UsageError(f"{key} must be positive")
    if cfg.command == "train" and cfg.samples % cfg.batch:
        raise UsageError(f"samples ({cfg.samples}) must be a multiple of batch ({cfg.batch})")
    if cfg.n_steps < 2:
        raise UsageError("n_steps must be at least 2")
    if cfg.ref_size < 2:
        raise UsageError("ref_size must be at least 2")
    if cfg.command in ("eval-lines", "interpolate", "sample-vae") and not cfg.ckpt:
        raise UsageError(f"{cfg.command} needs --ckpt")
    if cfg.ckpt and cfg.command != "train" and not Path(cfg.ckpt).is_file():
        raise UsageError(f"checkpoint {cfg.ckpt} does not exist")
    if cfg.command in ("classify", "cluster"):
        if not cfg.data:
            raise UsageError(f"{cfg.command} needs --data pointing at the MNIST IDX files")
        from .io import find_mnist

        try:
            find_mnist(cfg.data)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None
    if cfg.command == "train" and cfg.data and not Path(cfg.data).exists():
        raise UsageError(f"training data {cfg.data} does not exist")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


class Run:
    """Output directory, log file and result lines for one command."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.txt").write_text(cfg.to_text())
        self._log = open(self.dir / "log.txt", "w")

    def log(self, line: str) -> None:
        self._log.write(line + "\n")
        self._log.flush()

    def result(self, **values) -> None:
        for key, value in values.items():
            text = repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)
            line = f"{key}={text}"
            print(line)
            self.log(line)

    def close(self) -> None:
        self._log.close()


def _train_config(cfg: RunConfig):
    from .models import ArchConfig, ModelVariant
    from .trainer import TrainConfig

    return TrainConfig(variant=ModelVariant(cfg.variant), arch=ArchConfig.preset(cfg.arch),
                       total_samples=cfg.samples, batch_size=cfg.batch, seed=cfg.seed,
                       eval_every=max(1, cfg.samples // cfg.batch // 16), eval_pairs=16, eval_refs=512)


def _training_data(cfg: RunConfig):
    from .io import find_mnist, load_lines_dataset, load_mnist
    from .trainer import ArrayData, LinesData

    if not cfg.data:
        return LinesData()
    path = Path(cfg.data)
    if path.is_dir():
        find_mnist(path)
        mnist = load_mnist(path)
        return ArrayData(mnist["train_images"], mnist["train_labels"])
    images, _ = load_lines_dataset(path)
    return ArrayData(images)


def cmd_train(run: Run) -> None:
    from .trainer import train

    cfg = run.cfg
    ckpt = Path(cfg.ckpt) if cfg.ckpt else run.dir / "model.ckpt"
    state = train(_train_config(cfg), _training_data(cfg), checkpoint_path=ckpt, log=run.log)
    run.result(checkpoint=ckpt, steps=state.step, final_loss=state.history[-1])


def _load(cfg: RunConfig):
    from .io import load_state

    state, config = load_state(cfg.ckpt)
    return state.model, config


def cmd_eval_lines(run: Run) -> None:
    from .metrics import evaluate_lines
    from .rng import Rng

    model, _ = _load(run.cfg)
    report = evaluate_lines(model, Rng(run.cfg.seed).derive("eval-lines"), run.cfg.pairs,
                            run.cfg.n_steps, run.cfg.ref_size)
    (run.dir / "metrics.txt").write_text(report.to_text())
    run.result(**report.as_dict())


def cmd_interpolate(run: Run) -> None:
    from .io import write_image_grid
    from .metrics import build_interpolation, sample_test_pairs
    from .rng import Rng

    model, _ = _load(run.cfg)
    angles, pairs = sample_test_pairs(Rng(run.cfg.seed).derive("interpolate"), run.cfg.pairs)
    rows = [build_interpolation(model, p[0], p[1], run.cfg.n_steps).steps for p in pairs]
    path = write_image_grid(np.concatenate(rows), run.cfg.n_steps, run.dir / "interpolation.png", pgm=True)
    run.result(image=path, rows=len(rows), columns=run.cfg.n_steps)


def cmd_classify(run: Run) -> None:
    from .experiments import pixel_baseline, tandem_run
    from .io import load_mnist

    cfg = run.cfg
    data = load_mnist(cfg.data)
    if cfg.variant == PIXELS:
        acc = pixel_baseline(data, steps=cfg.samples // cfg.batch, batch_size=cfg.batch, seed=cfg.seed)
        run.result(features="pixels", accuracy=acc)
        return
    res = tandem_run(cfg.variant, data, samples=cfg.samples, arch=cfg.arch, batch_size=cfg.batch, seed=cfg.seed,
                     log=run.log)
    run.result(features=cfg.variant, accuracy=res.accuracy)


def cmd_cluster(run: Run) -> None:
    from .experiments import cluster_latents
    from .io import load_mnist
    from .trainer import ArrayData, train

    cfg = run.cfg
    data = load_mnist(cfg.data)
    if cfg.ckpt:
        model, _ = _load(cfg)
    else:
        model = train(_train_config(cfg), ArrayData(data["train_images"]), log=run.log).model
    acc = cluster_latents(model.encode(data["train_images"]), model.encode(data["test_images"]),
                          data["test_labels"], restarts=cfg.restarts, seed=cfg.seed)
    run.result(variant=cfg.variant, restarts=cfg.restarts, clustering_accuracy=acc)


def cmd_gradcheck(run: Run) -> None:
    from .gradcheck import run_suite

    results = run_suite(run.cfg.seed)
    for r in results:
        run.result(**{f"op.{r.name}": r.error})
    failed = [r.name for r in results if not r.passed]
    run.result(passed=str(not failed).lower(), failed=",".join(failed) or "none")
    if failed:
        raise CommandFailed(f"gradient check failed for {', '.join(failed)}")


def cmd_gen_data(run: Run) -> None:
    from .io import save_lines_dataset
    from .lines import sample_batch
    from .rng import Rng

    images, angles = sample_batch(Rng(run.cfg.seed).derive("gen-data"), run.cfg.samples)
    path = Path(run.cfg.data) if run.cfg.data else run.dir / "lines.acai"
    save_lines_dataset(images, angles, path)
    run.result(dataset=path, count=len(images))


def cmd_sample_vae(run: Run) -> None:
    from .io import write_image_grid
    from .models import vae_sample
    from .rng import Rng

    model, config = _load(run.cfg)
    if config.variant.kind != "vae":
        raise UsageError(f"checkpoint holds a {config.variant.kind} model, not a vae")
    images = np.clip(vae_sample(model, Rng(run.cfg.seed).derive("sample-vae"), run.cfg.n_steps), 0.0, 1.0)
    path = write_image_grid(images, run.cfg.n_steps, run.dir / "samples.png", pgm=True)
    run.result(image=path, count=len(images))


class CommandFailed(Exception):
    """The command ran but its outcome is a failure (e.g. a gradient mismatch)."""


HANDLERS: dict[str, Callable[[Run], object]] = {
    "train": cmd_train, "eval-lines": cmd_eval_lines, "interpolate": cmd_interpolate,
    "classify": cmd_classify, "cluster": cmd_cluster, "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data, "sample-vae": cmd_sample_vae,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse already printed its message
        return int(exc.code or 0)
    run = Run(cfg)
    try:
        HANDLERS[cfg.command](run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # one-line reason, no traceback
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        run.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
