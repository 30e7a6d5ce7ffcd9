"""Deterministic training loop.

Every random draw at step ``k`` comes from ``Rng(seed).derive(purpose, k)``,
so a run resumed from a checkpoint at step ``k`` replays exactly what an
uninterrupted run would have done.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ConfigError
from .lines import sample_batch
from .metrics import (DEFAULT_PAIRS, DEFAULT_REFS, DEFAULT_STEPS, EvaluationError, MetricsReport,
                      evaluate_lines)
from .models import ArchConfig, AutoencoderModel, ModelVariant, Optimizers, TrainingDivergence, train_step
from .rng import Rng

logger = logging.getLogger(__name__)

PAPER_SAMPLES = 2 ** 24
DESK_SAMPLES = 2 ** 20


@dataclass
class TrainConfig:
    variant: ModelVariant = field(default_factory=ModelVariant)
    arch: ArchConfig = field(default_factory=lambda: ArchConfig.preset("lines64"))
    total_samples: int = DESK_SAMPLES
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 0
    eval_pairs: int = DEFAULT_PAIRS
    eval_steps: int = DEFAULT_STEPS
    eval_refs: int = DEFAULT_REFS

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.total_samples < self.batch_size or self.total_samples % self.batch_size:
            raise ConfigError(f"total_samples ({self.total_samples}) must be a positive multiple "
                              f"of batch_size ({self.batch_size})")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")

    @property
    def steps(self) -> int:
        return self.total_samples // self.batch_size


class LinesData:
    """Fresh random line images for every step."""

    labels = None

    def batch(self, rng: Rng, n: int) -> tuple[np.ndarray, None]:
        images, _ = sample_batch(rng, n)
        return images, None


class ArrayData:
    """Minibatches drawn uniformly with replacement from a fixed image array."""

    def __init__(self, images: np.ndarray, labels: np.ndarray | None = None):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = None if labels is None else np.asarray(labels)
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ConfigError("images and labels differ in length")

    def batch(self, rng: Rng, n: int) -> tuple[np.ndarray, np.ndarray | None]:
        idx = rng.integers(0, len(self.images), n)
        return self.images[idx], None if self.labels is None else self.labels[idx]


@dataclass
class TrainState:
    model: AutoencoderModel
    opt: Optimizers
    step: int = 0
    history: list[float] = field(default_factory=list)
    critic_history: list[float] = field(default_factory=list)
    snapshots: list[tuple[int, MetricsReport]] = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def new_state(config: TrainConfig) -> TrainState:
    model = AutoencoderModel(config.arch, config.variant, Rng(config.seed))
    return TrainState(model=model, opt=Optimizers(model, lr=config.lr))


StepHook = Callable[[TrainState, np.ndarray, np.ndarray | None, Rng], dict | None]


def train(config: TrainConfig, data=None, state: TrainState | None = None, *,
          until_step: int | None = None, checkpoint_path: str | Path | None = None,
          log: Callable[[str], None] | None = None, step_hook: StepHook | None = None) -> TrainState:
    """Run (or continue) training up to ``until_step`` (default: all steps).

    ``step_hook`` runs after each update with the batch and its labels; the
    in-tandem classifier uses it.  On divergence the last good state is
    written to ``checkpoint_path`` before the error propagates.
    """
    from .io import save_state  # local: io imports trainer types

    data = LinesData() if data is None else data
    state = new_state(config) if state is None else state
    root = Rng(config.seed)
    end = config.steps if until_step is None else min(until_step, config.steps)
    emit = log or (lambda line: logger.info(line))
    started = time.perf_counter()

    while state.step < end:
        k = state.step
        x, y = data.batch(root.derive("data", k), config.batch_size)
        try:
            rec = train_step(state.model, x, root.derive("step", k), state.opt)
        except TrainingDivergence as exc:
            if checkpoint_path is not None:
                save_state(state, config, checkpoint_path)
            raise TrainingDivergence(f"step {k}: {exc}") from exc
        state.history.append(rec["loss"])
        if "critic_loss" in rec:
            state.critic_history.append(rec["critic_loss"])
        if step_hook is not None:
            extra = step_hook(state, x, y, root.derive("hook", k))
            if extra:
                rec.update(extra)
        state.step += 1

        if config.eval_every and (state.step % config.eval_every == 0 or state.step == config.steps):
            line = f"step={state.step} loss={rec['loss']:.6g}"
            if isinstance(data, LinesData):
                try:
                    report = evaluate_lines(state.model, root.derive("eval", state.step),
                                            config.eval_pairs, config.eval_steps, config.eval_refs)
                except EvaluationError:
                    # early on every decoded path can collapse to one angle
                    line += " md=nan sm=nan"
                else:
                    state.snapshots.append((state.step, report))
                    line += f" md={report.mean_distance:.6g} sm={report.smoothness:.6g}"
            for key in ("accuracy",):
                if key in rec:
                    line += f" {key}={rec[key]:.6g}"
            emit(line)

    if checkpoint_path is not None:
        save_state(state, config, checkpoint_path)
    logger.debug("trained to step %d in %.1fs", state.step, time.perf_counter() - started)
    return state

