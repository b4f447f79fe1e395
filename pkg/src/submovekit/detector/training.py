"""Training loop and inference-time decomposition for the detector."""

from __future__ import annotations

import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from ..primitive import DURATION_MAX, DURATION_MIN, Submovement, clamp_duration, peak_pick
from ..signal import CANONICAL_RATE, VelocitySeries
from ..syngen import SyntheticTrial, trial_rng
from .losses import (
    EpochMeans,
    loss_bce_finetune,
    loss_bce_pretrain,
    loss_mse_params,
    loss_reconstruction,
    total_loss,
)
from .network import Tfcn, TfcnConfig, TfcnWeights, as_model, forward, save_weights

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message if dump_path is None else f"{message} (state dumped to {dump_path})")
        self.dump_path = dump_path


@dataclass
class TrainingSchedule:
    batch_size: int = 512
    batches_per_epoch: int = 1000
    pretrain_epochs: int = 25
    reconstruction_start_epoch: int = 10
    dropout_epochs: int = 20
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    alpha: float = 0.9
    finetune: bool = False

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 4:
            raise ValueError("loss_weights: need exactly 4 weights")
        if not self.lr_end < self.lr_start:
            raise ValueError("lr_end: must be below lr_start")
        if not 0 <= self.reconstruction_start_epoch <= self.pretrain_epochs:
            raise ValueError("reconstruction_start_epoch: must lie in [0, pretrain_epochs]")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha: must lie in (0, 1)")
        if self.batch_size < 1 or self.batches_per_epoch < 1 or self.pretrain_epochs < 1:
            raise ValueError("batch_size, batches_per_epoch and pretrain_epochs must be positive")

    @property
    def total_steps(self) -> int:
        return self.pretrain_epochs * self.batches_per_epoch

    def lr_at(self, step: int) -> float:
        frac = step / max(1, self.total_steps - 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac


# Scaled-down substitute for the full pre-training run (4 x 200 x 32).
DESK_SCHEDULE = dict(
    batch_size=32,
    batches_per_epoch=200,
    pretrain_epochs=4,
    reconstruction_start_epoch=2,
    dropout_epochs=3,
)


class TrialSource(Protocol):
    def batch(self, size: int, rng: np.random.Generator) -> list[SyntheticTrial]: ...


@dataclass
class EpochMetrics:
    epoch: int
    bce: float
    duration: float
    displacement: float
    reconstruction: float
    total: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    model: Tfcn
    metrics: list[EpochMetrics] = field(default_factory=list)

    @property
    def weights(self) -> TfcnWeights:
        return TfcnWeights.from_model(self.model)


def batch_tensors(trials: Sequence[SyntheticTrial], dtype=torch.float32, rectify: bool = False):
    """Stack equal-length trials into ``(x, onset, duration, displacement, clean)``."""
    x = np.stack([t.noisy.values for t in trials])
    clean = np.stack([t.clean.values for t in trials])
    y = np.stack([t.labels.onset for t in trials]).astype(np.float64)
    T = np.stack([t.labels.duration for t in trials])
    d = np.stack([t.labels.displacement for t in trials])
    if rectify:
        x, clean, d = np.abs(x), np.abs(clean), np.abs(d)
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)
    return as_t(x), as_t(y), as_t(T), as_t(d), as_t(clean)


def batch_losses(model: Tfcn, tensors, schedule: TrainingSchedule, with_reconstruction: bool, rate=CANONICAL_RATE):
    """The four loss components for one batch (reconstruction may be skipped)."""
    x, y, T, d, clean = tensors
    p, T_hat, d_hat = model(x)
    if with_reconstruction or schedule.finetune:
        rec, n_det = loss_reconstruction(p, T_hat, d_hat, clean, rate)
    else:
        rec, n_det = p.new_zeros(()), 0
    if schedule.finetune:
        bce = loss_bce_finetune(p, y, d, n_det, schedule.alpha)
    else:
        bce = loss_bce_pretrain(p, y, schedule.alpha)
    dur, disp = loss_mse_params(T_hat, d_hat, y, T, d)
    return [bce, dur, disp, rec]


def _dump_state(model: Tfcn, info: dict) -> Path:
    fd, name = tempfile.mkstemp(prefix="diverged_", suffix=".ssmo")
    os.close(fd)
    Path(name).with_suffix(".json").write_text(repr(info))
    save_weights(model, name)
    return Path(name)


def train(
    schedule: TrainingSchedule,
    generator: TrialSource,
    rng_seed: int,
    config: TfcnConfig | None = None,
    model: Tfcn | None = None,
    rectify: bool = False,
    epoch_offset: int = 0,
    progress: bool = False,
    epochs: int | None = None,
    start_step: int = 0,
) -> TrainResult:
    """Adam with per-step exponential learning-rate decay.

    The reconstruction term joins at ``reconstruction_start_epoch`` (always
    on when ``schedule.finetune``); dropout is active for the first
    ``dropout_epochs`` epochs only. ``epoch_offset`` shifts the epoch counter
    and ``start_step`` the learning-rate step when continuing an earlier
    run; ``epochs`` caps how many epochs of the schedule this call runs.
    """
    torch.manual_seed(rng_seed + epoch_offset)
    if model is None:
        model = Tfcn(config)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr_start)
    weights = list(schedule.loss_weights)
    means = EpochMeans(4)
    result = TrainResult(model)
    step = start_step
    for e in range(schedule.pretrain_epochs if epochs is None else epochs):
        epoch = e + epoch_offset
        with_rec = schedule.finetune or epoch >= schedule.reconstruction_start_epoch
        w = weights[:3] + [weights[3] if with_rec else 0.0]
        model.train()
        model.set_dropout(model.config.dropout if epoch < schedule.dropout_epochs and not schedule.finetune else 0.0)
        means.reset()
        sums = np.zeros(5)
        t0 = time.perf_counter()
        for b in range(schedule.batches_per_epoch):
            lr = schedule.lr_at(step)
            for g in opt.param_groups:
                g["lr"] = lr
            trials = generator.batch(schedule.batch_size, trial_rng(rng_seed, epoch, b))
            tensors = batch_tensors(trials, next(model.parameters()).dtype, rectify)
            comps = batch_losses(model, tensors, schedule, with_rec)
            values = [float(c.detach()) for c in comps]
            means.update(values, active=[True, True, True, with_rec])
            total = total_loss(comps, means.means, w)
            if not math.isfinite(float(total.detach())):
                path = _dump_state(model, {"epoch": epoch, "batch": b, "losses": values})
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}: {values}", path)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += np.array(values + [float(total.detach())])
            step += 1
            if progress and b % 50 == 0:
                log.info("epoch %d batch %d losses %s", epoch, b, np.round(values, 5))
        avg = sums / schedule.batches_per_epoch
        m = EpochMetrics(epoch, *avg.tolist(), lr=lr, seconds=time.perf_counter() - t0)
        log.info("epoch %d: %s", epoch, m)
        result.metrics.append(m)
    model.eval()
    return result


def decompose(
    weights,
    series: VelocitySeries,
    threshold: float = 0.5,
    duration_bounds: tuple[float, float] = (DURATION_MIN, DURATION_MAX),
) -> list[Submovement]:
    """Forward pass (inference mode), peak picking, then head read-out.

    Durations are clamped to ``duration_bounds``.
    """
    out = forward(as_model(weights), series, training_mode=False)
    onsets = peak_pick(out.onset_prob, threshold)
    return [
        Submovement(int(i), clamp_duration(out.duration[i], *duration_bounds), float(out.displacement[i]))
        for i in onsets
    ]
