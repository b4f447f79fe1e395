"""Parameter distributions estimated from pseudo-labels, and the iterative
refinement loop that re-trains the detector on data drawn from them."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector.network import Tfcn, TfcnWeights, as_model, save_weights
from .detector.training import TrainingSchedule, decompose, train
from .evalbench import r2_clipped
from .primitive import DURATION_MAX, DURATION_MIN, Submovement, compose
from .signal import CANONICAL_RATE, VelocitySeries
from .syngen import ColdStartConfig, ColdStartSource, MixedSource, trial_rng

log = logging.getLogger(__name__)

MIN_SAMPLES = 50
MAX_INTERVAL = 1.5  # seconds; the cold-start chain never exceeds 1.5 T_max


class InsufficientDataError(ValueError):
    def __init__(self, distribution: str, n: int, needed: int = MIN_SAMPLES):
        super().__init__(f"{distribution}: {n} samples, need at least {needed}")
        self.distribution = distribution


def silverman_bandwidth(data: np.ndarray) -> np.ndarray:
    """Per-dimension rule of thumb ``sigma * (4 / ((D + 2) n))^(1 / (D + 4))``.

    A zero spread falls back to a small absolute width so degenerate sets
    still produce a proper density.
    """
    n, D = data.shape
    sigma = data.std(axis=0, ddof=1) if n > 1 else np.zeros(D)
    h = sigma * (4.0 / ((D + 2) * n)) ** (1.0 / (D + 4))
    return np.where(h > 0, h, 1e-3 * np.maximum(1.0, np.abs(data).max(axis=0)))


class Kde:
    """Gaussian product-kernel density over ``(n, D)`` samples."""

    def __init__(self, data, bandwidth=None):
        data = np.asarray(data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        self.data = data
        self.bandwidth = silverman_bandwidth(data) if bandwidth is None else np.asarray(bandwidth, dtype=float)

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def density(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, self.dim)
        z = (points[:, None, :] - self.data[None, :, :]) / self.bandwidth
        k = np.exp(-0.5 * (z**2).sum(axis=2)) / np.prod(self.bandwidth * math.sqrt(2 * math.pi))
        return k.mean(axis=1)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        m = 1 if size is None else size
        idx = rng.integers(0, self.n, m)
        out = self.data[idx] + rng.normal(size=(m, self.dim)) * self.bandwidth
        return out[0] if size is None else out

    def sample_conditional(self, x0: float, rng: np.random.Generator) -> float:
        """Draw the second coordinate given the first equals ``x0``.

        Kernels are weighted by a Gaussian window of one bandwidth around
        ``x0``; the second coordinate is drawn from the chosen kernel.
        """
        if self.dim != 2:
            raise ValueError("conditional sampling needs a 2D density")
        logw = -0.5 * ((self.data[:, 0] - x0) / self.bandwidth[0]) ** 2
        w = np.exp(logw - logw.max())
        i = rng.choice(self.n, p=w / w.sum())
        return float(self.data[i, 1] + rng.normal() * self.bandwidth[1])

    def to_dict(self) -> dict:
        return {"samples": self.data.tolist(), "bandwidth": self.bandwidth.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Kde":
        return cls(np.asarray(d["samples"], dtype=float), d["bandwidth"])


def kde_fit(samples, name: str = "kde") -> Kde:
    data = np.asarray(samples, dtype=float)
    if len(data) < MIN_SAMPLES:
        raise InsufficientDataError(name, len(data))
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{name}: non-finite samples")
    return Kde(data)


@dataclass
class DistributionSet:
    marginal_d: Kde | None = None
    T_given_d: Kde | None = None
    I_given_d: Kde | None = None
    d_given_prev_d: Kde | None = None
    fit_metadata: dict = field(default_factory=dict)
    duration_range: tuple[float, float] = (DURATION_MIN, DURATION_MAX)
    interval_range: tuple[float, float] = (0.0, MAX_INTERVAL)

    KDES = ("marginal_d", "T_given_d", "I_given_d", "d_given_prev_d")

    @property
    def fitted(self) -> bool:
        return all(getattr(self, k) is not None for k in self.KDES)

    def sample_displacement(self, rng) -> float:
        return float(self.marginal_d.sample(rng)[0])

    def sample_duration(self, d: float, rng) -> float:
        return float(np.clip(self.T_given_d.sample_conditional(d, rng), *self.duration_range))

    def sample_interval(self, d: float, rng) -> float:
        return float(np.clip(self.I_given_d.sample_conditional(d, rng), *self.interval_range))

    def sample_next_displacement(self, d: float, rng) -> float:
        return self.d_given_prev_d.sample_conditional(d, rng)

    def to_json(self) -> str:
        doc = {k: getattr(self, k).to_dict() for k in self.KDES if getattr(self, k) is not None}
        doc["fit_metadata"] = self.fit_metadata
        doc["duration_range"] = list(self.duration_range)
        doc["interval_range"] = list(self.interval_range)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "DistributionSet":
        doc = json.loads(text)
        kdes = {k: Kde.from_dict(doc[k]) if k in doc else None for k in cls.KDES}
        return cls(
            **kdes,
            fit_metadata=doc.get("fit_metadata", {}),
            duration_range=tuple(doc.get("duration_range", (DURATION_MIN, DURATION_MAX))),
            interval_range=tuple(doc.get("interval_range", (0.0, MAX_INTERVAL))),
        )


def pseudo_label(weights, corpus: Sequence[VelocitySeries], threshold: float = 0.5) -> list[list[Submovement]]:
    """Decompose every recording with the current detector."""
    if not corpus:
        return []
    model = as_model(weights)
    return [decompose(model, s, threshold) for s in corpus]


def estimate_distributions(
    pseudo_labels: Sequence[Sequence[Submovement]], rate: float = CANONICAL_RATE, source: str = "pseudo_labels"
) -> DistributionSet:
    """Fit the four KDEs. Intervals are onset-to-onset, in seconds, and
    never cross recording boundaries."""
    d_all, dT, dI, dd = [], [], [], []
    for subs in pseudo_labels:
        subs = sorted(subs, key=lambda s: s.onset)
        for i, s in enumerate(subs):
            d_all.append(s.displacement)
            dT.append((s.displacement, s.duration))
            if i + 1 < len(subs):
                dI.append((s.displacement, (subs[i + 1].onset - s.onset) / rate))
                dd.append((s.displacement, subs[i + 1].displacement))
    kdes = {
        "marginal_d": kde_fit(d_all, "marginal_d"),
        "T_given_d": kde_fit(dT, "T_given_d"),
        "I_given_d": kde_fit(dI, "I_given_d"),
        "d_given_prev_d": kde_fit(dd, "d_given_prev_d"),
    }
    meta = {
        "n_submovements": len(d_all),
        "n_recordings": len(pseudo_labels),
        "bandwidths": {k: v.bandwidth.tolist() for k, v in kdes.items()},
        "source": source,
    }
    return DistributionSet(**kdes, fit_metadata=meta)


def held_out_r2(weights, held_out: Sequence[VelocitySeries]) -> float:
    """Mean clipped R^2 between each recording and its reconstruction."""
    model = as_model(weights)
    model.eval()
    scores = []
    for s in held_out:
        subs = decompose(model, s)
        scores.append(r2_clipped(compose(subs, len(s), s.rate).values, s.values))
    return float(np.mean(scores))


@dataclass
class RefinementSchedule:
    max_iterations: int = 5
    batch_size: int = 32
    batches_per_epoch: int = 200
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    alpha: float = 0.9
    synthetic_fraction: float = 0.5
    plateau_tolerance: float = 1e-3
    plateau_window: int = 3

    def training_schedule(self) -> TrainingSchedule:
        # one epoch per iteration; the learning rate decays across all of them
        return TrainingSchedule(
            batch_size=self.batch_size,
            batches_per_epoch=self.batches_per_epoch,
            pretrain_epochs=max(1, self.max_iterations),
            reconstruction_start_epoch=0,
            dropout_epochs=0,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            loss_weights=self.loss_weights,
            alpha=self.alpha,
            finetune=True,
        )


@dataclass
class RefinementState:
    """Loop state. ``history[i]`` is the held-out R^2 after iteration ``i+1``;
    ``baseline_r2`` is the score of the pre-trained weights."""

    weights: TfcnWeights
    best_weights: TfcnWeights
    baseline_r2: float
    best_r2: float
    iteration: int = 0
    distributions: DistributionSet | None = None
    history: list[float] = field(default_factory=list)
    best_history: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @classmethod
    def initial(cls, weights, held_out: Sequence[VelocitySeries]) -> "RefinementState":
        w = weights if isinstance(weights, TfcnWeights) else TfcnWeights.from_model(as_model(weights))
        r2 = held_out_r2(w, held_out)
        return cls(weights=w, best_weights=w, baseline_r2=r2, best_r2=r2)

    def plateaued(self, window: int, tolerance: float) -> bool:
        if len(self.best_history) < window:
            return False
        before = self.best_history[-window - 1] if len(self.best_history) > window else self.baseline_r2
        return self.best_history[-1] - before < tolerance

    def summary(self) -> dict:
        return {
            "iteration": self.iteration,
            "baseline_r2": self.baseline_r2,
            "best_r2": self.best_r2,
            "history": self.history,
            "best_history": self.best_history,
            "flags": self.flags,
        }


def refine(
    state: RefinementState,
    corpus: Sequence[VelocitySeries],
    held_out: Sequence[VelocitySeries],
    schedule: RefinementSchedule | None = None,
    config: ColdStartConfig | None = None,
    rng_seed: int = 0,
    iterations: int | None = None,
    checkpoint_dir: str | Path | None = None,
) -> RefinementState:
    """Run refinement iterations until the best held-out R^2 plateaus or
    ``max_iterations`` (or ``iterations``, if given) is reached.

    Each iteration pseudo-labels ``corpus``, fits the distributions and
    fine-tunes for one epoch on a 50/50 mix of cold-start and
    distribution-driven trials. When the distributions cannot be fitted the
    epoch runs on cold-start data only and the iteration is flagged. The
    best weights are only ever replaced by strictly better ones.
    """
    schedule = schedule or RefinementSchedule()
    config = config or ColdStartConfig()
    budget = schedule.max_iterations if iterations is None else iterations
    state = copy.copy(state)
    state.history, state.best_history, state.flags = list(state.history), list(state.best_history), list(state.flags)
    tsched = schedule.training_schedule()
    for _ in range(budget):
        if state.iteration >= schedule.max_iterations:
            break
        it = state.iteration
        model: Tfcn = state.weights.to_model()
        labels = pseudo_label(model, corpus)
        try:
            dists = estimate_distributions(labels)
            source = MixedSource(dists, config, schedule.synthetic_fraction)
            flag = "ok"
        except InsufficientDataError as exc:
            log.warning("iteration %d: %s; running a cold-start-only epoch", it + 1, exc)
            dists, source, flag = None, ColdStartSource(config), f"coldstart_only: {exc}"
        seed = int(trial_rng(rng_seed, it).integers(2**31))
        train(tsched, source, seed, model=model, epoch_offset=it, epochs=1, start_step=it * tsched.batches_per_epoch)
        weights = TfcnWeights.from_model(model)
        r2 = held_out_r2(weights, held_out)
        state.iteration += 1
        state.weights = weights
        state.distributions = dists
        state.history.append(r2)
        state.flags.append(flag)
        if r2 > state.best_r2:
            state.best_r2, state.best_weights = r2, weights
        state.best_history.append(state.best_r2)
        log.info("refinement iteration %d: held-out R2 %.4f (best %.4f)", state.iteration, r2, state.best_r2)
        if checkpoint_dir is not None:
            _checkpoint(state, Path(checkpoint_dir))
        if state.plateaued(schedule.plateau_window, schedule.plateau_tolerance):
            log.info("held-out R2 plateaued; stopping")
            break
    return state


def _checkpoint(state: RefinementState, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(state.best_weights, directory / "best.ssmo")
    save_weights(state.weights, directory / f"iter_{state.iteration}.ssmo")
    if state.distributions is not None:
        (directory / f"distributions_{state.iteration}.json").write_text(state.distributions.to_json())
    (directory / "refinement.json").write_text(json.dumps(state.summary(), indent=2))
