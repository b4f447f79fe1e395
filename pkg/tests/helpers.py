"""Shared fixtures: a desk-scale detector trained once and cached on disk."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

from submovekit.detector import DESK_SCHEDULE, TfcnConfig, TrainingSchedule, load_weights, save_weights, train
from submovekit.syngen import ColdStartConfig, ColdStartSource, config_to_dict

CACHE = Path(__file__).resolve().parent.parent / ".cache"
DESK_SEED = 0

log = logging.getLogger(__name__)


def _key(schedule: TrainingSchedule, config: TfcnConfig, cold: ColdStartConfig, seed: int) -> str:
    doc = {
        "schedule": {k: getattr(schedule, k) for k in schedule.__dataclass_fields__},
        "network": {k: getattr(config, k) for k in config.__dataclass_fields__},
        "coldstart": config_to_dict(cold),
        "seed": seed,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=list).encode()).hexdigest()[:16]


def desk_weights(seed: int = DESK_SEED):
    """Weights of the canonical network after the desk-scale schedule.

    Trained on first use (about 20 minutes on one CPU core), then reused.
    Returns ``(weights, seconds_spent_training)``; the training time is kept
    next to the cached weights so a cache hit still reports it.
    """
    import time

    schedule = TrainingSchedule(**DESK_SCHEDULE)
    config = TfcnConfig()
    cold = ColdStartConfig()
    path = CACHE / f"desk_{_key(schedule, config, cold, seed)}.ssmo"
    timing = path.with_suffix(".json")
    if path.exists() and timing.exists():
        return load_weights(path), json.loads(timing.read_text())["train_seconds"]
    t0 = time.perf_counter()
    result = train(schedule, ColdStartSource(cold), seed, config)
    seconds = time.perf_counter() - t0
    CACHE.mkdir(exist_ok=True)
    save_weights(result.model, path)
    timing.write_text(json.dumps({"train_seconds": seconds}))
    return load_weights(path), seconds


# criterion number -> (passed, detail); printed by conftest at session end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)
