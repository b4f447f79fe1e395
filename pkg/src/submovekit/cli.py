"""``submovekit`` command line: synth, train, refine, decompose, bench, eval.

Anything beyond paths, seed and verbosity goes into a JSON config whose
top-level keys depend on the command (see ``RunConfig`` subclasses). Unknown
keys are rejected. Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import PeakDetectorParams, ScattershotParams, peak_detector_decompose, scattershot_decompose
from .signal import InvalidInputError, VelocitySeries, prepare_recording
from .syngen import ColdStartConfig, parse_snr

log = logging.getLogger("submovekit")

THREADS_ENV = "SUBMOVEKIT_THREADS"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------- configs


def _from_dict(cls, data, where: str):
    """Build dataclass ``cls`` from ``data``, recursing into dataclass fields."""
    if not isinstance(data, dict):
        raise ConfigError(where, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}" if where else unknown[0], "unknown key")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            value = _from_dict(tp, value, f"{where}.{key}" if where else key)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        name = msg.split(":", 1)[0] if ":" in msg and " " not in msg.split(":", 1)[0] else ""
        raise ConfigError(".".join(p for p in (where, name) if p) or cls.__name__, msg) from exc


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


@dataclass
class NetworkBlock:
    hidden_channels: list = field(default_factory=lambda: [8, 16, 32, 64, 128, 128, 256, 256])
    hidden_kernel: int = 13
    output_kernel: int = 3
    dropout: float = 0.2


@dataclass
class ScheduleBlock:
    batch_size: int = 32
    batches_per_epoch: int = 200
    pretrain_epochs: int = 4
    reconstruction_start_epoch: int = 2
    dropout_epochs: int = 3
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    loss_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    alpha: float = 0.9


@dataclass
class ColdStartBlock:
    duration_range: list = field(default_factory=lambda: [0.085, 1.0])
    interval_fraction_range: list = field(default_factory=lambda: [0.0, 1.5])
    min_onset_gap: int = 2
    trial_length_range: list = field(default_factory=lambda: [100, 500])
    kappa: float = ColdStartConfig.kappa
    snr_range_db: list = field(default_factory=lambda: [10.0, 50.0])
    noise_free_fraction: float = 0.2

    def build(self) -> ColdStartConfig:
        try:
            return ColdStartConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in dataclasses.asdict(self).items()})
        except ValueError as exc:
            raise ConfigError("coldstart." + str(exc).split(":", 1)[0], str(exc)) from exc


@dataclass
class EvalBlock:
    overlap_range: list = field(default_factory=lambda: [1.0, 1.5])
    snr_db: typing.Any = "inf"
    length: int = 1000


@dataclass
class PeakBlock:
    sigma: float = 2.5
    theta: float = 0.0375


@dataclass
class ScattershotBlock:
    window: int = 120
    hop: int = 60
    restarts: int = 10
    patience: int = 1
    error_threshold: float = 0.15
    displacement_bound: float = 3.0
    max_submovements: int = 12


@dataclass
class RunConfig:
    seed: int = 0


@dataclass
class SynthConfig(RunConfig):
    kind: str = "coldstart"
    n_trials: int = 4
    coldstart: ColdStartBlock = field(default_factory=ColdStartBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)

    def __post_init__(self):
        if self.kind not in ("coldstart", "eval"):
            raise ValueError("kind: must be 'coldstart' or 'eval'")
        if self.n_trials < 1:
            raise ValueError("n_trials: must be positive")


@dataclass
class TrainConfig(RunConfig):
    network: NetworkBlock = field(default_factory=NetworkBlock)
    schedule: ScheduleBlock = field(default_factory=ScheduleBlock)
    coldstart: ColdStartBlock = field(default_factory=ColdStartBlock)
    rectify: bool = False


@dataclass
class RefineBlock:
    max_iterations: int = 5
    batch_size: int = 32
    batches_per_epoch: int = 200
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    plateau_tolerance: float = 1e-3
    plateau_window: int = 3


@dataclass
class RefineConfig(RunConfig):
    weights: str = ""
    corpus: list = field(default_factory=list)
    held_out_fraction: float = 0.2
    refinement: RefineBlock = field(default_factory=RefineBlock)
    coldstart: ColdStartBlock = field(default_factory=ColdStartBlock)

    def __post_init__(self):
        if not self.weights:
            raise ValueError("weights: path required")
        if not self.corpus:
            raise ValueError("corpus: at least one CSV file or directory required")
        if not 0 < self.held_out_fraction < 1:
            raise ValueError("held_out_fraction: must lie in (0, 1)")


METHODS = ("detector", "peak", "scattershot")


@dataclass
class DecomposeConfig(RunConfig):
    method: str = "detector"
    weights: str = ""
    inputs: list = field(default_factory=list)
    column: typing.Any = None
    threshold: float = 0.5
    peak: PeakBlock = field(default_factory=PeakBlock)
    scattershot: ScattershotBlock = field(default_factory=ScattershotBlock)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method: must be one of {METHODS}")
        if self.method == "detector" and not self.weights:
            raise ValueError("weights: path required for the detector")
        if not self.inputs:
            raise ValueError("inputs: at least one CSV path required")


@dataclass
class ConditionBlock:
    overlap_range: list = field(default_factory=lambda: [1.0, 1.5])
    snr_db: typing.Any = "inf"


@dataclass
class BenchConfig(RunConfig):
    methods: list = field(default_factory=lambda: ["peak"])
    weights: str = ""
    trials_per_condition: int = 128
    conditions: list = field(default_factory=lambda: [{"overlap_range": [1.0, 1.5], "snr_db": "inf"}])
    peak: PeakBlock = field(default_factory=PeakBlock)
    scattershot: ScattershotBlock = field(default_factory=ScattershotBlock)

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"methods: unknown method {m!r}")
        if not self.methods:
            raise ValueError("methods: at least one method required")
        if "detector" in self.methods and not self.weights:
            raise ValueError("weights: path required for the detector")
        parsed = []
        for i, c in enumerate(self.conditions):
            parsed.append(_from_dict(ConditionBlock, c, f"conditions[{i}]"))
        self.conditions = parsed


@dataclass
class EvalConfig(RunConfig):
    method: str = "peak"
    weights: str = ""
    trials: str = ""
    peak: PeakBlock = field(default_factory=PeakBlock)
    scattershot: ScattershotBlock = field(default_factory=ScattershotBlock)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method: must be one of {METHODS}")
        if not self.trials:
            raise ValueError("trials: directory of generated trials required")
        if self.method == "detector" and not self.weights:
            raise ValueError("weights: path required for the detector")


CONFIGS = {
    "synth": SynthConfig,
    "train": TrainConfig,
    "refine": RefineConfig,
    "decompose": DecomposeConfig,
    "bench": BenchConfig,
    "eval": EvalConfig,
}


def load_config(command: str, path: str | None, seed: int | None) -> RunConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    if seed is not None:
        data["seed"] = seed
    return _from_dict(CONFIGS[command], data, "")


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: RunConfig, files: list[Path], extra: dict | None = None) -> Path:
    doc = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config": _to_dict(config),
        "config_hash": config_hash(config),
        "files": {p.relative_to(out).as_posix(): _sha256(p) for p in sorted(files)},
    }
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _ensure_dir(out: str) -> Path:
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output path not writable: {p} ({exc.strerror})") from exc
    return p


# ---------------------------------------------------------------- commands


def _schedule(block: ScheduleBlock):
    from .detector import TrainingSchedule

    return TrainingSchedule(**{**dataclasses.asdict(block), "loss_weights": tuple(block.loss_weights)})


def _method(name: str, cfg, weights=None):
    if name == "peak":
        params = PeakDetectorParams(**dataclasses.asdict(cfg.peak))
        return lambda s, seed: peak_detector_decompose(s, params)
    if name == "scattershot":
        params = ScattershotParams(**dataclasses.asdict(cfg.scattershot))
        return lambda s, seed: scattershot_decompose(s, params, seed)
    from .detector import as_model, decompose

    model = as_model(weights)
    threshold = getattr(cfg, "threshold", 0.5)
    return lambda s, seed: decompose(model, s, threshold)


def cmd_synth(cfg: SynthConfig, out: Path) -> dict:
    from .syngen import sample_coldstart_trial, sample_eval_trial, trial_rng, write_trial

    files = []
    if cfg.kind == "coldstart":
        cs = cfg.coldstart.build()
    else:
        lo, hi = cfg.eval.overlap_range
        if not 0 <= lo <= hi:
            raise ConfigError("eval.overlap_range", f"empty or negative range [{lo}, {hi}]")
    for k in range(cfg.n_trials):
        rng = trial_rng(cfg.seed, k)
        if cfg.kind == "coldstart":
            trial = sample_coldstart_trial(cs, rng)
        else:
            trial = sample_eval_trial(tuple(cfg.eval.overlap_range), parse_snr(cfg.eval.snr_db), rng, cfg.eval.length)
        files.extend(write_trial(out, k, trial))
    write_manifest(out, "synth", cfg, files)
    return {"trials": cfg.n_trials}


def cmd_train(cfg: TrainConfig, out: Path) -> dict:
    from .detector import TfcnConfig, save_weights, train
    from .syngen import ColdStartSource

    net = TfcnConfig(**dataclasses.asdict(cfg.network))
    result = train(_schedule(cfg.schedule), ColdStartSource(cfg.coldstart.build()), cfg.seed, net, rectify=cfg.rectify)
    path = save_weights(result.model, out / "weights.ssmo")
    metrics = [dataclasses.asdict(m) for m in result.metrics]
    mpath = out / "training_metrics.json"
    mpath.write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "train", cfg, [path, mpath])
    return {"weights": str(path), "epochs": len(metrics)}


def _collect_csvs(entries) -> list[Path]:
    paths = []
    for e in entries:
        p = Path(e)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.csv")))
        elif p.is_file():
            paths.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
    if not paths:
        raise InvalidInputError("corpus: no CSV recordings found")
    return paths


def cmd_refine(cfg: RefineConfig, out: Path) -> dict:
    from .bootstrap import RefinementSchedule, RefinementState, refine
    from .detector import load_weights, save_weights

    weights = load_weights(cfg.weights)
    paths = _collect_csvs(cfg.corpus)
    series = [prepare_recording(p) for p in paths]
    order = np.random.default_rng(cfg.seed).permutation(len(series))
    n_held = max(1, int(round(cfg.held_out_fraction * len(series))))
    if n_held >= len(series):
        raise InvalidInputError("corpus: need at least two recordings to hold one out")
    held = [series[i] for i in order[:n_held]]
    train_set = [series[i] for i in order[n_held:]]
    r = cfg.refinement
    schedule = RefinementSchedule(
        max_iterations=r.max_iterations, batch_size=r.batch_size, batches_per_epoch=r.batches_per_epoch,
        lr_start=r.lr_start, lr_end=r.lr_end, plateau_tolerance=r.plateau_tolerance, plateau_window=r.plateau_window,
    )
    state = RefinementState.initial(weights, held)
    state = refine(state, train_set, held, schedule, cfg.coldstart.build(), cfg.seed, checkpoint_dir=out / "checkpoints")
    path = save_weights(state.best_weights, out / "weights.ssmo")
    spath = out / "refinement.json"
    spath.write_text(json.dumps(state.summary(), indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "refine", cfg, [path, spath])
    return {"weights": str(path), "iterations": state.iteration, "best_r2": state.best_r2}


def cmd_decompose(cfg: DecomposeConfig, out: Path) -> dict:
    from .primitive import submovements_to_json

    method = _method(cfg.method, cfg, cfg.weights or None)
    files = []
    for i, p in enumerate(_collect_csvs(cfg.inputs)):
        series = prepare_recording(p, column=cfg.column)
        subs = method(series, cfg.seed + i)
        path = out / f"{Path(p).stem}.submovements.json"
        path.write_text(submovements_to_json(subs, indent=2) + "\n", encoding="utf-8")
        files.append(path)
    write_manifest(out, "decompose", cfg, files)
    return {"outputs": [str(f) for f in files]}


def cmd_bench(cfg: BenchConfig, out: Path) -> dict:
    from .evalbench import Condition, run_benchmark

    methods = {m: _method(m, cfg, cfg.weights or None) for m in cfg.methods}
    conditions = []
    for i, c in enumerate(cfg.conditions):
        lo, hi = c.overlap_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"conditions[{i}].overlap_range", f"empty or negative range [{lo}, {hi}]")
        conditions.append(Condition((float(lo), float(hi)), parse_snr(c.snr_db)))
    report = run_benchmark(methods, conditions, cfg.trials_per_condition, cfg.seed)
    csv_path = out / "report.csv"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    json_path = out / "report.json"
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")
    # the JSON carries timings, so only the CSV is hashed for reproducibility
    write_manifest(out, "bench", cfg, [csv_path], {"report_json": json_path.name})
    return {"rows": len(report.rows)}


def cmd_eval(cfg: EvalConfig, out: Path) -> dict:
    from .evalbench import METRICS, trial_metrics
    from .syngen import read_trial

    directory = Path(cfg.trials)
    ks = sorted(int(p.stem.split("_")[1]) for p in directory.glob("trial_*.json"))
    if not ks:
        raise FileNotFoundError(f"no trial_*.json files in {directory}")
    method = _method(cfg.method, cfg, cfg.weights or None)
    rows = []
    for k in ks:
        trial = read_trial(directory, k)
        rows.append({"trial": k, **trial_metrics(list(method(trial.noisy, cfg.seed + k)), trial)})
    summary = {m: float(np.nanmean([r[m] for r in rows])) if any(not math.isnan(r[m]) for r in rows) else None for m in METRICS}
    doc = {"method": cfg.method, "summary": summary, "per_trial": [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in rows]}
    path = out / "eval.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out, "eval", cfg, [path])
    return {"trials": len(rows), **{k: v for k, v in summary.items() if k in ("recon_r2", "onset_f1")}}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "refine": cmd_refine,
    "decompose": cmd_decompose,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="submovekit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _error(exc: BaseException) -> dict:
    from .detector import InvalidWeightsError, WeightsVersionError

    doc = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        doc["field"] = exc.field
    if isinstance(exc, WeightsVersionError):
        doc["expected_version"], doc["found_version"] = exc.expected, exc.found
    if isinstance(exc, OSError) and exc.filename:
        doc["path"] = str(exc.filename)
    if isinstance(exc, InvalidWeightsError):
        doc["kind"] = "weights"
    return doc


def _threads():
    n = os.environ.get(THREADS_ENV)
    if n:
        import torch

        torch.set_num_threads(int(n))
        return int(n)
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose == 0 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        threads = _threads()
        cfg = load_config(args.command, args.config, args.seed)
        digest = config_hash(cfg)
        out = _ensure_dir(args.out)
        log.info("submovekit %s %s seed=%d config=%s threads=%s", __version__, args.command, cfg.seed, digest, threads)
        result = COMMANDS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error
        log.debug("failure", exc_info=True)
        print(json.dumps(_error(exc)), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    wall = time.perf_counter() - t0
    log.info("submovekit %s %s seed=%d config=%s wall=%.2fs", __version__, args.command, cfg.seed, digest, wall)
    print(json.dumps({"command": args.command, "config_hash": digest, "seed": cfg.seed, "wall_time_s": round(wall, 3), **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
