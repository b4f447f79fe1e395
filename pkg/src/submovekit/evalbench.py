"""Onset matching, clipped R^2 and the synthetic benchmark harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .primitive import Submovement, compose
from .syngen import SyntheticTrial, sample_eval_trial, trial_rng

log = logging.getLogger(__name__)

ONSET_TOLERANCE = 5

Method = Callable[[object, int], Sequence[Submovement]]


@dataclass
class MatchResult:
    true_positives: list[tuple[int, int]]
    false_positives: list[int]
    false_negatives: list[int]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.true_positives), len(self.false_positives), len(self.false_negatives)


def _candidates(pred, truth, tolerance):
    P = np.array([s.onset for s in pred], dtype=float)
    G = np.array([s.onset for s in truth], dtype=float)
    sp = np.sign([s.displacement for s in pred])
    sg = np.sign([s.displacement for s in truth])
    dist = np.abs(P[:, None] - G[None, :])
    ok = (dist <= tolerance) & (sp[:, None] == sg[None, :])
    return dist, ok


def match_onsets(pred: Sequence[Submovement], truth: Sequence[Submovement], tolerance: int = ONSET_TOLERANCE) -> MatchResult:
    """One-to-one matching of predicted to true onsets.

    A pair is admissible when the onsets are within ``tolerance`` samples and
    the displacement signs agree. The matching maximizes the number of pairs
    and, among maximum matchings, the total onset distance is minimal, so
    each truth is paired with the closest prediction the assignment allows.
    """
    if not pred or not truth:
        return MatchResult([], list(range(len(pred))), list(range(len(truth))))
    dist, ok = _candidates(pred, truth, tolerance)
    # each admissible pair is worth a big constant minus a small distance
    # penalty; index terms break remaining ties deterministically
    big = (tolerance + 1) * (len(pred) + len(truth) + 1) * 4.0
    n_p, n_g = dist.shape
    tie = (np.arange(n_p)[:, None] * n_g + np.arange(n_g)[None, :]) / (n_p * n_g * big)
    cost = np.where(ok, dist - big + tie, 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted((int(r), int(c)) for r, c in zip(rows, cols) if ok[r, c])
    mp = {r for r, _ in pairs}
    mg = {c for _, c in pairs}
    return MatchResult(pairs, [i for i in range(n_p) if i not in mp], [j for j in range(n_g) if j not in mg])


def f1(match: MatchResult) -> float:
    tp, fp, fn = match.counts
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2 * tp / denom


def r2_clipped(predicted, true) -> float:
    """Coefficient of determination clipped below at 0.

    Constant ``true``: 1 for an exact match, else 0.
    """
    y = np.asarray(true, dtype=float)
    yhat = np.asarray(predicted, dtype=float)
    if y.shape != yhat.shape or y.size < 2:
        raise ValueError("r2 needs two equal-length sequences of at least 2 values")
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return max(0.0, 1.0 - ss_res / ss_tot)


def sm_rate(submovements: Sequence[Submovement], duration_s: float) -> float:
    if not duration_s > 0:
        raise ValueError("duration must be positive")
    return len(submovements) / duration_s


METRICS = ("recon_r2", "onset_f1", "displacement_r2", "duration_r2", "correct_sm_per_s", "spurious_sm_per_s")


def trial_metrics(pred: Sequence[Submovement], trial: SyntheticTrial) -> dict:
    """Per-recording supervised and unsupervised scores.

    Parameter R^2 values are NaN when fewer than two pairs matched.
    """
    truth = trial.submovements
    n = len(trial.clean)
    seconds = n / trial.clean.rate
    valid = [s for s in pred if 0 <= s.onset < n]
    recon = compose(valid, n, trial.clean.rate).values
    m = match_onsets(pred, truth)
    tp, fp, fn = m.counts
    out = {
        "recon_r2": r2_clipped(recon, trial.clean.values),
        "onset_f1": f1(m),
        "displacement_r2": math.nan,
        "duration_r2": math.nan,
        "correct_sm_per_s": tp / seconds,
        "spurious_sm_per_s": fp / seconds,
        "n_pred": len(pred),
        "n_true": len(truth),
        "tp": tp,
        "fp": fp,
        "fn": fn,
    }
    if tp >= 2:
        pi, gi = zip(*m.true_positives)
        out["displacement_r2"] = r2_clipped([pred[i].displacement for i in pi], [truth[j].displacement for j in gi])
        out["duration_r2"] = r2_clipped([pred[i].duration for i in pi], [truth[j].duration for j in gi])
    return out


def _stats(values) -> dict:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if v.size == 0:
        return {"mean": math.nan, "q25": math.nan, "q75": math.nan}
    q25, q75 = np.percentile(v, [25, 75])
    return {"mean": float(v.mean()), "q25": float(q25), "q75": float(q75)}


@dataclass
class Condition:
    overlap_range: tuple[float, float]
    snr_db: float

    @property
    def label(self) -> str:
        lo, hi = self.overlap_range
        snr = "inf" if math.isinf(self.snr_db) else f"{self.snr_db:g}"
        return f"{lo:g}-{hi:g}@{snr}"


@dataclass
class BenchmarkRow:
    method: str
    condition: Condition
    stats: dict
    n_trials: int
    n_failed: int
    runtime_s_per_signal_s: float
    per_trial: list[dict] = field(default_factory=list)


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    seed: int
    trials_per_condition: int

    CSV_COLUMNS = (
        ["method", "overlap_lo", "overlap_hi", "snr_db", "n_trials", "n_failed"]
        + [f"{m}_mean" for m in METRICS]
        + ["recon_r2_q25", "recon_r2_q75", "onset_f1_q25", "onset_f1_q75"]
    )

    def to_csv(self) -> str:
        """Deterministic CSV (timings live in the JSON report only)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            lo, hi = r.condition.overlap_range
            snr = "inf" if math.isinf(r.condition.snr_db) else repr(float(r.condition.snr_db))
            cells = [r.method, repr(float(lo)), repr(float(hi)), snr, r.n_trials, r.n_failed]
            cells += [_fmt(r.stats[m]["mean"]) for m in METRICS]
            cells += [_fmt(r.stats[m][q]) for m in ("recon_r2", "onset_f1") for q in ("q25", "q75")]
            w.writerow(cells)
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "trials_per_condition": self.trials_per_condition,
            "rows": [
                {
                    "method": r.method,
                    "overlap_range": list(r.condition.overlap_range),
                    "snr_db": "inf" if math.isinf(r.condition.snr_db) else r.condition.snr_db,
                    "n_trials": r.n_trials,
                    "n_failed": r.n_failed,
                    "runtime_s_per_signal_s": r.runtime_s_per_signal_s,
                    "stats": r.stats,
                    "per_trial": r.per_trial,
                }
                for r in self.rows
            ],
        }
        return json.dumps(_nan_to_none(doc), indent=2)

    def row(self, method: str, condition_label: str | None = None) -> BenchmarkRow:
        for r in self.rows:
            if r.method == method and (condition_label is None or r.condition.label == condition_label):
                return r
        raise KeyError(method)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def benchmark_trials(condition: Condition, n: int, seed: int, condition_index: int) -> list[SyntheticTrial]:
    return [sample_eval_trial(condition.overlap_range, condition.snr_db, trial_rng(seed, condition_index, k)) for k in range(n)]


def run_benchmark(
    methods: dict[str, Method],
    conditions: Sequence[Condition],
    trials_per_condition: int = 128,
    rng_seed: int = 0,
) -> BenchmarkReport:
    """Evaluate every method on the same seeded trial set per condition.

    Methods are called as ``method(noisy_series, seed)`` and must return a
    list of :class:`Submovement`. A method raising on a trial is counted in
    ``n_failed`` and excluded from the averages.
    """
    if not methods or not conditions:
        raise ValueError("need at least one method and one condition")
    rows = []
    for ci, cond in enumerate(conditions):
        trials = benchmark_trials(cond, trials_per_condition, rng_seed, ci)
        for name, method in methods.items():
            per_trial, failed, elapsed, signal_s = [], 0, 0.0, 0.0
            for k, trial in enumerate(trials):
                t0 = time.perf_counter()
                try:
                    pred = list(method(trial.noisy, int(rng_seed) * 1_000_003 + k))
                except Exception as exc:  # noqa: BLE001 - recorded as a failed trial
                    log.warning("%s failed on trial %d of %s: %s", name, k, cond.label, exc)
                    failed += 1
                    continue
                elapsed += time.perf_counter() - t0
                signal_s += trials[k].clean.duration
                per_trial.append({"trial": k, **trial_metrics(pred, trial)})
            stats = {m: _stats([t[m] for t in per_trial]) for m in METRICS}
            runtime = elapsed / signal_s if signal_s else math.nan
            rows.append(BenchmarkRow(name, cond, stats, len(trials), failed, runtime, per_trial))
            log.info("%s %s: recon %.3f f1 %.3f", name, cond.label, stats["recon_r2"]["mean"], stats["onset_f1"]["mean"])
    return BenchmarkReport(rows, rng_seed, trials_per_condition)
