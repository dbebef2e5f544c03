"""Round-log CSV round trips, run summaries, Pareto curves and the static-q gridsearch."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .sim import RoundLog

log = logging.getLogger(__name__)

CSV_FIELDS = (
    "round",
    "clients",
    "levels",
    "uplink_bytes",
    "total_bytes",
    "level",
    "loss",
    "running_loss",
    "accuracy",
    "test_loss",
)


def _ints(values: Iterable[int]) -> str:
    return " ".join(str(int(v)) for v in values)


def _opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


def round_rows(logs: Sequence[RoundLog]) -> list[dict]:
    rows = []
    for entry in logs:
        rows.append(
            {
                "round": entry.round,
                "clients": _ints(entry.clients),
                "levels": _ints(entry.levels),
                "uplink_bytes": _ints(entry.uplink_bytes),
                "total_bytes": entry.total_bytes,
                "level": entry.level,
                # repr keeps every bit of the double
                "loss": repr(float(entry.loss)),
                "running_loss": repr(float(entry.running_loss)),
                "accuracy": "" if entry.accuracy is None else repr(float(entry.accuracy)),
                "test_loss": "" if entry.test_loss is None else repr(float(entry.test_loss)),
            }
        )
    return rows


def write_round_csv(logs: Sequence[RoundLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(round_rows(logs))


def read_round_csv(path: str | Path) -> list[RoundLog]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        logs = []
        for row in reader:
            entry = RoundLog(
                round=int(row["round"]),
                clients=tuple(int(v) for v in row["clients"].split()),
                levels=tuple(int(v) for v in row["levels"].split()),
                uplink_bytes=tuple(int(v) for v in row["uplink_bytes"].split()),
                level=int(row["level"]),
                loss=float(row["loss"]),
                running_loss=float(row["running_loss"]),
                accuracy=_opt_float(row["accuracy"]),
                test_loss=_opt_float(row["test_loss"]),
            )
            if entry.total_bytes != int(row["total_bytes"]):
                raise ValueError(f"{path}: round {entry.round} total_bytes does not match uplink_bytes")
            logs.append(entry)
    return logs


# -- summaries -----------------------------------------------------------------------------------


def total_bytes(logs: Sequence[RoundLog]) -> int:
    return int(sum(entry.total_bytes for entry in logs))


def best_accuracy(logs: Sequence[RoundLog]) -> float:
    accs = [entry.accuracy for entry in logs if entry.accuracy is not None]
    if not accs:
        raise ValueError("logs contain no evaluations")
    return float(max(accs))


def final_accuracy(logs: Sequence[RoundLog]) -> float:
    for entry in reversed(logs):
        if entry.accuracy is not None:
            return float(entry.accuracy)
    raise ValueError("logs contain no evaluations")


def compression_factor(reference_bytes: float, run_bytes: float) -> float:
    if run_bytes <= 0:
        raise ValueError("run transmitted no bytes")
    return float(reference_bytes) / float(run_bytes)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class RunSummary:
    name: str
    seeds: list[int]
    best_accuracy: list[float]
    final_accuracy: list[float]
    total_bytes: list[int]
    factors: dict[str, float] = field(default_factory=dict)

    @property
    def mean_bytes(self) -> float:
        return float(np.mean(self.total_bytes))

    def accuracy_stats(self) -> tuple[float, float]:
        return mean_std(self.best_accuracy)


def summarize(name: str, runs: Mapping[int, Sequence[RoundLog]], references: Mapping[str, float] | None = None) -> RunSummary:
    """Aggregate per-seed logs; ``references`` maps a label to a mean byte total."""
    seeds = sorted(runs)
    summary = RunSummary(
        name=name,
        seeds=seeds,
        best_accuracy=[best_accuracy(runs[s]) for s in seeds],
        final_accuracy=[final_accuracy(runs[s]) for s in seeds],
        total_bytes=[total_bytes(runs[s]) for s in seeds],
    )
    for label, ref in (references or {}).items():
        summary.factors[label] = compression_factor(ref, summary.mean_bytes)
    return summary


def format_summary(summaries: Sequence[RunSummary]) -> str:
    labels = sorted({k for s in summaries for k in s.factors})
    head = f"{'run':<24} {'seeds':>5} {'best acc (%)':>16} {'final acc (%)':>14} {'uplink (MB)':>12}"
    head += "".join(f" {'x ' + k:>14}" for k in labels)
    lines = [head]
    for s in summaries:
        mean, std = s.accuracy_stats()
        line = (
            f"{s.name:<24} {len(s.seeds):>5} {100 * mean:>9.2f} ± {100 * std:<4.2f} "
            f"{100 * np.mean(s.final_accuracy):>14.2f} {s.mean_bytes / 1e6:>12.4f}"
        )
        line += "".join(f" {s.factors[k]:>14.2f}" if k in s.factors else f" {'-':>14}" for k in labels)
        lines.append(line)
    return "\n".join(lines)


def write_summary_csv(summaries: Sequence[RunSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "seed", "best_accuracy", "final_accuracy", "total_bytes"])
        for s in summaries:
            for seed, best, final, nbytes in zip(s.seeds, s.best_accuracy, s.final_accuracy, s.total_bytes):
                writer.writerow([s.name, seed, repr(best), repr(final), nbytes])


# -- Pareto curves -------------------------------------------------------------------------------


def pareto_curve(logs: Sequence[RoundLog]) -> list[tuple[int, float]]:
    """(cumulative uplink bytes, best accuracy so far) at every evaluated round."""
    curve = []
    spent = 0
    best = -np.inf
    for entry in logs:
        spent += entry.total_bytes
        if entry.accuracy is not None:
            best = max(best, entry.accuracy)
            curve.append((spent, float(best)))
    return curve


def mean_pareto_curve(runs: Sequence[Sequence[RoundLog]]) -> list[tuple[float, float]]:
    """Average per-seed curves point by point; all runs must share an evaluation schedule."""
    curves = [pareto_curve(logs) for logs in runs]
    if not curves:
        return []
    if len({len(c) for c in curves}) != 1:
        raise ValueError("runs have different evaluation schedules")
    arr = np.array(curves, dtype=float)
    mean = arr.mean(axis=0)
    return [(float(x), float(y)) for x, y in mean]


def accuracy_at_budget(curve: Sequence[tuple[float, float]], budget: float) -> float:
    """Best accuracy reached without exceeding ``budget`` bytes (-inf before the first point)."""
    best = -np.inf
    for spent, acc in curve:
        if spent > budget:
            break
        best = acc
    return best


def pareto_dominates(a: Sequence[tuple[float, float]], b: Sequence[tuple[float, float]], skip_fraction: float = 0.1) -> bool:
    """True if curve ``a`` is at least ``b`` at every budget in the shared byte range.

    The shared range ends at the smaller of the two final budgets; the first
    ``skip_fraction`` of it is ignored.
    """
    if not a or not b:
        raise ValueError("empty curve")
    end = min(a[-1][0], b[-1][0])
    start = skip_fraction * end
    budgets = sorted({x for x, _ in list(a) + list(b) if start <= x <= end} | {start, end})
    return all(accuracy_at_budget(a, x) >= accuracy_at_budget(b, x) for x in budgets)


def write_curve_csv(curve: Sequence[tuple[float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["uplink_bytes", "best_accuracy"])
        for x, y in curve:
            writer.writerow([repr(float(x)), repr(float(y))])


# -- gridsearch ----------------------------------------------------------------------------------


@dataclass
class GridsearchResult:
    level: int
    qualified: bool
    accuracies: dict[int, float]
    baseline: float


def gridsearch_static_q(
    mean_accuracy: Callable[[int], float],
    baseline: float,
    max_level: int = 2**16,
) -> GridsearchResult:
    """Lowest q in 1, 2, 4, ... whose mean accuracy reaches ``baseline``.

    If no level up to ``max_level`` qualifies, this logs a warning and returns
    the largest level tried.
    """
    accuracies = {}
    q = 1
    while q <= max_level:
        accuracies[q] = float(mean_accuracy(q))
        log.info("gridsearch q=%d accuracy=%.4f baseline=%.4f", q, accuracies[q], baseline)
        if accuracies[q] >= baseline:
            return GridsearchResult(q, True, accuracies, baseline)
        q *= 2
    largest = max(accuracies)
    log.warning("no static level up to %d reached the baseline accuracy %.4f; using q=%d", max_level, baseline, largest)
    return GridsearchResult(largest, False, accuracies, baseline)
