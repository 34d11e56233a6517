"""Summaries over finished runs: curves, rounds-to-target, speedups.

Reads the per-round metrics CSVs written by the engine, averages test
accuracy across seeds per selector, smooths the averaged curve, and
reports the first round each selector reaches a target accuracy plus its
speedup relative to the random baseline. Smoothing happens here only;
stored metrics are raw.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import METRICS_COLUMNS, savitzky_golay
from .errors import ConfigError


@dataclass
class MetricsFile:
    """Evaluated accuracy points of one run."""

    selector: str
    rounds: np.ndarray
    accuracy: np.ndarray


def load_metrics_csv(path) -> MetricsFile:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"metrics file not found: {p}")
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_COLUMNS:
            raise ConfigError(f"{p}: unexpected metrics header {header}")
        selector = None
        rounds, accs = [], []
        for row in reader:
            selector = row[1]
            if row[5] != "":
                rounds.append(int(row[0]))
                accs.append(float(row[5]))
    if selector is None:
        raise ConfigError(f"{p}: no metric rows")
    if not rounds:
        raise ConfigError(f"{p}: no evaluated rounds (test_accuracy always blank)")
    return MetricsFile(selector, np.array(rounds), np.array(accs))


def aggregate_by_selector(files: list[MetricsFile]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Mean accuracy per evaluated round across each selector's runs."""
    grouped: dict[str, list[MetricsFile]] = {}
    for f in files:
        grouped.setdefault(f.selector, []).append(f)
    out = {}
    for selector, runs in grouped.items():
        base = runs[0].rounds
        for r in runs[1:]:
            if not np.array_equal(r.rounds, base):
                raise ConfigError(
                    f"runs for selector {selector!r} disagree on evaluated rounds"
                )
        acc = np.mean(np.stack([r.accuracy for r in runs]), axis=0)
        out[selector] = (base, acc)
    return out


def rounds_to_target(rounds: np.ndarray, smoothed: np.ndarray, target: float) -> int | None:
    """First evaluated round whose smoothed accuracy reaches the target."""
    hits = np.flatnonzero(smoothed >= target)
    return int(rounds[hits[0]]) if hits.size else None


def summarize_metrics(
    paths: list, target_acc: float | None = None, window: int = 13, polyorder: int = 3
) -> dict:
    """Cross-run summary keyed by selector; random is the speedup baseline.

    target_acc defaults to the random baseline's final smoothed accuracy.
    Speedups divide random's rounds-to-target by the selector's; the JSON
    payload keeps exact ratios, display rounds to one decimal.
    """
    files = [load_metrics_csv(p) for p in paths]
    curves = aggregate_by_selector(files)
    if "random" not in curves:
        raise ConfigError("summarize needs at least one run of the random selector")
    smoothed = {
        sel: savitzky_golay(acc, window=window, polyorder=polyorder)
        for sel, (rounds, acc) in curves.items()
    }
    if target_acc is None:
        target_acc = float(smoothed["random"][-1])
    rand_rounds, _ = curves["random"]
    rand_rtt = rounds_to_target(rand_rounds, smoothed["random"], target_acc)
    selectors = {}
    for sel, (rounds, acc) in sorted(curves.items()):
        rtt = rounds_to_target(rounds, smoothed[sel], target_acc)
        speedup = None
        if rtt is not None and rand_rtt is not None:
            speedup = rand_rtt / rtt
        selectors[sel] = {
            "num_runs": sum(1 for f in files if f.selector == sel),
            "rounds_to_target": rtt,
            "speedup_vs_random": speedup,
            "final_smoothed_accuracy": float(smoothed[sel][-1]),
        }
    return {
        "target_accuracy": float(target_acc),
        "baseline": "random",
        "selectors": selectors,
        "curves": {
            sel: {
                "rounds": [int(r) for r in rounds],
                "mean_accuracy": [float(a) for a in acc],
                "smoothed_accuracy": [float(a) for a in smoothed[sel]],
            }
            for sel, (rounds, acc) in sorted(curves.items())
        },
    }


def format_summary_table(summary: dict) -> str:
    """Plain-text table with one-decimal speedup ratios."""
    lines = [
        f"target accuracy: {summary['target_accuracy']:.4f}",
        f"{'selector':<20} {'rounds_to_target':>16} {'speedup':>8} {'final_acc':>10}",
    ]
    for sel, row in summary["selectors"].items():
        rtt = row["rounds_to_target"]
        rtt_s = str(rtt) if rtt is not None else "not reached"
        sp = row["speedup_vs_random"]
        sp_s = f"{sp:.1f}x" if sp is not None else "-"
        lines.append(
            f"{sel:<20} {rtt_s:>16} {sp_s:>8} {row['final_smoothed_accuracy']:>10.4f}"
        )
    return "\n".join(lines)
