"""Aggregation of per-run metric reports into tables and plot-ready CSV.

Rows are (method, dataset); cells carry the mean over seeds and a two-sigma
half-width with (n-1) normalization. Deltas are taken against the
source_only arm of the same dataset. Emission is data-only (CSV per figure);
rendering is left to external plotters.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidArgumentError
from .metrics import METRIC_KEYS, MetricReport, load_report

RADAR_METRICS = ("pesq", "si_sdr")


@dataclass(frozen=True)
class Cell:
    mean: float | None
    two_sigma: float | None
    n_seeds: int


@dataclass
class ResultsTable:
    # (method, dataset) -> metric -> Cell
    rows: dict[tuple[str, str], dict[str, Cell]]

    def methods(self) -> list[str]:
        return sorted({m for m, _ in self.rows})

    def datasets(self) -> list[str]:
        return sorted({d for _, d in self.rows})


def _stats(values: list[float]) -> Cell:
    n = len(values)
    mean = sum(values) / n
    if n > 1:
        var = sum((v - mean) ** 2 for v in values) / (n - 1)
        two_sigma = 2.0 * math.sqrt(var)
    else:
        two_sigma = 0.0
    return Cell(mean=mean, two_sigma=two_sigma, n_seeds=n)


def collect_runs(run_root: str | Path) -> dict[str, dict[int, MetricReport]]:
    """method -> seed -> report, scanned from out_dir/seed<k>/<method>/metrics.json."""
    run_root = Path(run_root)
    found: dict[str, dict[int, MetricReport]] = {}
    for metrics_path in sorted(run_root.glob("seed*/*/metrics.json")):
        method = metrics_path.parent.name
        seed = int(metrics_path.parent.parent.name.removeprefix("seed"))
        found.setdefault(method, {})[seed] = load_report(metrics_path)
    if not found:
        raise InvalidArgumentError(f"no metric reports under {run_root}")
    return found


def build_table(dataset_dirs: dict[str, str | Path]) -> ResultsTable:
    """Aggregate per-seed aggregates into (method, dataset) rows."""
    rows: dict[tuple[str, str], dict[str, Cell]] = {}
    for dataset, root in dataset_dirs.items():
        for method, by_seed in collect_runs(root).items():
            cells = {}
            for key in METRIC_KEYS:
                values = [
                    rep.aggregate[key]
                    for rep in by_seed.values()
                    if rep.aggregate.get(key) is not None
                ]
                cells[key] = _stats(values) if values else Cell(None, None, 0)
            rows[(method, dataset)] = cells
    return ResultsTable(rows=rows)


def delta_table(table: ResultsTable, baseline: str = "source_only") -> ResultsTable:
    """Per-dataset deltas of every method against the baseline arm's mean."""
    rows = {}
    for (method, dataset), cells in table.rows.items():
        base = table.rows.get((baseline, dataset))
        if base is None:
            raise InvalidArgumentError(f"dataset {dataset!r} has no {baseline!r} arm")
        deltas = {}
        for key, cell in cells.items():
            if cell.mean is None or base[key].mean is None:
                deltas[key] = Cell(None, None, cell.n_seeds)
            else:
                deltas[key] = Cell(cell.mean - base[key].mean, cell.two_sigma, cell.n_seeds)
        rows[(method, dataset)] = deltas
    return ResultsTable(rows=rows)


def write_table_csv(table: ResultsTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "dataset", "metric", "mean", "two_sigma", "n_seeds"])
        for (method, dataset), cells in sorted(table.rows.items()):
            for key in METRIC_KEYS:
                cell = cells[key]
                writer.writerow(
                    [
                        method,
                        dataset,
                        key,
                        "" if cell.mean is None else f"{cell.mean:.6f}",
                        "" if cell.two_sigma is None else f"{cell.two_sigma:.6f}",
                        cell.n_seeds,
                    ]
                )


def write_radar_csv(deltas: ResultsTable, path: str | Path, baseline: str = "source_only") -> None:
    """Per-dataset perceptual/signal deltas: the radar-figure data model."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "method", "metric", "delta_mean", "two_sigma"])
        for (method, dataset), cells in sorted(deltas.rows.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            if method == baseline:
                continue
            for key in RADAR_METRICS:
                cell = cells[key]
                if cell.mean is None:
                    continue
                writer.writerow([dataset, method, key, f"{cell.mean:.6f}", f"{cell.two_sigma:.6f}"])


def format_table(table: ResultsTable, keys: tuple[str, ...] = METRIC_KEYS) -> str:
    lines = []
    header = ["method", "dataset"] + [k for k in keys]
    lines.append("  ".join(f"{h:>12}" for h in header))
    for (method, dataset), cells in sorted(table.rows.items()):
        row = [f"{method:>12}", f"{dataset:>12}"]
        for key in keys:
            cell = cells[key]
            if cell.mean is None:
                row.append(f"{'-':>12}")
            else:
                row.append(f"{cell.mean:8.3f}±{(cell.two_sigma or 0):.3f}")
        lines.append("  ".join(row))
    return "\n".join(lines)


def write_diet_eval_csv(results: dict[str, dict[str, float]], path: str | Path) -> None:
    """Two-row similarity table (noisy vs transformed) per dataset."""
    datasets = sorted(results)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row"] + datasets)
        writer.writerow(["sim_noisy"] + [f"{results[d]['mean_sim_noisy']:.6f}" for d in datasets])
        writer.writerow(
            ["sim_transformed"]
            + [f"{results[d]['mean_sim_transformed']:.6f}" for d in datasets]
        )


def save_table_json(table: ResultsTable, path: str | Path) -> None:
    payload = {
        f"{method}::{dataset}": {
            key: {"mean": cell.mean, "two_sigma": cell.two_sigma, "n_seeds": cell.n_seeds}
            for key, cell in cells.items()
        }
        for (method, dataset), cells in table.rows.items()
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
