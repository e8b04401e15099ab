"""Tables, CSV and figures from experiment records."""

from __future__ import annotations

import os
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence, Union

from ..errors import EmptyInput
from .plotting import ARCH_LABELS, ARCH_MARKERS, new_figure, save
from .records import EvaluationReport, ExperimentRecord, records_to_csv

FORMATS = ("table", "csv", "plot")
GRID_WAYS = (5, 20)
GRID_SHOTS = (1, 5)


def _pct(x) -> str:
    return "-" if x is None else f"{100 * x:.2f}"


def _render(header: Sequence[str], rows: List[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    fmt = lambda cells: "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"
    return "\n".join([line, fmt(header), line, *(fmt(r) for r in rows), line]) + "\n"


def records_table(records: List[ExperimentRecord]) -> str:
    """One row per record: arch, dataset, parameter count and every metric (percent)."""
    if not records:
        raise EmptyInput("no records to tabulate")
    keys = sorted({k for r in records for k in r.metrics})
    header = ["experiment", "architecture", "dataset", "NP", *keys]
    rows = [[r.experiment_tag, ARCH_LABELS.get(r.arch, r.arch), r.dataset, f"{r.parameter_count:,}",
             *(_pct(r.metrics.get(k)) for k in keys)] for r in records]
    return _render(header, rows)


def _grid_cells(items) -> Dict[str, Dict[tuple, float]]:
    cells: Dict[str, Dict[tuple, float]] = defaultdict(dict)
    for it in items:
        if isinstance(it, EvaluationReport):
            cells[it.arch][(it.n_way, it.k_shot)] = it.mean_acc
        else:
            for key, value in it.metrics.items():
                if key.endswith("shot") and "way_" in key:
                    way, shot = key[:-4].split("way_")
                    cells[it.arch][(int(way), int(shot))] = value
    return cells


def fewshot_grid_table(items) -> str:
    """Architectures by {5, 20}-way x {1, 5}-shot accuracy (percent)."""
    cells = _grid_cells(items)
    if not cells:
        raise EmptyInput("no few-shot results to tabulate")
    header = ["architecture"] + [f"{w}-way {s}-shot" for w in GRID_WAYS for s in GRID_SHOTS]
    rows = [[ARCH_LABELS.get(a, a)] + [_pct(cells[a].get((w, s))) for w in GRID_WAYS for s in GRID_SHOTS]
            for a in sorted(cells)]
    return _render(header, rows)


def plot_limited_samples(records: List[ExperimentRecord], path) -> Path:
    """Top-1 test accuracy against training samples per class, one line per arch."""
    series = defaultdict(list)
    for r in records:
        n = r.config.get("samples_per_class")
        if n is not None and "top1" in r.metrics:
            series[r.arch].append((n, r.metrics["top1"]))
    if not series:
        raise EmptyInput("no limited-sample records to plot")
    fig, ax = new_figure()
    for arch in sorted(series):
        pts = sorted(series[arch])
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker=ARCH_MARKERS.get(arch, "o"),
                label=ARCH_LABELS.get(arch, arch))
    ax.set_xlabel("training samples per class")
    ax.set_ylabel("top-1 test accuracy (%)")
    ax.legend()
    save(fig, path)
    return Path(path)


def plot_fewshot_grid(items, path) -> Path:
    cells = _grid_cells(items)
    if not cells:
        raise EmptyInput("no few-shot results to plot")
    combos = [(w, s) for w in GRID_WAYS for s in GRID_SHOTS
              if any((w, s) in c for c in cells.values())]
    fig, ax = new_figure()
    width = 0.8 / len(cells)
    for j, arch in enumerate(sorted(cells)):
        xs = [i + j * width for i in range(len(combos))]
        ax.bar(xs, [100 * cells[arch].get(c, 0.0) for c in combos], width, label=ARCH_LABELS.get(arch, arch))
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(combos))])
    ax.set_xticklabels([f"{w}-way\n{s}-shot" for w, s in combos])
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    save(fig, path)
    return Path(path)


def report(items, fmt: str, out_dir: Union[str, os.PathLike]) -> List[Path]:
    """Write ``fmt`` output for ``items`` (experiment records and/or evaluation reports) into ``out_dir``."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    items = list(items)
    if not items:
        raise EmptyInput("no records given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [r for r in items if isinstance(r, ExperimentRecord)]
    written = []
    if fmt == "table":
        parts = []
        if records:
            parts.append(records_table(records))
        if _grid_cells(items):
            parts.append(fewshot_grid_table(items))
        (out / "results.txt").write_text("\n".join(parts))
        written.append(out / "results.txt")
    elif fmt == "csv":
        (out / "results.csv").write_text(records_to_csv(records))
        written.append(out / "results.csv")
    else:
        if any(r.config.get("samples_per_class") is not None for r in records):
            written.append(plot_limited_samples(records, out / "limited_samples.png"))
        if _grid_cells(items):
            written.append(plot_fewshot_grid(items, out / "fewshot_grid.png"))
        if not written:
            raise EmptyInput("nothing plottable: need limited-sample sweep or few-shot records")
    return written
