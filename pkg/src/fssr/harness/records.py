"""Experiment records and few-shot evaluation reports (line-delimited JSON)."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Union

from ..errors import EmptyInput

CSV_COLUMNS = ("experiment_tag", "arch", "dataset", "parameter_count", "wall_time_s",
               "metrics", "config", "diagnostics")


@dataclass
class ExperimentRecord:
    experiment_tag: str
    arch: str
    dataset: str
    metrics: Dict[str, float]
    parameter_count: int
    wall_time_s: float
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {k}={v} outside [0, 1]")
        if self.parameter_count <= 0:
            raise ValueError("parameter_count must be positive")
        if "top1" in self.metrics and "top5" in self.metrics and self.metrics["top5"] < self.metrics["top1"]:
            raise ValueError("top5 accuracy below top1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentRecord":
        return cls(**json.loads(text))


@dataclass
class EvaluationReport:
    arch: str
    n_way: int
    k_shot: int
    n_episodes: int
    seed: int
    mean_acc: float
    ci95: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def append_jsonl(path: Union[str, os.PathLike], items: Iterable) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for item in items:
            fh.write(item.to_json() + "\n")


def read_jsonl(path: Union[str, os.PathLike]) -> List[Union[ExperimentRecord, EvaluationReport]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(EvaluationReport(**d) if "n_way" in d and "mean_acc" in d else ExperimentRecord(**d))
    return out


def records_to_csv(records: List[ExperimentRecord]) -> str:
    if not records:
        raise EmptyInput("no records to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.experiment_tag, r.arch, r.dataset, r.parameter_count, repr(r.wall_time_s),
                    json.dumps(r.metrics, sort_keys=True), json.dumps(r.config, sort_keys=True),
                    json.dumps(r.diagnostics, sort_keys=True)])
    return buf.getvalue()


def records_from_csv(text: str) -> List[ExperimentRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [ExperimentRecord(
        experiment_tag=row["experiment_tag"], arch=row["arch"], dataset=row["dataset"],
        metrics=json.loads(row["metrics"]), parameter_count=int(row["parameter_count"]),
        wall_time_s=float(row["wall_time_s"]), config=json.loads(row["config"]),
        diagnostics=json.loads(row["diagnostics"]),
    ) for row in rows]
