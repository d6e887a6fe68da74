"""
Report Models.

This module defines the Pydantic models emitted by pipeline runs and
experiments, together with their on-disk renderings: line-delimited
records, a flat ``KEY=value`` summary and optional CSV tables.
"""

import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


def _flat_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_flat_value(item) for item in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _flatten(prefix: str, value: Any, out: Dict[str, str]) -> None:
    if isinstance(value, dict):
        for key in sorted(value):
            _flatten(f"{prefix}.{key}" if prefix else str(key), value[key], out)
    elif value is not None:
        out[prefix] = _flat_value(value)


class MetricReport(BaseModel):
    """Metric values of one generated set."""

    name: str = Field(..., description="What was evaluated (e.g. gan, mle)")
    seed: int = Field(..., description="Master seed of the run")
    metrics: Dict[str, float] = Field(default_factory=dict, description="Metric name to value")
    length_distribution: Dict[int, float] = Field(default_factory=dict, description="Generated length histogram")
    config: Dict[str, Any] = Field(default_factory=dict, description="Fully resolved run configuration")

    def to_flat_text(self) -> str:
        """``KEY=value`` lines, sorted by key."""
        flat: Dict[str, str] = {"name": self.name, "seed": str(self.seed)}
        _flatten("metric", self.metrics, flat)
        _flatten("length", {str(k): v for k, v in self.length_distribution.items()}, flat)
        return "".join(f"{key}={flat[key]}\n" for key in sorted(flat))

    def write(self, out_dir: Path, stem: str = "metrics") -> List[Path]:
        """Write ``<stem>.txt`` and ``<stem>.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path = out_dir / f"{stem}.txt"
        json_path = out_dir / f"{stem}.json"
        text_path.write_text(self.to_flat_text(), encoding="utf-8")
        json_path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return [text_path, json_path]


class CellError(BaseModel):
    """A sweep cell that failed without stopping the sweep."""

    cell: str = Field(..., description="Cell label")
    seed: int = Field(..., description="Seed of the failed cell")
    error_type: str = Field(..., description="Exception class name")
    message: str = Field(..., description="Error message")
    site: Optional[str] = Field(None, description="Producing site for numeric failures")


class ExperimentReport(BaseModel):
    """
    Result of one experiment.

    ``records`` are the raw per-cell rows, ``series`` holds plot-ready
    sequences, ``summary`` the aggregated values and ``verdicts`` the
    directional checks. The embedded configuration and seeds are enough to
    rerun the experiment.
    """

    name: str = Field(..., description="Experiment name")
    config: Dict[str, Any] = Field(default_factory=dict, description="Fully resolved run configuration")
    seeds: List[int] = Field(default_factory=list, description="Every seed used")
    records: List[Dict[str, Any]] = Field(default_factory=list, description="One row per cell and seed")
    series: Dict[str, List[float]] = Field(default_factory=dict, description="Named numeric series")
    summary: Dict[str, Any] = Field(default_factory=dict, description="Aggregated values")
    verdicts: Dict[str, bool] = Field(default_factory=dict, description="Directional checks")
    cell_errors: List[CellError] = Field(default_factory=list, description="Failed cells")

    def add_record(self, **row: Any) -> None:
        self.records.append(row)

    def summary_text(self) -> str:
        """Flat ``KEY=value`` rendering of summary, verdicts and seeds."""
        flat: Dict[str, str] = {"experiment": self.name, "seeds": _flat_value(self.seeds)}
        _flatten("summary", self.summary, flat)
        _flatten("verdict", self.verdicts, flat)
        flat["cell_errors"] = str(len(self.cell_errors))
        return "".join(f"{key}={flat[key]}\n" for key in sorted(flat))

    def write(self, out_dir: Path, write_csv: bool = False) -> List[Path]:
        """
        Write the report into ``out_dir``.

        Files: ``report.json`` (everything), ``records.jsonl``,
        ``summary.txt`` and, with ``write_csv``, ``records.csv`` and
        ``series.csv``.

        Returns:
            Paths written
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "report.json", out_dir / "records.jsonl", out_dir / "summary.txt"]
        paths[0].write_text(self.model_dump_json(indent=2), encoding="utf-8")
        paths[1].write_text(
            "".join(json.dumps(row, sort_keys=True) + "\n" for row in self.records), encoding="utf-8"
        )
        paths[2].write_text(self.summary_text(), encoding="utf-8")
        if write_csv:
            paths.append(self._write_records_csv(out_dir / "records.csv"))
            paths.append(self._write_series_csv(out_dir / "series.csv"))
        return paths

    def _write_records_csv(self, path: Path) -> Path:
        columns: List[str] = []
        for row in self.records:
            columns.extend(key for key in row if key not in columns)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            writer.writerows(self.records)
        return path

    def _write_series_csv(self, path: Path) -> Path:
        names = sorted(self.series)
        length = max((len(self.series[name]) for name in names), default=0)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["index", *names])
            for index in range(length):
                writer.writerow(
                    [index, *(self.series[name][index] if index < len(self.series[name]) else "" for name in names)]
                )
        return path
