"""Metrics rows, CSV emission and cross-trial summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

HEADER = ("trial", "round", "phase", "metric", "value", "scalars_down",
          "scalars_up", "psi_evals", "wasted_slices", "rel_model_size")


class IoError(OSError):
    """Raised when the metrics file cannot be written."""


@dataclass(frozen=True)
class MetricsRow:
    """One metric value with the cumulative accounting counters at that round."""

    trial: int
    round: int
    phase: str
    metric: str
    value: float
    scalars_down: int = 0
    scalars_up: int = 0
    psi_evals: int = 0
    wasted_slices: int = 0
    rel_model_size: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.value) or not math.isfinite(self.rel_model_size):
            raise ValueError(f"non-finite value in metrics row {self}")

    @property
    def sort_key(self):
        return (self.trial, self.round, self.phase, self.metric)


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def format_metrics_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for row in sorted(rows, key=lambda r: r.sort_key):
        writer.writerow([_fmt(getattr(row, name)) for name in HEADER])
    return buf.getvalue()


def emit_metrics_csv(rows: Iterable[MetricsRow], path) -> None:
    """Write ``rows`` to ``path``, replacing any existing file."""
    text = format_metrics_csv(rows)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as err:
        raise IoError(f"cannot write metrics to {path}: {err}") from err


def read_metrics_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            MetricsRow(
                trial=int(r["trial"]), round=int(r["round"]), phase=r["phase"], metric=r["metric"],
                value=float(r["value"]), scalars_down=int(r["scalars_down"]), scalars_up=int(r["scalars_up"]),
                psi_evals=int(r["psi_evals"]), wasted_slices=int(r["wasted_slices"]),
                rel_model_size=float(r["rel_model_size"]),
            )
            for r in reader
        ]


def summarize(rows: Iterable[MetricsRow], phase: str = "valid", metric: str | None = None) -> dict:
    """Mean and (population) std across trials, keyed by ``(round, metric)``."""
    grouped = {}
    for r in rows:
        if r.phase != phase or (metric is not None and r.metric != metric):
            continue
        grouped.setdefault((r.round, r.metric), []).append(r.value)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in sorted(grouped.items())}
