"""Training loop and per-step metrics records."""

from __future__ import annotations

import csv
import math
from typing import Callable, Iterable

import numpy as np

from ..errors import UndefinedError
from ..linalg import stable_rank
from ..model import ModelParams
from ..subspace import Subspace, off_subspace_ratio
from .runtime import Pipeline, StepReport


def metrics_header(num_layers: int) -> list:
    cols = ["step", "loss", "tps", "bytes_fwd", "bytes_bwd", "grassmann_loss"]
    for prefix in ("stable_rank_p1", "stable_rank_p2", "offsub_p1", "offsub_p2"):
        cols += [f"{prefix}_{l}" for l in range(num_layers)]
    return cols + ["boundary_mse", "virtual_time", "subspace_version"]


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedError:
        return float("nan")


def metrics_row(report: StepReport, layers, s: Subspace, tokens_per_step: int) -> dict:
    """Flatten a step report plus weight diagnostics into one CSV record."""
    t = report.virtual_time
    row = {
        "step": report.step,
        "loss": report.loss,
        "tps": tokens_per_step / t if t > 0 else math.inf,
        "bytes_fwd": report.bytes_fwd,
        "bytes_bwd": report.bytes_bwd,
        "grassmann_loss": report.grassmann_loss,
    }
    for layer in layers:
        l = layer.layer_id
        row[f"stable_rank_p1_{l}"] = _safe(stable_rank, layer.wp1)
        row[f"stable_rank_p2_{l}"] = _safe(stable_rank, layer.wp2)
        row[f"offsub_p1_{l}"] = _safe(off_subspace_ratio, layer.wp1, s)
        row[f"offsub_p2_{l}"] = _safe(off_subspace_ratio, layer.wp2, s)
    row["boundary_mse"] = report.boundary_mse
    row["virtual_time"] = report.virtual_time
    row["subspace_version"] = report.subspace_version
    return row


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    """CSV sink; values are written with ``repr`` so reruns compare byte for byte."""

    def __init__(self, path, num_layers):
        self.header = metrics_header(num_layers)
        self._fh = open(path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(self.header)

    def write(self, row: dict) -> None:
        self._csv.writerow([_format(row[c]) for c in self.header])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def train(pipe: Pipeline, batches: Iterable, template: ModelParams,
          on_row: Callable[[dict], None] | None = None, start_step: int = 0) -> list:
    """Run ``pipe.plan.steps`` steps over ``batches`` of (b, n+1) token windows.

    Returns the metric rows; writes them to ``plan.metrics_path`` when set.
    """
    plan = pipe.plan
    rows = []
    writer = MetricsWriter(plan.metrics_path, template.dims.layers) if plan.metrics_path else None
    tokens_per_step = plan.batch * plan.seq
    try:
        it = iter(batches)
        for step in range(start_step, start_step + plan.steps):
            window = np.asarray(next(it))
            report = pipe.run_step(window[:, :-1], window[:, 1:], step)
            layers = [layer for st in pipe.stages for layer in st.layers]
            row = metrics_row(report, layers, pipe.subspace, tokens_per_step)
            rows.append(row)
            if writer:
                writer.write(row)
            if on_row:
                on_row(row)
    finally:
        if writer:
            writer.close()
    return rows

