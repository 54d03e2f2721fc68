"""Metrics files: one CSV per strategy run, all seeds plus their mean.

The first line is ``# pst-metrics/1 <json>`` carrying the run metadata; the
rest is a plain CSV table. Floats are written with ``repr`` so a file is a
bit-exact function of the run.

Row kinds (``record`` column):

``epoch``      one per training epoch; FLOPs columns are cumulative since run start
``task``       one per task per seed; FLOPs columns cover that task only
``aggregate``  per task, the arithmetic mean over seeds of the ``task`` rows
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .training import RunMetrics

SCHEMA = "pst-metrics/1"
COLUMNS = ("record", "seed", "task_id", "epoch", "phase", "lr", "loss", "single_head_acc",
           "multi_head_acc", "first_task_single_head", "first_task_multi_head", "forgetting",
           "frozen_fraction", "fwd_flops", "bwd_flops", "upd_flops", "upd_flops_per_step")
INT_COLUMNS = {"task_id", "epoch", "fwd_flops", "bwd_flops", "upd_flops", "upd_flops_per_step"}
MEANED = ("single_head_acc", "first_task_single_head", "first_task_multi_head", "forgetting",
          "frozen_fraction", "fwd_flops", "bwd_flops", "upd_flops", "upd_flops_per_step")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse(col: str, s: str):
    if s == "":
        return None
    if col in ("record", "phase"):
        return s
    if col == "seed":
        return s if s == "mean" else int(s)
    if col == "multi_head_acc":
        return [float(x) for x in s.split(";")]
    if col in INT_COLUMNS:
        return int(s) if "." not in s and "e" not in s else float(s)
    return float(s)


def aggregate(runs: list[RunMetrics]) -> list[dict]:
    """Per task, the mean over seeds of every numeric summary column."""
    if not runs:
        return []
    tasks = {len(r.summaries) for r in runs}
    if len(tasks) != 1:
        raise ContractError("cannot average runs with differing task counts")
    out = []
    for t in range(tasks.pop()):
        rows = [r.summaries[t] for r in runs]
        agg = {"record": "aggregate", "seed": "mean", "task_id": t}
        for col in MEANED:
            agg[col] = float(np.mean([row[col] for row in rows]))
        agg["multi_head_acc"] = [float(v) for v in np.mean([row["multi_head_acc"] for row in rows], axis=0)]
        out.append(agg)
    return out


def metrics_rows(runs: list[RunMetrics]) -> list[dict]:
    rows = []
    for run in runs:
        for rec in run.records:
            rows.append({**rec, "seed": run.seed})
        for s in run.summaries:
            rows.append({**s, "seed": run.seed})
    return rows + aggregate(runs)


def render_metrics(meta: dict, runs: list[RunMetrics]) -> str:
    buf = io.StringIO()
    buf.write(f"# {SCHEMA} {json.dumps(meta, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in metrics_rows(runs):
        w.writerow([_fmt(row.get(c)) for c in COLUMNS])
    return buf.getvalue()


def write_metrics(path, meta: dict, runs: list[RunMetrics]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_metrics(meta, runs))
    return path


@dataclass
class MetricsFile:
    path: Path
    meta: dict
    rows: list[dict]

    @property
    def strategy(self) -> str:
        return self.meta.get("strategy", self.path.stem)

    def select(self, record: str, seed=None) -> list[dict]:
        return [r for r in self.rows if r["record"] == record and (seed is None or r["seed"] == seed)]

    @property
    def seeds(self) -> list[int]:
        return sorted({r["seed"] for r in self.rows if r["record"] == "task"})

    def series(self, column: str, record: str = "aggregate", seed=None) -> list:
        rows = self.select(record, seed)
        if not rows or all(r.get(column) is None for r in rows):
            where = record if seed is None else f"{record}/seed {seed}"
            raise ContractError(f"{self.path}: missing series {column!r} in {where} rows")
        return [r[column] for r in rows]


def read_metrics(path) -> MetricsFile:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ContractError(f"{path}: no such metrics file") from None
    head, _, body = text.partition("\n")
    prefix = f"# {SCHEMA} "
    if not head.startswith(prefix):
        raise ParseError(f"{path}: missing '{prefix.strip()}' header line", 0)
    try:
        meta = json.loads(head[len(prefix):])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad header metadata ({exc.msg})", len(prefix) + exc.pos) from None
    reader = csv.DictReader(io.StringIO(body))
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ParseError(f"{path}: unexpected column layout", len(head) + 1)
    rows = [{c: _parse(c, r[c]) for c in COLUMNS} for r in reader]
    return MetricsFile(path, meta, rows)
