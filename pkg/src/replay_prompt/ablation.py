"""Ablation grids: cells over module toggles and buffer/noise axes, long-format results."""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from . import backbone as bb
from .data import Dataset
from .missing import Scenario
from .rep import RepConfig
from .train import OptimConfig, config_hash, evaluate, train_rep

logger = logging.getLogger(__name__)

# each preset adds one mechanism on top of the previous one
MODULE_PRESETS = {
    "baseline": {"dynamic_init": False, "dual_buffers": False, "replay": False},
    "dynamic_init": {"dynamic_init": True, "dual_buffers": False, "replay": False},
    "dual_buffers": {"dynamic_init": True, "dual_buffers": True, "replay": False},
    "full": {"dynamic_init": True, "dual_buffers": True, "replay": True},
}

# axis name -> RepConfig field
AXES = {
    "module": None,
    "buffer_width": "buffer_width",
    "replay_depth": "replay_depth",
    "noise_intensity": "noise_intensity",
    "noise_type": "noise_type",
    "ortho_weight": "ortho_weight",
}

CSV_HEADER = ["cell_id", "dynamic_init", "dual_buffers", "replay", "l", "d", "eps_n",
              "noise_type", "seed", "scenario", "acc", "f1_macro", "auroc", "param_fraction"]


@dataclass(frozen=True)
class Cell:
    cell_id: str
    rep: RepConfig


def _format_value(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def build_cells(base: RepConfig, axes: dict) -> list[Cell]:
    """Cartesian product over ``axes`` (``{axis: [values]}``), in the given axis order."""
    for name, values in axes.items():
        if name not in AXES:
            raise ValueError(f"unknown ablation axis {name!r}; known: {sorted(AXES)}")
        if not values:
            raise ValueError(f"ablation axis {name!r} has no values")
        if name == "module":
            bad = [v for v in values if v not in MODULE_PRESETS]
            if bad:
                raise ValueError(f"unknown module preset(s) {bad}; known: {list(MODULE_PRESETS)}")
    if not axes:
        return [Cell("default", base)]
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        kw = {}
        for name, value in zip(names, combo):
            if name == "module":
                kw.update(MODULE_PRESETS[value])
            else:
                kw[AXES[name]] = value
        cell_id = "|".join(f"{n}={_format_value(v)}" for n, v in zip(names, combo))
        rep = dataclasses.replace(base, **kw)
        rep.validate()
        cells.append(Cell(cell_id, rep))
    ids = [c.cell_id for c in cells]
    if len(set(ids)) != len(ids):
        raise ValueError("ablation grid produces duplicate cells")
    return cells


def result_rows(cell: Cell, seed: int, report) -> list[dict]:
    rows = []
    for scenario, m in report.breakdown.items():
        rows.append({
            "cell_id": cell.cell_id,
            "dynamic_init": cell.rep.dynamic_init,
            "dual_buffers": cell.rep.dual_buffers,
            "replay": cell.rep.replay,
            "l": cell.rep.buffer_width,
            "d": cell.rep.replay_depth,
            "eps_n": cell.rep.noise_intensity,
            "noise_type": cell.rep.noise_type,
            "seed": seed,
            "scenario": scenario,
            "acc": m["accuracy"],
            "f1_macro": m["f1_macro"],
            "auroc": m["auroc"],
            "param_fraction": report.param_fraction,
        })
    return rows


def _csv_cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([_csv_cell(row[k]) for k in CSV_HEADER])
    return buf.getvalue()


def read_csv_rows(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise ValueError(f"results header mismatch: expected {CSV_HEADER}, got {reader.fieldnames}")
    return list(reader)


@dataclass
class CellFailure:
    cell_id: str
    seed: int
    error: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def run_cell(weights: bb.BackboneWeights, splits: dict, cell: Cell, scenarios: Sequence[Scenario],
             optim: OptimConfig, seed: int, train_scenario: Scenario | None = None):
    """Tune one cell for one seed and evaluate it on every scenario."""
    train_scenario = train_scenario or scenarios[0]
    result = train_rep(weights, cell.rep, splits["train"], splits["val"], train_scenario, optim, seed)
    digest = config_hash({"rep": cell.rep.to_dict(), "optim": optim.to_dict(),
                          "scenarios": [s.label() for s in scenarios]})
    report = evaluate(weights, result.state, cell.rep, splits["test"], scenarios, seed, optim, digest)
    return result, report


def run_ablation(weights: bb.BackboneWeights, splits: dict[str, Dataset], cells: Sequence[Cell],
                 seeds: Sequence[int], scenarios: Sequence[Scenario], optim: OptimConfig,
                 done: set | None = None,
                 on_result: Callable[[Cell, int, object], None] | None = None,
                 on_failure: Callable[[CellFailure], None] | None = None):
    """Run every (cell, seed) not already in ``done``; failures never stop the grid.

    Returns ``(rows, reports, failures)``.
    """
    done = done or set()
    rows, reports, failures = [], {}, []
    todo = [(c, s) for c in cells for s in seeds if (c.cell_id, s) not in done]
    for i, (cell, seed) in enumerate(todo, 1):
        logger.info("cell %d/%d: %s seed %d", i, len(todo), cell.cell_id, seed)
        try:
            _, report = run_cell(weights, splits, cell, scenarios, optim, seed)
        except Exception as exc:  # a failed cell is recorded, the grid goes on
            failure = CellFailure(cell.cell_id, seed, f"{type(exc).__name__}: {exc}")
            logger.warning("cell %s seed %d failed: %s", cell.cell_id, seed, failure.error)
            failures.append(failure)
            if on_failure:
                on_failure(failure)
            continue
        rows.extend(result_rows(cell, seed, report))
        reports[(cell.cell_id, seed)] = report
        if on_result:
            on_result(cell, seed, report)
    return rows, reports, failures


def json_mirror(rows: Sequence[dict], cells: Sequence[Cell], extra_config: dict) -> str:
    payload = {
        "config": extra_config,
        "cells": {c.cell_id: c.rep.to_dict() for c in cells},
        "rows": list(rows),
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
