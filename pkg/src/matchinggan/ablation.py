"""Ablation grids: the K1 x K2 conditional-count grid and the design-choice rows.

A grid spec is a mapping::

    base: {epochs: 30, ...}          # TrainConfig fields shared by every cell
    evaluation: {shots: 10, n_generated: 512, bank_count: 128, seed: 0}
    grids:
      - {name: k_grid, kind: k_grid, k1: [3, 5, 7, 9], k2: [3, 5, 7, 9]}
      - name: design
        kind: settings
        rows:
          - {label: "λ_r=0.01", overrides: {lambda_r: 0.01}}

``grids`` entries may also be the names ``k_grid`` and ``design``, which
expand to the full 4x4 conditional-count grid and the 13 design rows.

Cells that share a training configuration share one trained model.
"""
from __future__ import annotations

import json
import logging
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .config import TrainConfig, config_digest, from_mapping
from .errors import ConfigError
from .evaluation import MetricReport

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("accuracy", "fid", "is")

TABLE4_K = (3, 5, 7, 9)
TABLE5_ROWS = (
    ("λ_r=0.01", {"lambda_r": 0.01}),
    ("λ_r=0.1", {"lambda_r": 0.1}),
    ("λ_r=1", {"lambda_r": 1.0}),
    ("λ_r=10", {"lambda_r": 10.0}),
    ("λ_m=1", {"lambda_m": 1.0}),
    ("λ_m=0", {"lambda_m": 0.0}),
    ("matching coefficient", {"coefficient_mode": "matched"}),
    ("random coefficient", {"coefficient_mode": "random"}),
    ("shared encoder", {"shared_encoder": True}),
    ("different encoder", {"shared_encoder": False}),
    ("1 connection", {"skip_connections": 1}),
    ("2 connection", {"skip_connections": 2}),
    ("3 connection", {"skip_connections": 3}),
)


def k_grid(k1=TABLE4_K, k2=TABLE4_K, name: str = "k_grid") -> dict:
    return {"name": name, "kind": "k_grid", "k1": list(k1), "k2": list(k2)}


def design_grid(name: str = "design") -> dict:
    return {"name": name, "kind": "settings",
            "rows": [{"label": label, "overrides": dict(ov)} for label, ov in TABLE5_ROWS]}


NAMED_GRIDS = {"k_grid": k_grid, "design": design_grid}


def paper_spec(base: Mapping | None = None, evaluation: Mapping | None = None) -> dict:
    return {"base": dict(base or {}), "evaluation": dict(evaluation or {}),
            "grids": [k_grid(), design_grid()]}


@dataclass
class Cell:
    grid: str
    row: str
    column: str
    overrides: dict
    k2: int
    status: str = "pending"
    metrics: dict = field(default_factory=dict)
    error: str = ""

    @property
    def label(self) -> str:
        return f"{self.grid}/{self.row}" + (f"/{self.column}" if self.column else "")


def expand(spec: Mapping) -> list[Cell]:
    """Enumerate cells in table order (K-grid: row K2, then column K1)."""
    cells = []
    base = dict(spec.get("base") or {})
    for g in spec.get("grids") or []:
        if isinstance(g, str):  # named shortcut for the standard grids
            if g not in NAMED_GRIDS:
                raise ConfigError(f"unknown grid {g!r}; named grids are {sorted(NAMED_GRIDS)}")
            g = NAMED_GRIDS[g]()
        kind, name = g.get("kind"), g.get("name") or g.get("kind")
        if kind == "k_grid":
            for k2 in g["k2"]:
                for k1 in g["k1"]:
                    cells.append(Cell(name, f"K2={k2}", f"K1={k1}", {**base, "k": int(k1)}, int(k2)))
        elif kind == "settings":
            for row in g["rows"]:
                ov = {**base, **(row.get("overrides") or {})}
                k2 = int(row.get("k2", ov.get("k", TrainConfig.k)))
                cells.append(Cell(name, row["label"], "", ov, k2))
        else:
            raise ConfigError(f"unknown grid kind {kind!r} in grid {name!r}")
    return cells


TrainFn = Callable[[TrainConfig], object]
EvalFn = Callable[[object, int, Mapping], Mapping]


@dataclass
class AblationReport:
    cells: list
    evaluation: dict

    def reports(self, run_id: str = "ablation") -> list[MetricReport]:
        out = []
        for c in self.cells:
            for m in METRIC_COLUMNS:
                if m in c.metrics:
                    out.append(MetricReport(
                        run_id, m, float(c.metrics[m]),
                        {"grid": c.grid, "row": c.row, "column": c.column, "k2": c.k2,
                         "overrides": c.overrides, **self.evaluation}))
        return out

    def grid(self, name: str) -> list[Cell]:
        return [c for c in self.cells if c.grid == name]

    def grid_names(self) -> list[str]:
        seen = []
        for c in self.cells:
            if c.grid not in seen:
                seen.append(c.grid)
        return seen


def run_ablation(spec: Mapping, train_fn: TrainFn, eval_fn: EvalFn) -> AblationReport:
    """Train (once per distinct config) and evaluate every cell; failures do not stop the grid."""
    evaluation = dict(spec.get("evaluation") or {})
    cells = expand(spec)
    models: dict[str, object] = {}
    failures: dict[str, str] = {}
    for cell in cells:
        try:
            cfg = from_mapping(cell.overrides).validate()
            key = config_digest(cfg)
            if key in failures:
                raise RuntimeError(failures[key])
            if key not in models:
                logger.info("training %s", cell.label)
                try:
                    models[key] = train_fn(cfg)
                except Exception as exc:
                    failures[key] = f"training failed: {exc}"
                    raise
            cell.metrics = {k: float(v) for k, v in eval_fn(models[key], cell.k2, evaluation).items()}
            cell.status = "ok"
        except Exception as exc:  # a failed cell is recorded, the grid goes on
            cell.status = "failed"
            cell.error = f"{type(exc).__name__}: {exc}"
            logger.warning("cell %s failed: %s", cell.label, cell.error)
            logger.debug(traceback.format_exc())
    return AblationReport(cells, evaluation)


# --------------------------------------------------------------------------
# rendering


def _fmt(cell: Cell, metric: str, scale: float = 1.0) -> str:
    if cell.status != "ok" or metric not in cell.metrics:
        return "failed" if cell.status == "failed" else "-"
    return f"{cell.metrics[metric] * scale:.2f}"


def render_k_grid(cells: list[Cell], metric: str = "accuracy") -> str:
    """Rows K2, columns K1, values in percent for accuracy."""
    rows = list(dict.fromkeys(c.row for c in cells))
    cols = list(dict.fromkeys(c.column for c in cells))
    at = {(c.row, c.column): c for c in cells}
    scale = 100.0 if metric == "accuracy" else 1.0
    lines = ["| | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 1)]
    for r in rows:
        lines.append(f"| {r} | " + " | ".join(_fmt(at[(r, c)], metric, scale) for c in cols) + " |")
    return "\n".join(lines)


def render_settings(cells: list[Cell]) -> str:
    lines = ["| setting | accuracy | FID (↓) | IS (↑) |", "|---|---|---|---|"]
    for c in cells:
        lines.append(f"| {c.row} | {_fmt(c, 'accuracy', 100.0)} | {_fmt(c, 'fid')} | {_fmt(c, 'is')} |")
    return "\n".join(lines)


def render(report: AblationReport) -> str:
    parts = []
    for name in report.grid_names():
        cells = report.grid(name)
        parts.append(f"## {name}")
        if cells and cells[0].column:
            parts.append(render_k_grid(cells, "accuracy"))
        else:
            parts.append(render_settings(cells))
    return "\n\n".join(parts) + "\n"


def to_tsv(report: AblationReport) -> str:
    header = ["grid", "row", "column", "k2", "status", *METRIC_COLUMNS, "error"]
    lines = ["\t".join(header)]
    for c in report.cells:
        vals = [c.grid, c.row, c.column, str(c.k2), c.status]
        vals += [repr(c.metrics[m]) if m in c.metrics else "" for m in METRIC_COLUMNS]
        vals.append(c.error.replace("\t", " ").replace("\n", " "))
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def write_report(report: AblationReport, out_dir, figures: bool = True) -> dict:
    """Delimited records, a rendered table and (optionally) figures; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"records": out / "ablation.jsonl", "tsv": out / "ablation.tsv", "table": out / "ablation.md"}
    paths["records"].write_text("".join(r.to_json() + "\n" for r in report.reports()))
    paths["tsv"].write_text(to_tsv(report))
    paths["table"].write_text(render(report))
    (out / "cells.json").write_text(json.dumps([asdict(c) for c in report.cells], indent=2, ensure_ascii=False))
    if figures and report.cells:
        from . import plotting

        for name in report.grid_names():
            cells = report.grid(name)
            fig_path = out / f"{name}.png"
            if cells[0].column:
                plotting.plot_k_grid(cells, fig_path)
            else:
                plotting.plot_settings(cells, fig_path)
            paths[f"figure:{name}"] = fig_path
    return paths
