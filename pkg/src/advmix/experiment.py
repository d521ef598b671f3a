"""Run directories, the ablation grid and its report tables."""

from __future__ import annotations

import csv
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ExperimentConfig, validate_config, write_resolved
from .datasets import Dataset, Preprocessor
from .nn import Model, build_model, save_checkpoint
from .objectives import predict
from .tensor import Tensor, no_grad
from .training import TABLE_ROWS, RunMetrics, evaluate_model, row_config, train


def row_slug(row: str) -> str:
    s = row.lower().replace("λ", "lambda").replace("δ", "delta")
    return "".join(c if c.isalnum() else "_" for c in s).strip("_").replace("__", "_")


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------


def write_curves(metrics: RunMetrics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_accuracy", "lr"])
        for e in metrics.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.train_accuracy), repr(e.lr)])


def write_decision_grid(model: Model, data: Dataset, path, resolution: int = 101) -> bool:
    """Class probabilities on a regular grid over the data's bounding box.

    Only written for 2-D inputs; returns whether a file was produced.
    """
    if data.inputs.ndim != 2 or data.inputs.shape[1] != 2:
        return False
    lo = data.inputs.min(axis=0) - 0.5
    hi = data.inputs.max(axis=0) + 0.5
    g0, g1 = np.meshgrid(np.linspace(lo[0], hi[0], resolution), np.linspace(lo[1], hi[1], resolution))
    pts = np.stack([g0.ravel(), g1.ravel()], axis=1)
    with no_grad():
        logits = model(Tensor(pts)).values
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "x1", *[f"p{c}" for c in range(probs.shape[1])], "prediction"])
        for p, pr, c in zip(pts, probs, predict(logits)):
            w.writerow([repr(float(p[0])), repr(float(p[1])), *[repr(float(v)) for v in pr], int(c)])
    return True


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------


def run_one(cfg: ExperimentConfig, seed: int, run_dir: Path, row: str | None = None) -> RunMetrics:
    """Train one (config, seed) cell, evaluate it on the test split and write
    metrics.jsonl, model.ckpt and plot data into ``run_dir``."""
    run_dir.mkdir(parents=True, exist_ok=True)
    train_data, test_data = cfg.split(seed)
    tcfg = cfg.train_config(seed)
    if row is not None:
        tcfg = row_config(tcfg, row)
    model = build_model(cfg.model_spec(train_data.input_shape, train_data.class_count, seed))
    prep = Preprocessor(train_data, augment_images=tcfg.augment)
    metrics = train(tcfg, model, train_data, prep)
    ev = evaluate_model(model, test_data, cfg.eval_attacks(), seed=seed, preprocessor=prep)
    metrics.pristine_accuracy = ev.pop("pristine")
    metrics.robust = ev
    metrics.write_jsonl(run_dir / "metrics.jsonl")
    save_checkpoint(run_dir / "model.ckpt", model,
                    {"scheme": tcfg.scheme, "seed": seed, "row": row or ""})
    write_curves(metrics, run_dir / "curves.csv")
    write_decision_grid(model, test_data, run_dir / "decision_grid.csv", cfg.plots.grid_resolution)
    return metrics


def _cell(raw: dict, seed: int, run_dir: str, row: str | None):
    """Worker entry point; returns (seed, row, summary | None, error | None)."""
    with threadpool_limits(1):
        try:
            m = run_one(validate_config(raw), seed, Path(run_dir), row)
            return seed, row, {"pristine": m.pristine_accuracy, **m.robust}, None
        except Exception as exc:
            return seed, row, None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


def _run_cells(cfg: ExperimentConfig, cells, threads: int):
    raw = cfg.model_dump(exclude_none=True)
    jobs = [(raw, seed, str(d), row) for seed, d, row in cells]
    if threads <= 1:
        return [_cell(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_cell, *zip(*jobs)))


def run_train(cfg: ExperimentConfig, out: Path, threads: int = 1) -> list:
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "resolved-config.toml")
    return _run_cells(cfg, [(s, out / f"seed_{s}", None) for s in cfg.seeds], threads)


def run_ablation(cfg: ExperimentConfig, out: Path, threads: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "resolved-config.toml")
    rows = [r for r in TABLE_ROWS if r in cfg.ablate.rows]
    cells = [(s, out / row_slug(r) / f"seed_{s}", r) for r in rows for s in cfg.seeds]
    results = _run_cells(cfg, cells, threads)
    columns = ["pristine", *[a.name for a in cfg.eval.attacks]]
    report = build_report(rows, columns, results)
    write_report(report, out)
    return report


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def build_report(rows: list[str], columns: list[str], results) -> dict:
    table = []
    for row in rows:
        mine = [r for r in results if r[1] == row]
        ok = [r for r in mine if r[3] is None]
        entry = {"row": row, "seeds": [r[0] for r in ok],
                 "failures": [{"seed": r[0], "error": r[3]} for r in mine if r[3] is not None],
                 "metrics": {}}
        entry["status"] = "ok" if not entry["failures"] else ("failed" if not ok else "partial")
        for c in columns:
            vals = [r[2][c] for r in ok]
            entry["metrics"][c] = {
                "values": vals,
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals)) if vals else None,
            }
        table.append(entry)
    return {"columns": columns, "rows": table}


def report_header(columns: list[str]) -> list[str]:
    head = ["row", "status", "n_seeds"]
    for c in columns:
        head += [f"{c}_mean", f"{c}_std"]
    return head


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_report(report: dict, out: Path) -> None:
    cols = report["columns"]
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(report_header(cols))
        for r in report["rows"]:
            line = [r["row"], r["status"], len(r["seeds"])]
            for c in cols:
                line += [_fmt(r["metrics"][c]["mean"]), _fmt(r["metrics"][c]["std"])]
            w.writerow(line)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    (out / "report.md").write_text(markdown_table(report))


def markdown_table(report: dict) -> str:
    """Accuracy table (percent, mean ± std over seeds) with one line per method."""
    cols = report["columns"]
    names = ["Pristine" if c == "pristine" else c for c in cols]
    lines = ["| Method | " + " | ".join(names) + " |",
             "|---|" + "---|" * len(cols)]
    for r in report["rows"]:
        cells = []
        for c in cols:
            m = r["metrics"][c]
            if m["mean"] is None or (isinstance(m["mean"], float) and math.isnan(m["mean"])):
                cells.append("failed")
            else:
                cells.append(f"{100 * m['mean']:.1f} ± {100 * m['std']:.1f}")
        lines.append(f"| {r['row']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
