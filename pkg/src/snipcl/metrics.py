"""Machine-readable outputs: report JSON/CSV and per-step training curves."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .evaluation import EvalReport
from .io_utils import atomic_write_text

PRETRAIN_COLUMNS = ("step", "L_global", "L_dense", "L_total", "bank_size", "dense_bank_size")
BASELINE_COLUMNS = ("step", "L_global", "L_total", "bank_size")
FINETUNE_COLUMNS = ("step", "cross_entropy", "frame_accuracy")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def curves_csv(rows, columns) -> str:
    """CSV text with a header row; ``rows`` are dicts keyed by column name."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def pretrain_rows(history) -> tuple[list[dict], tuple]:
    """Rows and columns for pretraining stats; the dense columns vanish when unused."""
    dense = any(s.l_dense is not None for s in history)
    columns = PRETRAIN_COLUMNS if dense or not history else BASELINE_COLUMNS
    rows = [{"step": s.step, "L_global": s.l_global, "L_dense": s.l_dense, "L_total": s.l_total,
             "bank_size": s.bank_size, "dense_bank_size": s.dense_bank_size} for s in history]
    return rows, columns


def finetune_rows(history) -> tuple[list[dict], tuple]:
    rows = [{"step": s.step, "cross_entropy": s.loss, "frame_accuracy": s.accuracy} for s in history]
    return rows, FINETUNE_COLUMNS


def emit_metrics(report: EvalReport, curves, out_dir, columns=PRETRAIN_COLUMNS) -> dict[str, Path]:
    """Write ``report.json``, ``report.csv`` and ``loss_curves.csv`` (each atomically)."""
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    return {
        "json": atomic_write_text(out / "report.json", report.dumps()),
        "csv": atomic_write_text(out / "report.csv", report.to_csv()),
        "curves": atomic_write_text(out / "loss_curves.csv", curves_csv(curves or [], columns)),
    }
