"""Aggregate ``records.csv`` files into comparison CSVs and SVG charts."""

from __future__ import annotations

import csv
import glob
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .._binio import atomic_write_text
from . import svg
from .runner import parse_kv, read_records


class ReportError(ValueError):
    pass


@dataclass
class SummaryRow:
    optimizer: str
    sparsity: float
    mean: float
    stddev: float
    n: int


def expand(patterns: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for pat in patterns:
        hits = sorted(glob.glob(pat, recursive=True))
        if not hits and Path(pat).exists():
            hits = [pat]
        paths.extend(Path(h) for h in hits)
    if not paths:
        raise ReportError(f"no record files match {list(patterns)}")
    return paths


def load_rows(paths: Iterable[str | Path]) -> list[dict]:
    rows = []
    for p in paths:
        rows.extend(read_records(p))
    return rows


def _ok(rows: list[dict]) -> list[dict]:
    return [r for r in rows if r["status"] == "ok"]


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(rows: list[dict], stages: Sequence[str] | None = None) -> list[SummaryRow]:
    """Mean and sample stddev of ``val_metric`` per (optimizer, sparsity)."""
    stages = SUMMARY_STAGES if stages is None else stages
    rows = [r for r in _ok(rows) if r["stage"] in stages]
    if not rows:
        raise ReportError("no successful records to summarize")
    tasks = sorted({r["task"] for r in rows})
    if len(tasks) > 1:
        raise ReportError(f"records mix incompatible tasks: {tasks}")
    groups: dict[tuple[str, float], list[float]] = defaultdict(list)
    for r in rows:
        groups[(r["optimizer"], round(float(r["sparsity"]), 9))].append(float(r["val_metric"]))
    out = []
    for (opt, s), vals in sorted(groups.items()):
        m, sd = mean_std(vals)
        out.append(SummaryRow(opt, s, m, sd, len(vals)))
    return out


def summary_csv(summary: list[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["optimizer", "sparsity", "mean", "stddev", "n"])
    for r in summary:
        w.writerow([r.optimizer, repr(r.sparsity), repr(r.mean), repr(r.stddev), r.n])
    return buf.getvalue()


def summary_svg(summary: list[SummaryRow], title: str = "sparsity vs. validation metric") -> str:
    series = {}
    for opt in sorted({r.optimizer for r in summary}):
        pts = [r for r in summary if r.optimizer == opt]
        series[opt] = ([r.sparsity for r in pts], [r.mean for r in pts], [r.stddev for r in pts])
    return svg.line_chart(series, title, "sparsity", "validation metric")


SUMMARY_STAGES = ("full", "imp", "std", "oneshot", "train", "structured", "quantize", "sharpness")


def report(patterns: Sequence[str], out: str | Path) -> list[Path]:
    """Summary CSV and SVG for sparsity-style records, plus ticket matrices when transfer rows exist."""
    out = Path(out)
    rows = load_rows(expand(patterns))
    written: list[Path] = []
    if any(r["stage"] in SUMMARY_STAGES for r in _ok(rows)):
        summary = summarize(rows)
        task = next(r["task"] for r in _ok(rows) if r["stage"] in SUMMARY_STAGES)
        csv_path, svg_path = out / "report.csv", out / "report.svg"
        atomic_write_text(csv_path, summary_csv(summary))
        atomic_write_text(svg_path, summary_svg(summary, f"{task}: sparsity vs. validation metric"))
        written += [csv_path, svg_path]
    if any(r["stage"] == "transfer" for r in _ok(rows)):
        written += write_ticket_reports(rows, out)
    if not written:
        raise ReportError("records contain nothing to report")
    return written


# ---------------------------------------------------------------------------
# ticket comparison


@dataclass
class Matrix:
    rows: list[str]
    cols: list[str]
    values: np.ndarray

    def csv(self, corner: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([corner] + self.cols)
        for name, row in zip(self.rows, self.values):
            w.writerow([name] + [repr(float(v)) for v in row])
        return buf.getvalue()


def _transfer(rows: list[dict]) -> list[dict]:
    out = []
    for r in _ok(rows):
        if r["stage"] == "transfer":
            out.append({**r, **parse_kv(r["extra"]), "val": float(r["val_metric"])})
    return out


def ticket_matrix(rows: list[dict], task: str | None = None) -> Matrix:
    """Mean target accuracy for {tickets} x {fine-tuning optimizers} on same-task transfer."""
    tr = [r for r in _transfer(rows) if r["source"] == r["target"] and (task is None or r["target"] == task)]
    if not tr:
        raise ReportError("no same-task transfer records")
    tickets = [t for t in ("random", "adam", "sam", "swa") if any(r["ticket"] == t for r in tr)]
    fts = sorted({r["finetune"] for r in tr})
    vals = np.full((len(tickets), len(fts)), np.nan)
    for i, t in enumerate(tickets):
        for j, f in enumerate(fts):
            v = [r["val"] for r in tr if r["ticket"] == t and r["finetune"] == f]
            if v:
                vals[i, j] = float(np.mean(v))
    return Matrix(tickets, fts, vals)


def transfer_difference(rows: list[dict], finetune: str, a: str = "sam", b: str = "adam") -> Matrix:
    """Mean (ticket ``a`` - ticket ``b``) target accuracy per (source, target) for one fine-tuning optimizer."""
    tr = [r for r in _transfer(rows) if r["finetune"] == finetune]
    sources = sorted({r["source"] for r in tr})
    targets = sorted({r["target"] for r in tr})
    if not sources:
        raise ReportError(f"no transfer records with finetune={finetune}")
    vals = np.full((len(sources), len(targets)), np.nan)
    for i, s in enumerate(sources):
        for j, t in enumerate(targets):
            by_seed = defaultdict(dict)
            for r in tr:
                if r["source"] == s and r["target"] == t and r["ticket"] in (a, b):
                    by_seed[r["seed"]][r["ticket"]] = r["val"]
            diffs = [d[a] - d[b] for d in by_seed.values() if a in d and b in d]
            if diffs:
                vals[i, j] = float(np.mean(diffs))
    return Matrix(sources, targets, vals)


def write_ticket_reports(rows: list[dict], out: str | Path) -> list[Path]:
    out = Path(out)
    written = []
    tr = _transfer(rows)
    for task in sorted({r["target"] for r in tr if r["source"] == r["target"]}):
        m = ticket_matrix(rows, task)
        p = out / f"tickets_{task}.csv"
        atomic_write_text(p, m.csv("ticket\\finetune"))
        atomic_write_text(p.with_suffix(".svg"), svg.heatmap(m.values, m.rows, m.cols, f"{task}: ticket x fine-tuning"))
        written += [p, p.with_suffix(".svg")]
    tickets = {r["ticket"] for r in tr}
    if {"sam", "adam"} <= tickets:
        for ft in sorted({r["finetune"] for r in tr}):
            m = transfer_difference(rows, ft)
            p = out / f"transfer_diff_{ft}.csv"
            atomic_write_text(p, m.csv("source\\target"))
            atomic_write_text(p.with_suffix(".svg"),
                              svg.heatmap(m.values, m.rows, m.cols, f"SAM ticket - Adam ticket ({ft} fine-tuning)",
                                          diverging=True))
            written += [p, p.with_suffix(".svg")]
    return written


def compare_tickets(record_paths: Sequence[str | Path], out: str | Path) -> list[Path]:
    missing = [str(p) for p in record_paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"missing ticket records: {missing}")
    rows = []
    for path in record_paths:
        part = read_records(path)
        for r in _transfer(part):
            mask = Path(path).parent / r["mask"]
            if r["mask"] and not mask.exists():
                raise FileNotFoundError(f"missing ticket artifact: {mask}")
        rows.extend(part)
    return write_ticket_reports(rows, out)
