"""Text and CSV rendering of evaluation reports.

Two layouts: a run summary (one row per run, AP over the threshold range and
AP50 per evaluated task) and a per-class breakdown (AP range, AP50 and AR at
one detection for masks and, when given, boxes). Values are percentages with
two decimals.
"""

from __future__ import annotations

import csv
import io
import math
from typing import Optional, Sequence

from .evaluate import EvalReport


def pct(v: Optional[float]) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{100 * v:.2f}"


def range_label(report: EvalReport, prefix: str = "AP") -> str:
    t = report.config.thresholds
    if len(t) == 1:
        return f"{prefix}{round(t[0] * 100)}"
    return f"{prefix}{round(t[0] * 100)}:{round(t[-1] * 100)}"


def _task_prefix(report: EvalReport) -> str:
    return "AP" if report.config.iou_kind == "mask" else "APbb"


def _has_50(report: EvalReport) -> bool:
    return any(math.isclose(t, 0.5) for t in report.config.thresholds)


def _emit(header: list[str], rows: list[list[str]], style: str) -> str:
    if style == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if style != "text":
        raise ValueError(f"unknown style {style!r}")
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = []
    for n, row in enumerate([header] + rows):
        cells = [str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_summary(runs: Sequence[tuple[str, Sequence[EvalReport]]], style: str = "text") -> str:
    """One row per run label; two columns (AP range, AP50) per report in the run.

    Every run must list its reports in the same task order.
    """
    if not runs:
        raise ValueError("nothing to render")
    first = runs[0][1]
    header = ["Run"]
    for r in first:
        mode = "binary" if r.config.mode == "binary" else "multi-class"
        p = _task_prefix(r)
        header.append(f"{mode} {range_label(r, p)}")
        header.append(f"{mode} {p}50")
    rows = []
    for label, reports in runs:
        if len(reports) != len(first):
            raise ValueError("all runs need the same number of reports")
        row = [label]
        for r in reports:
            row += [pct(r.ap), pct(r.ap50) if _has_50(r) else "-"]
        rows.append(row)
    return _emit(header, rows, style)


def render_per_class(mask_report: EvalReport, bbox_report: Optional[EvalReport] = None, style: str = "text") -> str:
    """Per-class AP range, AP50 and AR1 for masks and optionally boxes, plus a mean row."""
    reports = [mask_report] + ([bbox_report] if bbox_report is not None else [])
    header = ["Class"]
    for r in reports:
        p = _task_prefix(r)
        ar = "ARbb" if p == "APbb" else "AR"
        header += [range_label(r, p), f"{p}50", f"{ar}{r.config.max_detections[0]}"]

    names: list[tuple[int, str]] = []
    for r in reports:
        for c in r.classes:
            if (c.id, c.name) not in names:
                names.append((c.id, c.name))
    names.sort()

    def cells(r: EvalReport, cid: int) -> list[str]:
        idx = [k for k, c in enumerate(r.classes) if c.id == cid]
        if not idx:
            return ["-", "-", "-"]
        k = idx[0]
        ap = r.class_ap()[:, k]
        ap50 = ap[r._thr_index(0.5)] if _has_50(r) else None
        ar1 = r.class_ar(r.config.max_detections[0])[k]
        return [pct(float(ap.mean())), pct(None if ap50 is None else float(ap50)), pct(float(ar1))]

    rows = []
    for cid, name in names:
        row = [name]
        for r in reports:
            row += cells(r, cid)
        rows.append(row)
    mean_row = ["mean"]
    for r in reports:
        mean_row += [pct(r.ap), pct(r.ap50) if _has_50(r) else "-", pct(r.ar(r.config.max_detections[0]))]
    rows.append(mean_row)
    return _emit(header, rows, style)


def render_report(report: EvalReport, style: str = "text", layout: str = "summary") -> str:
    if layout == "summary":
        return render_summary([(report.label or "run", [report])], style)
    if layout == "per-class":
        return render_per_class(report, None, style)
    raise ValueError(f"unknown layout {layout!r}")


def parse_csv_table(text: str) -> list[dict[str, object]]:
    """Read a rendered CSV table back; percentage cells become floats, ``-`` becomes None."""
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        out: dict[str, object] = {}
        for k, v in rec.items():
            if v == "-":
                out[k] = None
                continue
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
        rows.append(out)
    return rows
