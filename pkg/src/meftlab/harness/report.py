"""Result CSVs and the Table-I-shaped markdown report with ordering verdicts."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from ..methods import MEFT_KINDS, PEFT_KINDS, KINDS, MethodError, MethodSpec
from .train import TrainReport

CSV_COLUMNS = ("method", "trainable_ratio_pct", "peak_retained_bytes", "est_footprint_bytes", "backward_flops",
               "step_ms", "accuracy_pct", "lr")
STATUS_COLUMN = "status"
_INT_COLS = ("peak_retained_bytes", "est_footprint_bytes", "backward_flops")
_FLOAT_COLS = ("trainable_ratio_pct", "step_ms", "accuracy_pct", "lr")


class ReportError(ValueError):
    pass


def csv_row(report: TrainReport) -> dict[str, str]:
    step = "" if report.mean_step_time_ms is None else f"{report.mean_step_time_ms:.3f}"
    return {
        "method": report.method,
        "trainable_ratio_pct": f"{report.trainable_ratio:.6f}",
        "peak_retained_bytes": str(report.peak_retained_bytes),
        "est_footprint_bytes": str(report.est_total_footprint_bytes),
        "backward_flops": str(report.backward_flops),
        "step_ms": step,
        "accuracy_pct": f"{report.best_eval_accuracy:.4f}",
        "lr": f"{report.lr_selected:g}",
    }


def write_csv(path, rows: list[dict[str, str]], *, with_status: bool = False) -> None:
    cols = CSV_COLUMNS + ((STATUS_COLUMN,) if with_status else ())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in cols})


@dataclass
class Row:
    method: str
    spec: MethodSpec
    trainable_ratio_pct: float | None
    peak_retained_bytes: int | None
    est_footprint_bytes: int | None
    backward_flops: int | None
    step_ms: float | None
    accuracy_pct: float | None
    lr: float | None
    status: str = "ok"
    source: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def group(self) -> str:
        return {"peft": "PEFT", "meft": "MEFT"}.get(self.spec.family, "Baseline")

    def sort_key(self):
        order = {"Baseline": 0, "PEFT": 1, "MEFT": 2}[self.group]
        return order, KINDS.index(self.spec.kind), self.spec.hyper or 0


def parse_csv(text: str, source: str = "<csv>") -> list[Row]:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ReportError(f"{source}:1: empty file, expected header")
    header = next(csv.reader([lines[0]]))
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise ReportError(f"{source}:1: header lacks column(s) {', '.join(missing)}")
    rows = []
    reader = csv.reader(io.StringIO(text))
    next(reader)
    for fields in reader:
        lineno = reader.line_num
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != len(header):
            raise ReportError(f"{source}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        rec = dict(zip(header, fields))
        status = rec.get(STATUS_COLUMN, "ok") or "ok"
        try:
            spec = MethodSpec.parse(rec["method"])
        except MethodError as exc:
            raise ReportError(f"{source}:{lineno}: {exc}") from None
        values = {}
        for c in _INT_COLS + _FLOAT_COLS:
            raw = rec[c].strip()
            if not raw:
                values[c] = None
                continue
            try:
                values[c] = int(raw) if c in _INT_COLS else float(raw)
            except ValueError:
                raise ReportError(f"{source}:{lineno}: column {c!r} is not a number: {raw!r}") from None
            if c in _FLOAT_COLS and not math.isfinite(values[c]):
                raise ReportError(f"{source}:{lineno}: column {c!r} is not finite")
        if status == "ok":
            empty = [c for c in _INT_COLS + ("trainable_ratio_pct", "accuracy_pct", "lr") if values[c] is None]
            if empty:
                raise ReportError(f"{source}:{lineno}: column {empty[0]!r} is empty")
        rows.append(Row(rec["method"], spec, status=status, source=f"{source}:{lineno}", **values))
    return rows


def _fmt(v, spec="") -> str:
    return "" if v is None else format(v, spec)


def markdown_table(rows: list[Row]) -> str:
    out = ["| Group | Method | Trainable (%) | Peak retained (B) | Est. footprint (B) | Backward FLOPs | "
           "Step (ms) | Accuracy (%) | lr | Status |",
           "|---|---|---:|---:|---:|---:|---:|---:|---:|---|"]
    for r in sorted(rows, key=Row.sort_key):
        out.append(f"| {r.group} | {r.method} | {_fmt(r.trainable_ratio_pct, '.3f')} | {_fmt(r.peak_retained_bytes)} | "
                   f"{_fmt(r.est_footprint_bytes)} | {_fmt(r.backward_flops)} | {_fmt(r.step_ms, '.2f')} | "
                   f"{_fmt(r.accuracy_pct, '.2f')} | {_fmt(r.lr, 'g')} | {r.status} |")
    return "\n".join(out)


def _all_below(name: str, lows: list[Row], highs: list[Row], col: str) -> str | None:
    """One verdict line: every row in ``lows`` strictly below every row in ``highs`` on ``col``."""
    if not lows or not highs:
        return None
    worst_low = max(lows, key=lambda r: getattr(r, col))
    best_high = min(highs, key=lambda r: getattr(r, col))
    a, b = getattr(worst_low, col), getattr(best_high, col)
    if a < b:
        return f"PASS {name}"
    return f"FAIL {name}: {worst_low.method} ({col}={a}) >= {best_high.method} ({col}={b})"


def verdicts(rows: list[Row]) -> list[str]:
    ok = [r for r in rows if r.ok]
    meft = [r for r in ok if r.spec.kind in MEFT_KINDS]
    peft = [r for r in ok if r.spec.kind in PEFT_KINDS]
    vanilla = [r for r in ok if r.spec.kind == "vanilla"]
    lines = []
    for col in ("peak_retained_bytes", "est_footprint_bytes"):
        lines.append(_all_below(f"MEFT < PEFT by {col}", meft, peft, col))
        lines.append(_all_below(f"PEFT < vanilla by {col}", peft, vanilla, col))
        if not peft:
            lines.append(_all_below(f"MEFT < vanilla by {col}", meft, vanilla, col))
    lst = {r.spec.rf: r for r in ok if r.spec.kind == "lst"}
    rfs = sorted(lst)
    if len(rfs) >= 2:
        bad = [(lst[a], lst[b]) for a, b in zip(rfs, rfs[1:]) if not lst[b].peak_retained_bytes < lst[a].peak_retained_bytes]
        if bad:
            lo, hi = bad[0]
            lines.append(f"FAIL LST memory decreasing in RF: {hi.method} ({hi.peak_retained_bytes}) >= "
                         f"{lo.method} ({lo.peak_retained_bytes})")
        else:
            lines.append("PASS LST memory decreasing in RF")
    if 8 in lst and vanilla:
        ratio = lst[8].backward_flops / vanilla[0].backward_flops
        status = "PASS" if ratio <= 0.5 else "FAIL"
        lines.append(f"{status} backward FLOPs LST(8)/vanilla = {ratio:.3f} (<= 0.5)")
    return [line for line in lines if line is not None]


def render_report(rows: list[Row]) -> str:
    lines = verdicts(rows)
    text = markdown_table(rows) + "\n"
    if lines:
        text += "\n" + "\n".join(lines) + "\n"
    return text
