"""Run artifacts: JSON-lines reports, CSV tables and hand-written SVG figures.

All writers are byte-deterministic for identical inputs: floats are formatted
with ``repr``, JSON keys are sorted and SVG coordinates are rounded.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

TABLE_SCHEMA = "subjectdp.table/1"

ROUNDS_FILE = "rounds.jsonl"
AUDITS_FILE = "audits.jsonl"
NOISE_FILE = "noise.json"
SUMMARY_FILE = "summary.json"
BOUNDS_FILE = "bounds.csv"

ROUNDS_HEADER = ["schema", "round", "test_loss", "test_accuracy", "batches"]
HISTOGRAM_HEADER = ["schema", "group_size", "batches"]
BOUNDS_HEADER = ["schema", "bound", "value", "L", "M", "eta", "T", "n", "d",
                 "epsilon", "delta", "k", "q", "m", "excess_loss"]
SWEEP_HEADER = ["schema", "run", "overrides", "algorithm", "seed", "effective_rounds",
                "final_test_accuracy", "final_test_loss", "mean_observed_Z", "mean_sigma"]


class ReportWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# JSON lines and CSV
# ---------------------------------------------------------------------------


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dump_json(rec) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """RFC 4180 table (CRLF line ends) whose first column is the schema tag."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def group_size_histogram(audits: Iterable[dict]) -> dict[int, int]:
    """Number of batches per observed group size Z."""
    counts = Counter(int(a["observed_Z"]) for a in audits if a.get("observed_Z") is not None)
    return dict(sorted(counts.items()))


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_W, _H = 480, 320
_ML, _MR, _MT, _MB = 60, 20, 30, 45
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]


def _f(x: float) -> str:
    return f"{x:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _fmt_tick(t: float) -> str:
    return f"{t:g}"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str,
                 xlim: tuple[float, float], ylim: tuple[float, float]):
        self.parts: list[str] = []
        self.xlim, self.ylim = xlim, ylim
        self.parts.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">'
        )
        self.parts.append(f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>')
        self.parts.append(
            f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>'
        )
        x0, y0, x1, y1 = _ML, _H - _MB, _W - _MR, _MT
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        self.parts.append(
            f'<text x="{(x0 + x1) / 2}" y="{_H - 8}" text-anchor="middle">{escape(xlabel)}</text>'
        )
        self.parts.append(
            f'<text x="14" y="{(y0 + y1) / 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {(y0 + y1) / 2})">{escape(ylabel)}</text>'
        )

    def sx(self, x: float) -> float:
        lo, hi = self.xlim
        return _ML + (x - lo) / (hi - lo) * (_W - _ML - _MR)

    def sy(self, y: float) -> float:
        lo, hi = self.ylim
        return _H - _MB - (y - lo) / (hi - lo) * (_H - _MT - _MB)

    def axes_ticks(self, xticks=None, yticks=None):
        for t in xticks if xticks is not None else _ticks(*self.xlim):
            x = self.sx(t)
            self.parts.append(f'<line x1="{_f(x)}" y1="{_H - _MB}" x2="{_f(x)}" y2="{_H - _MB + 4}" stroke="black"/>')
            self.parts.append(f'<text x="{_f(x)}" y="{_H - _MB + 16}" text-anchor="middle">{_fmt_tick(t)}</text>')
        for t in yticks if yticks is not None else _ticks(*self.ylim):
            y = self.sy(t)
            self.parts.append(f'<line x1="{_ML - 4}" y1="{_f(y)}" x2="{_ML}" y2="{_f(y)}" stroke="black"/>')
            self.parts.append(f'<text x="{_ML - 6}" y="{_f(y + 4)}" text-anchor="end">{_fmt_tick(t)}</text>')

    def polyline(self, xs, ys, color: str):
        pts = " ".join(f"{_f(self.sx(x))},{_f(self.sy(y))}" for x, y in zip(xs, ys))
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')

    def bar(self, x0: float, x1: float, y: float, color: str):
        px0, px1, py, base = self.sx(x0), self.sx(x1), self.sy(y), self.sy(self.ylim[0])
        self.parts.append(
            f'<rect x="{_f(px0)}" y="{_f(py)}" width="{_f(px1 - px0)}" height="{_f(base - py)}" fill="{color}"/>'
        )

    def legend(self, labels: Sequence[str]):
        for i, label in enumerate(labels):
            y = _MT + 12 + 14 * i
            color = _COLORS[i % len(_COLORS)]
            self.parts.append(f'<line x1="{_W - _MR - 120}" y1="{y - 4}" x2="{_W - _MR - 104}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
            self.parts.append(f'<text x="{_W - _MR - 100}" y="{y}">{escape(label)}</text>')

    def text(self, x: float, y: float, s: str, anchor: str = "start"):
        self.parts.append(f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}">{escape(s)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _limits(values: Sequence[float], pad_zero: bool = False) -> tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if pad_zero:
        lo = min(lo, 0.0)
    if hi == lo:
        hi = lo + 1.0
    return lo, hi


def curve_svg(title: str, ylabel: str, series: dict[str, tuple[list[float], list[float]]],
              ylim: tuple[float, float] | None = None) -> str:
    """Line chart of one or more (x, y) series keyed by label."""
    xs = [x for s in series.values() for x in s[0]]
    ys = [y for s in series.values() for y in s[1]]
    c = _Canvas(title, "round", ylabel, _limits(xs), ylim or _limits(ys))
    c.axes_ticks()
    for i, (label, (x, y)) in enumerate(series.items()):
        c.polyline(x, y, _COLORS[i % len(_COLORS)])
    if len(series) > 1:
        c.legend(list(series))
    return c.render()


def histogram_svg(title: str, hist: dict[int, int]) -> str:
    keys = sorted(hist)
    lo, hi = (keys[0] - 0.5, keys[-1] + 0.5) if keys else (0.5, 1.5)
    top = max(hist.values()) if hist else 1
    c = _Canvas(title, "subject group size Z", "mini-batches", (lo, hi), (0.0, float(top)))
    c.axes_ticks(xticks=keys if len(keys) <= 20 else None)
    for z in keys:
        c.bar(z - 0.4, z + 0.4, hist[z], _COLORS[0])
    return c.render()


def table_svg(title: str, header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    row_h, col_w = 18, 110
    width = max(_W, 20 + col_w * len(header))
    height = 40 + row_h * (len(rows) + 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="10" y="18" font-size="13">{escape(title)}</text>',
    ]
    for r, row in enumerate([list(header)] + [list(x) for x in rows]):
        y = 40 + r * row_h
        weight = ' font-weight="bold"' if r == 0 else ""
        for j, cell in enumerate(row):
            parts.append(f'<text x="{10 + j * col_w}" y="{y}"{weight}>{escape(str(cell))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Figures for run directories
# ---------------------------------------------------------------------------


def _label(run_dir: Path) -> str:
    return run_dir.name or str(run_dir)


def plot_runs(run_dirs: Sequence[Path], out: Path) -> list[Path]:
    """Writes curves, group-size histograms and bound tables for run directories.

    Each figure comes with the CSV it was drawn from.

    Raises:
      FileNotFoundError: a run directory has no round reports.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run_dirs = [Path(d) for d in run_dirs]
    written: list[Path] = []
    acc, loss, curve_rows = {}, {}, []
    for d in run_dirs:
        path = d / ROUNDS_FILE
        if not path.exists():
            raise FileNotFoundError(f"{d}: no {ROUNDS_FILE}")
        rounds = read_jsonl(path)
        label = _label(d)
        xs = [r["round"] + 1 for r in rounds]
        acc[label] = (xs, [r["test_accuracy"] for r in rounds])
        loss[label] = (xs, [r["test_loss"] for r in rounds])
        curve_rows += [[TABLE_SCHEMA, label, r["round"], r["test_loss"], r["test_accuracy"]]
                       for r in rounds]

    def emit(name: str, content: str):
        p = out / name
        p.write_text(content, encoding="utf-8")
        written.append(p)

    write_csv(out / "curves.csv", ["schema", "run", "round", "test_loss", "test_accuracy"], curve_rows)
    written.append(out / "curves.csv")
    emit("accuracy.svg", curve_svg("Test accuracy", "accuracy", acc, ylim=(0.0, 1.0)))
    emit("loss.svg", curve_svg("Test loss", "loss", loss))

    multi = len(run_dirs) > 1
    for d in run_dirs:
        suffix = f"_{_label(d)}" if multi else ""
        audits_path = d / AUDITS_FILE
        hist = group_size_histogram(read_jsonl(audits_path)) if audits_path.exists() else {}
        if not hist:
            warnings.warn(f"{d}: no group-size audits; histogram skipped", ReportWarning, stacklevel=2)
        else:
            write_csv(out / f"group_sizes{suffix}.csv", HISTOGRAM_HEADER,
                      [[TABLE_SCHEMA, z, n] for z, n in hist.items()])
            written.append(out / f"group_sizes{suffix}.csv")
            emit(f"group_sizes{suffix}.svg",
                 histogram_svg("Mini-batches per subject group size", hist))
        bounds_path = d / BOUNDS_FILE
        if bounds_path.exists():
            rows = read_csv(bounds_path)
            table = [[r["bound"], f'{float(r["value"]):.6g}', r["L"], r["k"], r["epsilon"],
                      r["excess_loss"]] for r in rows]
            emit(f"bounds{suffix}.svg", table_svg(
                "Excess loss bounds", ["bound", "value", "L", "k", "epsilon", "excess loss"], table))
    return written


def render_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()
