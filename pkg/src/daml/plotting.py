"""Deterministic SVG artifacts from training logs and evaluation reports.

Charts are emitted as hand-assembled SVG text: identical inputs produce
byte-identical files (no timestamps, ids, or library version strings).
"""

from __future__ import annotations

import csv
import json
import os

W, H = 640, 400
ML, MR, MT, MB = 60, 20, 40, 50          # plot margins
SERIES = ("outer_loss", "inner_loss_pre", "inner_loss_post")
SERIES_COLORS = ("#1f497d", "#c0504d", "#4f9d4f")
LOG_COLUMNS = ("iteration", "outer_loss", "inner_loss_pre",
               "inner_loss_post", "wall_time_ms")


class PlotError(ValueError):
    pass


def read_train_log(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = tuple(reader.fieldnames or ())
        missing = [c for c in LOG_COLUMNS if c not in cols]
        if missing:
            raise PlotError(f"{path}: missing columns {missing}")
        return [{k: float(row[k]) for k in LOG_COLUMNS} for row in reader]


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _svg(body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}">\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _axes(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<text x="{W // 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="monospace">{title}</text>',
        f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" '
        f'stroke="black"/>',
        f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{H - MB}" stroke="black"/>',
        f'<text x="{W // 2}" y="{H - 12}" text-anchor="middle" font-size="12" '
        f'font-family="monospace">{xlabel}</text>',
        f'<text x="16" y="{H // 2}" text-anchor="middle" font-size="12" '
        f'font-family="monospace" transform="rotate(-90 16 {H // 2})">{ylabel}</text>',
    ]


def loss_curve_svg(rows: list[dict], title: str) -> str:
    body = _axes(title, "iteration", "loss")
    if rows:
        xs = [r["iteration"] for r in rows]
        ys = [r[s] for r in rows for s in SERIES]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        xspan = (x1 - x0) or 1.0
        yspan = (y1 - y0) or 1.0

        def px(x):
            return ML + (x - x0) / xspan * (W - ML - MR)

        def py(y):
            return H - MB - (y - y0) / yspan * (H - MT - MB)

        for si, s in enumerate(SERIES):
            pts = " ".join(f"{_fmt(px(r['iteration']))},{_fmt(py(r[s]))}"
                           for r in rows)
            body.append(f'<polyline points="{pts}" fill="none" '
                        f'stroke="{SERIES_COLORS[si]}" stroke-width="1.5"/>')
            body.append(f'<text x="{W - MR - 150}" y="{MT + 14 + 14 * si}" '
                        f'font-size="11" font-family="monospace" '
                        f'fill="{SERIES_COLORS[si]}">{s}</text>')
        for v, x in ((x0, ML), (x1, W - MR)):
            body.append(f'<text x="{x}" y="{H - MB + 16}" text-anchor="middle" '
                        f'font-size="11" font-family="monospace">{_fmt(v)}</text>')
        for v, y in ((y0, H - MB), (y1, MT)):
            body.append(f'<text x="{ML - 6}" y="{y + 4}" text-anchor="end" '
                        f'font-size="11" font-family="monospace">{_fmt(v)}</text>')
    return _svg(body)


def bar_chart_svg(labels: list[str], values: list[float], title: str) -> str:
    if len(labels) != len(values):
        raise PlotError("labels and values must align")
    body = _axes(title, "method", "success rate")
    if labels:
        span = W - ML - MR
        slot = span / len(labels)
        bw = slot * 0.6
        for i, (lab, val) in enumerate(zip(labels, values)):
            v = min(max(val, 0.0), 1.0)
            bh = v * (H - MT - MB)
            x = ML + slot * i + (slot - bw) / 2
            y = H - MB - bh
            body.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bw)}" '
                        f'height="{_fmt(bh)}" fill="#1f497d"/>')
            cx = x + bw / 2
            body.append(f'<text x="{_fmt(cx)}" y="{H - MB + 16}" '
                        f'text-anchor="middle" font-size="11" '
                        f'font-family="monospace">{lab}</text>')
            body.append(f'<text x="{_fmt(cx)}" y="{_fmt(y - 5)}" '
                        f'text-anchor="middle" font-size="11" '
                        f'font-family="monospace">{_fmt(val)}</text>')
    return _svg(body)


def report_bars(reports: list[dict]) -> tuple[list[str], list[float]]:
    labels, values = [], []
    for rep in reports:
        try:
            labels.append(rep["method"])
            values.append(float(rep["adapted"]["success_rate"]))
            if "unadapted" in rep:
                labels.append(f'{rep["method"]}:unadapted')
                values.append(float(rep["unadapted"]["success_rate"]))
        except KeyError as e:
            raise PlotError(f"report missing field {e}") from None
    return labels, values


def success_csv(labels: list[str], values: list[float]) -> str:
    lines = ["label,success_rate"]
    lines.extend(f"{lab},{_fmt(val)}" for lab, val in zip(labels, values))
    return "\n".join(lines) + "\n"


def render_artifacts(in_paths: list[str], out_dir: str) -> list[str]:
    """Loss curves for each CSV log, one shared bar chart for JSON reports."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    reports = []
    for path in in_paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        if path.endswith(".csv"):
            rows = read_train_log(path)
            out = os.path.join(out_dir, f"{stem}_loss.svg")
            with open(out, "w") as fh:
                fh.write(loss_curve_svg(rows, stem))
            written.append(out)
        elif path.endswith(".json"):
            with open(path) as fh:
                reports.append(json.load(fh))
        else:
            raise PlotError(f"cannot plot {path}: expect .csv log or .json report")
    if reports:
        labels, values = report_bars(reports)
        out = os.path.join(out_dir, "success_rates.svg")
        with open(out, "w") as fh:
            fh.write(bar_chart_svg(labels, values, "one-shot success by method"))
        written.append(out)
        out = os.path.join(out_dir, "success_rates.csv")
        with open(out, "w") as fh:
            fh.write(success_csv(labels, values))
        written.append(out)
    return written
