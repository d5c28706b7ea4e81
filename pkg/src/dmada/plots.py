"""Minimal SVG line charts for metric logs; no plotting library involved."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from .trainer import MetricsRecord, read_metrics

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
               log_x: bool = False) -> str:
    """Render named ``(x, y)`` series as a standalone SVG document."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("nothing to plot")
    fx = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    xs = [fx(x) for x, _ in pts]
    ys = [y for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(v):
        return MARGIN["left"] + (fx(v) - x0) / (x1 - x0) * pw

    def sy(v):
        return MARGIN["top"] + (1 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text class="title" x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<g class="axes" stroke="black">'
        f'<line x1="{MARGIN["left"]}" y1="{MARGIN["top"] + ph}" x2="{MARGIN["left"] + pw}" y2="{MARGIN["top"] + ph}"/>'
        f'<line x1="{MARGIN["left"]}" y1="{MARGIN["top"]}" x2="{MARGIN["left"]}" y2="{MARGIN["top"] + ph}"/></g>',
    ]
    for t in _ticks(x0, x1):
        label = 10**t if log_x else t
        px = MARGIN["left"] + (t - x0) / (x1 - x0) * pw
        out.append(f'<text class="xtick" x="{px:.1f}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle" font-size="11">{label:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text class="ytick" x="{MARGIN["left"] - 6}" y="{sy(t) + 4:.1f}" text-anchor="end" font-size="11">{t:.3g}</text>')
    scale = ' data-scale="log"' if log_x else ""
    out.append(f'<text class="xlabel"{scale} x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text class="ylabel" x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline class="series" data-name="{escape(name)}" fill="none" stroke="{color}" stroke-width="1.8" points="{path}"/>')
        ly = MARGIN["top"] + 14 * i + 6
        lx = WIDTH - MARGIN["right"] + 10
        out.append(f'<line class="legend" x1="{lx}" y1="{ly}" x2="{lx + 16}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 20}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


LOSS_COLUMNS = ("kl", "cls_c", "adv_s", "adv_t", "adv_m", "soft_m", "tri_m", "cls_s_g", "cls_t_g")


def plot_run(run_dir, out_dir=None) -> list[Path]:
    """Loss curves and accuracy-vs-epoch for one run directory."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    records = read_metrics(run_dir / "metrics.csv")
    losses = {c: [(r.epoch, getattr(r, c)) for r in records] for c in LOSS_COLUMNS}
    acc = {
        "target accuracy": [(r.epoch, r.target_accuracy) for r in records],
        "A-distance / 2": [(r.epoch, r.a_distance / 2) for r in records],
    }
    paths = [out_dir / "losses.svg", out_dir / "accuracy.svg"]
    paths[0].write_text(line_chart(losses, f"losses: {run_dir.name}", "epoch", "loss"))
    paths[1].write_text(line_chart(acc, f"accuracy: {run_dir.name}", "epoch", "value"))
    return paths


def plot_sensitivity(runs: dict[str, list[tuple[float, list[MetricsRecord]]]], path) -> Path:
    """One grouped chart: final target accuracy against each swept hyper-parameter (log x)."""
    series = {}
    for param, entries in runs.items():
        by_value: dict[float, list[float]] = {}
        for value, records in entries:
            by_value.setdefault(value, []).append(records[-1].target_accuracy)
        series[param] = sorted((v, sum(a) / len(a)) for v, a in by_value.items())
    path = Path(path)
    path.write_text(line_chart(series, "sensitivity", "hyper-parameter value", "final target accuracy", log_x=True))
    return path
