"""Information-plane scatter as a self-contained SVG."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from ..miest import InfoPlanePoint, read_points_csv

WIDTH, HEIGHT = 800, 600
LEFT, RIGHT, TOP, BOTTOM = 80, 130, 30, 60
MARKERS = {"train_with_noise": "circle", "posthoc_noise": "square"}
# viridis anchor colours, interpolated linearly
_CMAP = [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)]


def _colour(t: float) -> str:
    t = min(max(t, 0.0), 1.0) * (len(_CMAP) - 1)
    i = min(int(t), len(_CMAP) - 2)
    f = t - i
    rgb = [round(a + (b - a) * f) for a, b in zip(_CMAP[i], _CMAP[i + 1])]
    return "#%02x%02x%02x" % tuple(rgb)


def read_frontier_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"i_past", "i_future"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: frontier CSV needs i_past and i_future columns")
        for row in reader:
            try:
                rows.append((float(row["i_past"]), float(row["i_future"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed frontier row {row}") from exc
    return np.array(rows).reshape(-1, 2)


def write_frontier_csv(table: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["i_past", "i_future"])
        for a, b in table:
            w.writerow([repr(float(a)), repr(float(b))])


def _range(values: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def _marker(kind: str, x: float, y: float, colour: str) -> str:
    if kind == "circle":
        return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="5" fill="{colour}" stroke="black" stroke-width="0.5"/>'
    if kind == "square":
        return f'<rect x="{x - 4.5:.2f}" y="{y - 4.5:.2f}" width="9" height="9" fill="{colour}" stroke="black" stroke-width="0.5"/>'
    pts = f"{x:.2f},{y - 5.5:.2f} {x - 5:.2f},{y + 4:.2f} {x + 5:.2f},{y + 4:.2f}"
    return f'<polygon points="{pts}" fill="{colour}" stroke="black" stroke-width="0.5"/>'


def render_svg(points: Sequence[InfoPlanePoint], frontier: np.ndarray | None = None) -> str:
    """x: past information (bar spans the minibatch bounds), y: future information."""
    pts = [p for p in points if not p.unbounded and math.isfinite(p.i_future_nce)
           and math.isfinite(p.i_past_lower) and math.isfinite(p.i_past_upper)]
    xs = [v for p in pts for v in (p.i_past_lower, p.i_past_upper)]
    ys = [p.i_future_nce for p in pts]
    if frontier is not None and len(frontier):
        xs += list(frontier[:, 0])
        ys += list(frontier[:, 1])
    x0, x1 = _range(xs)
    y0, y1 = _range(ys)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.2f}" y1="{TOP + ph}" x2="{sx(t):.2f}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{TOP + ph + 20}" font-size="12" text-anchor="middle">{t:.2f}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{LEFT - 5}" y1="{sy(t):.2f}" x2="{LEFT}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{sy(t) + 4:.2f}" font-size="12" text-anchor="end">{t:.2f}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 15}" font-size="14" text-anchor="middle">I(z; past) [nats]</text>')
    out.append(f'<text x="20" y="{TOP + ph / 2:.1f}" font-size="14" text-anchor="middle" '
               f'transform="rotate(-90 20 {TOP + ph / 2:.1f})">I(z; future) [nats]</text>')

    if frontier is not None and len(frontier):
        path = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in frontier)
        out.append(f'<polyline points="{path}" fill="none" stroke="black" stroke-width="1.5"/>')

    logs = [math.log10(p.eval_noise_sigma) for p in pts if p.eval_noise_sigma > 0]
    c0, c1 = (min(logs), max(logs)) if logs else (0.0, 1.0)
    span = c1 - c0 if c1 > c0 else 1.0
    for p in pts:
        t = (math.log10(p.eval_noise_sigma) - c0) / span if p.eval_noise_sigma > 0 else 0.0
        colour = _colour(t)
        y = sy(p.i_future_nce)
        out.append(f'<line x1="{sx(p.i_past_lower):.2f}" y1="{y:.2f}" x2="{sx(p.i_past_upper):.2f}" '
                   f'y2="{y:.2f}" stroke="{colour}" stroke-width="2"/>')
        xm = sx(0.5 * (p.i_past_lower + p.i_past_upper))
        out.append(_marker(MARKERS.get(p.mode, "triangle"), xm, y, colour))

    # colour bar and legend
    bx = WIDTH - RIGHT + 30
    for k in range(50):
        yk = TOP + ph - (k + 1) * ph / 50
        out.append(f'<rect x="{bx}" y="{yk:.2f}" width="15" height="{ph / 50 + 0.5:.2f}" fill="{_colour(k / 49)}"/>')
    out.append(f'<text x="{bx + 20}" y="{TOP + ph}" font-size="11">{c0:.2f}</text>')
    out.append(f'<text x="{bx + 20}" y="{TOP + 10}" font-size="11">{c1:.2f}</text>')
    out.append(f'<text x="{bx - 5}" y="{TOP - 10}" font-size="11">log10 sigma</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(points_csv, out_path, frontier_csv=None) -> str:
    """Read the CSVs, write the SVG to ``out_path`` and return its text."""
    try:
        points = read_points_csv(points_csv)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{points_csv}: malformed points CSV ({exc})") from exc
    frontier = read_frontier_csv(frontier_csv) if frontier_csv else None
    svg = render_svg(points, frontier)
    Path(out_path).write_text(svg)
    return svg
