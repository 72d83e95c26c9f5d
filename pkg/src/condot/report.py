"""Static SVG and markdown summaries of training runs.

Output depends only on the run files, so identical runs give identical bytes.
"""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 640, 400, 50
COLORS = {"f": "#1f77b4", "g": "#d62728", "primal": "#2ca02c", "source": "#7f7f7f", "target": "#1f77b4",
          "predicted": "#d62728"}


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _scale(lo: float, hi: float, a: float, b: float):
    if not math.isfinite(lo) or not math.isfinite(hi) or hi <= lo:
        lo, hi = lo - 1.0, lo + 1.0
    return lambda v: a + (v - lo) * (b - a) / (hi - lo)


def _frame(title: str, xlabel: str, ylabel: str, xr, yr) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">'
        f'{escape(title)}</text>',
        f'<rect x="{PAD}" y="{PAD}" width="{WIDTH - 2 * PAD}" height="{HEIGHT - 2 * PAD}" fill="none" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">'
        f'{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
    ]
    for (v, pos, anchor, x, y) in (
        (xr[0], PAD, "start", PAD, HEIGHT - PAD + 15), (xr[1], WIDTH - PAD, "end", WIDTH - PAD, HEIGHT - PAD + 15),
        (yr[0], HEIGHT - PAD, "end", PAD - 4, HEIGHT - PAD), (yr[1], PAD, "end", PAD - 4, PAD + 10),
    ):
        parts.append(f'<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="sans-serif" font-size="10">'
                     f'{v:.4g}</text>')
    return parts


def loss_curve_svg(history: Sequence[tuple[int, str, str, float]], title: str = "training losses") -> str:
    """One polyline per loss name (step on x, loss value on y)."""
    series: dict[str, list[tuple[int, float]]] = {}
    for step, _, name, value in history:
        if math.isfinite(value):
            series.setdefault(name, []).append((step, value))
    steps = [s for pts in series.values() for s, _ in pts] or [0, 1]
    vals = [v for pts in series.values() for _, v in pts] or [0.0, 1.0]
    xr, yr = (min(steps), max(steps)), (min(vals), max(vals))
    sx = _scale(*xr, PAD, WIDTH - PAD)
    sy = _scale(*yr, HEIGHT - PAD, PAD)
    parts = _frame(title, "step", "loss", xr, yr)
    for i, name in enumerate(sorted(series)):
        pts = " ".join(f"{_fmt(sx(s))},{_fmt(sy(v))}" for s, v in series[name])
        color = COLORS.get(name, "#000000")
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>')
        parts.append(f'<text x="{WIDTH - PAD - 5}" y="{PAD + 15 + 14 * i}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def scatter_svg(sets: dict[str, np.ndarray], title: str = "samples", max_points: int = 300) -> str:
    """2-D scatter overlay of several sample sets (first ``max_points`` rows each)."""
    pts = {k: np.asarray(v, dtype=np.float64)[:max_points] for k, v in sets.items()}
    allp = np.vstack(list(pts.values()))
    xr = (float(allp[:, 0].min()), float(allp[:, 0].max()))
    yr = (float(allp[:, 1].min()), float(allp[:, 1].max()))
    sx = _scale(*xr, PAD, WIDTH - PAD)
    sy = _scale(*yr, HEIGHT - PAD, PAD)
    parts = _frame(title, "x0", "x1", xr, yr)
    for i, (name, P) in enumerate(pts.items()):
        color = COLORS.get(name, "#000000")
        parts.append(f'<g fill="{color}" fill-opacity="0.5">')
        parts.extend(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="2"/>' for x, y in P)
        parts.append("</g>")
        parts.append(f'<text x="{WIDTH - PAD - 5}" y="{PAD + 15 + 14 * i}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def summary_markdown(rows: Sequence[dict]) -> str:
    """Comparison table: one row per run with its final losses and any metrics."""
    cols = list(dict.fromkeys(k for r in rows for k in r if k != "run"))
    lines = ["# Run comparison", "", "| run | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c, "")
            cells.append(f"{v:.6g}" if isinstance(v, float) else str(v))
        lines.append(f"| {r['run']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
