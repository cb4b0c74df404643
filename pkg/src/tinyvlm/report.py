"""SVG line plots of benchmark metrics against words seen.

Hand-rolled SVG so the batch pipeline has no display dependency: one
polyline per model variant, log-scaled x axis with ticks at the checkpoint
schedule milestones that fall inside the data range.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

from .trainer import SCHEDULE_THRESHOLDS

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")

_W, _H = 880, 520
_ML, _MR, _MT, _MB = 70, 170, 40, 55


def format_words(n: float) -> str:
    if n >= 1e9:
        return f"{n / 1e9:g}B"
    if n >= 1e6:
        return f"{n / 1e6:g}M"
    if n >= 1e3:
        return f"{n / 1e3:g}K"
    return f"{n:g}"


def schedule_ticks(xmin: float, xmax: float) -> list[int]:
    """Milestones of the checkpoint schedule lying within [xmin, xmax]."""
    return [t for t in SCHEDULE_THRESHOLDS if xmin <= t <= xmax]


def write_curve_plot(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    out_path,
    title: str = "",
    ylabel: str = "metric",
) -> Path:
    """series: (label, words_seen values, metric values) triples."""
    if not series:
        raise ValueError("no series to plot")
    for label, xs, ys in series:
        if len(xs) != len(ys):
            raise ValueError(f"series {label!r}: x/y length mismatch")
        if len(xs) == 0:
            raise ValueError(f"series {label!r} is empty")

    all_x = [max(float(x), 1.0) for _, xs, _ in series for x in xs]
    all_y = [float(y) for _, _, ys in series for y in ys]
    x_lo, x_hi = min(all_x), max(all_x)
    # snap the axis outward to the bracketing schedule milestones, so the
    # milestone ticks frame the data (checkpoints land slightly past their
    # thresholds)
    below = [t for t in SCHEDULE_THRESHOLDS if t <= x_lo]
    above = [t for t in SCHEDULE_THRESHOLDS if t >= x_hi]
    if below:
        x_lo = float(below[-1])
    if above:
        x_hi = float(above[0])
    lx_min, lx_max = math.log10(x_lo), math.log10(x_hi)
    if lx_max == lx_min:
        lx_min -= 0.5
        lx_max += 0.5
    span = lx_max - lx_min
    lx_min -= 0.02 * span
    lx_max += 0.02 * span
    y_min, y_max = min(all_y), max(all_y)
    pad = 0.05 * (y_max - y_min) if y_max > y_min else 0.5
    y_min -= pad
    y_max += pad

    pw = _W - _ML - _MR
    ph = _H - _MT - _MB

    def px(x: float) -> float:
        return _ML + (math.log10(max(x, 1.0)) - lx_min) / (lx_max - lx_min) * pw

    def py(y: float) -> float:
        return _MT + (y_max - y) / (y_max - y_min) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    if title:
        parts.append(f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" font-size="15">{_esc(title)}</text>')

    for tick in schedule_ticks(10 ** lx_min, 10 ** lx_max):
        x = px(tick)
        parts.append(f'<line x1="{x:.1f}" y1="{_MT}" x2="{x:.1f}" y2="{_MT + ph}" stroke="#ddd"/>')
        parts.append(f'<line x1="{x:.1f}" y1="{_MT + ph}" x2="{x:.1f}" y2="{_MT + ph + 5}" stroke="#444"/>')
        parts.append(
            f'<text x="{x:.1f}" y="{_MT + ph + 18}" text-anchor="middle" class="xtick">{format_words(tick)}</text>'
        )
    for i in range(5):
        y = y_min + (y_max - y_min) * i / 4
        parts.append(f'<line x1="{_ML - 5}" y1="{py(y):.1f}" x2="{_ML}" y2="{py(y):.1f}" stroke="#444"/>')
        parts.append(f'<text x="{_ML - 9}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.3g}</text>')
    parts.append(
        f'<text x="{_W - _MR + 10}" y="{_MT - 14}" font-size="13">{_esc(ylabel)}</text>'
    )
    parts.append(
        f'<text x="{_ML + pw / 2:.1f}" y="{_H - 12}" text-anchor="middle">words seen (log scale)</text>'
    )

    for idx, (label, xs, ys) in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        pts = " ".join(f"{px(float(x)):.2f},{py(float(y)):.2f}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline class="series" data-label="{_esc(label)}" points="{pts}" '
            f'fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{px(float(x)):.2f}" cy="{py(float(y)):.2f}" r="3" fill="{color}"/>')
        ly = _MT + 16 + 18 * idx
        parts.append(f'<line x1="{_W - _MR + 10}" y1="{ly - 4}" x2="{_W - _MR + 34}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_W - _MR + 40}" y="{ly}">{_esc(label)}</text>')

    parts.append("</svg>")
    out_path = Path(out_path)
    out_path.write_text("\n".join(parts), encoding="utf-8")
    return out_path


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
