"""Static SVG charts rendered by hand (no plotting dependencies).

Two chart kinds cover the evaluation outputs: per-step median curves with
interquartile bands, and grouped box summaries of RMSE versus training-set
size.  Output is deterministic for identical inputs: fixed canvas, fixed
palette, fixed float formatting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

WIDTH = 720
HEIGHT = 440
MARGIN_L = 70
MARGIN_R = 20
MARGIN_T = 36
MARGIN_B = 52

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= m * mag:
            step = m * mag
            break
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>',
            f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{xlabel}</text>',
            f'<text x="16" y="{HEIGHT / 2:.0f}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="12" transform="rotate(-90 16 {HEIGHT / 2:.0f})">{ylabel}</text>',
        ]

    def add(self, fragment: str) -> None:
        self.parts.append(fragment)

    def finish(self) -> str:
        self.parts.append("</svg>")
        return "\n".join(self.parts) + "\n"


def _scales(xlo, xhi, ylo, yhi):
    def sx(x):
        return MARGIN_L + (x - xlo) / (xhi - xlo) * (WIDTH - MARGIN_L - MARGIN_R)

    def sy(y):
        return HEIGHT - MARGIN_B - (y - ylo) / (yhi - ylo) * (HEIGHT - MARGIN_T - MARGIN_B)

    return sx, sy


def _axes(canvas: _Canvas, sx, sy, xticks, yticks, xfmt=str):
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = HEIGHT - MARGIN_B, MARGIN_T
    canvas.add(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    canvas.add(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for t in xticks:
        px = sx(t)
        canvas.add(f'<line x1="{_fmt(px)}" y1="{y0}" x2="{_fmt(px)}" y2="{y0 + 5}" stroke="black"/>')
        canvas.add(
            f'<text x="{_fmt(px)}" y="{y0 + 18}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="11">{xfmt(t)}</text>'
        )
    for t in yticks:
        py = sy(t)
        canvas.add(f'<line x1="{x0 - 5}" y1="{_fmt(py)}" x2="{x0}" y2="{_fmt(py)}" stroke="black"/>')
        canvas.add(
            f'<text x="{x0 - 8}" y="{_fmt(py + 4)}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{t:g}</text>'
        )


@dataclass
class BandSeries:
    """One named curve with its interquartile band."""

    name: str
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray


def render_band_chart(
    series: list,
    title: str,
    xlabel: str = "step",
    ylabel: str = "deviation",
) -> str:
    """Median lines with 25-75% bands, one color per series."""
    finite_max = 0.0
    for s in series:
        vals = np.asarray(s.q75, dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        if finite.size:
            finite_max = max(finite_max, float(finite.max()))
    xhi = max(int(max(np.asarray(s.median).size for s in series)) - 1, 1)
    yhi = finite_max if finite_max > 0 else 1.0
    sx, sy = _scales(0.0, xhi, 0.0, yhi * 1.05)
    canvas = _Canvas(title, xlabel, ylabel)
    _axes(canvas, sx, sy, _nice_ticks(0, xhi), _nice_ticks(0, yhi * 1.05))

    def clip(v):
        return np.clip(np.nan_to_num(v, posinf=yhi * 1.05), 0.0, yhi * 1.05)

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        n = np.asarray(s.median).size
        xs = np.arange(n)
        lo = clip(np.asarray(s.q25, dtype=np.float64))
        hi = clip(np.asarray(s.q75, dtype=np.float64))
        med = clip(np.asarray(s.median, dtype=np.float64))
        band = (
            " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, hi))
            + " "
            + " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs[::-1], lo[::-1]))
        )
        canvas.add(f'<polygon points="{band}" fill="{color}" fill-opacity="0.18" stroke="none"/>')
        line = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, med))
        canvas.add(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        ly = MARGIN_T + 14 + 16 * i
        canvas.add(
            f'<line x1="{MARGIN_L + 10}" y1="{ly - 4}" x2="{MARGIN_L + 34}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        canvas.add(
            f'<text x="{MARGIN_L + 40}" y="{ly}" font-family="sans-serif" font-size="11">{s.name}</text>'
        )
    return canvas.finish()


@dataclass
class BoxGroup:
    """Boxes at one categorical x slot (e.g. one training-set size)."""

    label: str
    boxes: list  # (series name, lo, q25, median, q75, hi)


def render_box_chart(
    groups: list,
    title: str,
    xlabel: str = "training trajectories",
    ylabel: str = "validation RMSE (rad)",
) -> str:
    """Grouped boxes: quartile rectangles with median line and whiskers."""
    names = []
    for g in groups:
        for name, *_ in g.boxes:
            if name not in names:
                names.append(name)
    vals = [
        v
        for g in groups
        for (_, lo, q25, med, q75, hi) in g.boxes
        for v in (lo, q25, med, q75, hi)
        if math.isfinite(v)
    ]
    yhi = (max(vals) if vals else 1.0) * 1.1
    sx, sy = _scales(0.0, len(groups), 0.0, yhi)
    canvas = _Canvas(title, xlabel, ylabel)
    _axes(
        canvas,
        sx,
        sy,
        [i + 0.5 for i in range(len(groups))],
        _nice_ticks(0, yhi),
        xfmt=lambda t: groups[int(t)].label,
    )
    n_series = max(len(names), 1)
    slot = 1.0
    box_w = slot * 0.7 / n_series
    for gi, g in enumerate(groups):
        for bi, (name, lo, q25, med, q75, hi) in enumerate(g.boxes):
            color = PALETTE[names.index(name) % len(PALETTE)]
            cx = gi + 0.15 + (bi + 0.5) * (slot * 0.7 / len(g.boxes))
            x_left = sx(cx - box_w / 2)
            x_right = sx(cx + box_w / 2)
            xc = sx(cx)

            def cl(v):
                return min(v, yhi) if math.isfinite(v) else yhi

            canvas.add(
                f'<line x1="{_fmt(xc)}" y1="{_fmt(sy(cl(lo)))}" x2="{_fmt(xc)}" '
                f'y2="{_fmt(sy(cl(hi)))}" stroke="{color}"/>'
            )
            canvas.add(
                f'<rect x="{_fmt(x_left)}" y="{_fmt(sy(cl(q75)))}" '
                f'width="{_fmt(x_right - x_left)}" height="{_fmt(abs(sy(cl(q25)) - sy(cl(q75))))}" '
                f'fill="{color}" fill-opacity="0.35" stroke="{color}"/>'
            )
            canvas.add(
                f'<line x1="{_fmt(x_left)}" y1="{_fmt(sy(cl(med)))}" x2="{_fmt(x_right)}" '
                f'y2="{_fmt(sy(cl(med)))}" stroke="{color}" stroke-width="2"/>'
            )
    for i, name in enumerate(names):
        ly = MARGIN_T + 14 + 16 * i
        color = PALETTE[i % len(PALETTE)]
        canvas.add(
            f'<rect x="{MARGIN_L + 10}" y="{ly - 10}" width="12" height="10" fill="{color}" '
            f'fill-opacity="0.5" stroke="{color}"/>'
        )
        canvas.add(
            f'<text x="{MARGIN_L + 28}" y="{ly}" font-family="sans-serif" font-size="11">{name}</text>'
        )
    return canvas.finish()
