"""Dependency-free SVG line charts for loss curves and effect plots.

Output is deterministic: coordinates are printed with fixed precision and
nothing time- or environment-dependent is written.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")

WIDTH, HEIGHT = 720, 440
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 44, 56


@dataclass
class Series:
    name: str
    x: Sequence[float]
    y: Sequence[float]
    se: Optional[Sequence[float]] = None
    dashed: bool = False


def nice_ticks(lo: float, hi: float, target: int = 5) -> list:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return [0.0, 1.0]
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / max(target, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + step * 1e-9:
        ticks.append(0.0 if abs(v) < step * 1e-9 else v)
        v = start + len(ticks) * step
    return ticks


def _fmt_tick(v: float) -> str:
    return f"{v:.4g}"


def _finite_pairs(s: Series):
    x = np.asarray(s.x, dtype=float)
    y = np.asarray(s.y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    se = None if s.se is None else np.asarray(s.se, dtype=float)
    if se is not None:
        ok &= np.isfinite(se)
        se = se[ok]
    return x[ok], y[ok], se


def render_svg_curves(series: Sequence[Series], title: str, path=None,
                      xlabel: str = "", ylabel: str = "") -> str:
    """Render one polyline per series (plus a closed se ribbon when given).

    Returns the SVG text and writes it to ``path`` when one is supplied.
    Non-finite points are skipped; a series without finite points still gets
    an (empty) polyline and its legend entry.
    """
    if not series:
        raise ValueError("need at least one series")
    for s in series:
        if len(s.x) != len(s.y):
            raise ValueError(f"series {s.name!r}: x and y differ in length")
    data = [_finite_pairs(s) for s in series]
    xs = np.concatenate([d[0] for d in data]) if data else np.array([])
    ys = np.concatenate([d[1] for d in data] + [d[1] - d[2] for d in data if d[2] is not None]
                        + [d[1] + d[2] for d in data if d[2] is not None])
    if xs.size == 0:
        xs = np.array([0.0, 1.0])
    if ys.size == 0:
        ys = np.array([0.0, 1.0])
    xticks = nice_ticks(float(xs.min()), float(xs.max()))
    yticks = nice_ticks(float(ys.min()), float(ys.max()))
    x0, x1 = min(xticks[0], xs.min()), max(xticks[-1], xs.max())
    y0, y1 = min(yticks[0], ys.min()), max(yticks[-1], ys.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{LEFT + pw / 2:.2f}" y="26" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{escape(title)}</text>',
    ]
    # axes and ticks
    out.append(f'<g class="axes" stroke="#333333" stroke-width="1" fill="none">'
               f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}"/>'
               f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}"/></g>')
    out.append('<g class="ticks" font-family="sans-serif" font-size="11" fill="#333333">')
    for t in xticks:
        if x0 <= t <= x1:
            x = px(t)
            out.append(f'<line x1="{x:.2f}" y1="{TOP + ph}" x2="{x:.2f}" y2="{TOP + ph + 5}" '
                       f'stroke="#333333"/>')
            out.append(f'<text x="{x:.2f}" y="{TOP + ph + 18}" text-anchor="middle">'
                       f'{_fmt_tick(t)}</text>')
    for t in yticks:
        if y0 <= t <= y1:
            y = py(t)
            out.append(f'<line x1="{LEFT - 5}" y1="{y:.2f}" x2="{LEFT}" y2="{y:.2f}" '
                       f'stroke="#333333"/>')
            out.append(f'<text x="{LEFT - 8}" y="{y + 4:.2f}" text-anchor="end">'
                       f'{_fmt_tick(t)}</text>')
    out.append("</g>")
    if xlabel:
        out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 14}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12" '
                   f'transform="rotate(-90 16 {TOP + ph / 2:.2f})">{escape(ylabel)}</text>')

    for i, (s, (x, y, se)) in enumerate(zip(series, data)):
        color = COLORS[i % len(COLORS)]
        if se is not None and x.size:
            upper = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y + se)]
            lower = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[::-1], (y - se)[::-1])]
            d = "M " + " L ".join(upper + lower) + " Z"
            out.append(f'<path class="ribbon" d="{d}" fill="{color}" fill-opacity="0.2" '
                       f'stroke="none"/>')
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.8"{dash}/>')

    out.append('<g class="legend" font-family="sans-serif" font-size="12">')
    lx = LEFT + pw + 16
    for i, s in enumerate(series):
        color = COLORS[i % len(COLORS)]
        ly = TOP + 10 + 20 * i
        out.append(f'<rect x="{lx}" y="{ly - 6}" width="14" height="4" fill="{color}"/>')
        out.append(f'<text x="{lx + 20}" y="{ly}">{escape(s.name)}</text>')
    out.append("</g>")
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def loss_curve_svg(history, path=None) -> str:
    """Training / validation / baseline loss curves from a training history."""
    epochs = [r.epoch for r in history.records]
    series = [
        Series("training", epochs, history.train_losses()),
        Series("validation", epochs, history.val_losses()),
        Series("baseline", epochs, [history.baseline] * len(epochs), dashed=True),
    ]
    return render_svg_curves(series, "Training loss", path, xlabel="epoch", ylabel="loss")


def effect_curve_svg(curve, path=None) -> str:
    label = {"pdp": "Partial dependence", "ale": "Accumulated local effects"}[curve.kind]
    s = Series(curve.kind.upper(), curve.grid, curve.values, curve.se)
    return render_svg_curves([s], f"{label}: {curve.feature}", path,
                             xlabel=curve.feature, ylabel="response")
