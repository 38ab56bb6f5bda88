"""Static SVG line plots without a plotting dependency.

Reports only need a handful of curve styles (metric-vs-time, loss decay,
histograms with density overlays), so the renderer is a small hand-rolled
SVG writer: axes box, nice ticks, polylines, optional step outlines, legend.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_W, _H = 640, 440
_ML, _MR, _MT, _MB = 72, 18, 40, 54


def _nice_ticks(lo: float, hi: float, target: int = 5):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("cannot place ticks on a non-finite range")
    if hi <= lo:
        pad = max(abs(lo), 1.0) * 0.05
        lo, hi = lo - pad, hi + pad
    raw = (hi - lo) / max(target - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1.0, 2.0, 2.5, 5.0, 10.0) if raw <= m * mag + 1e-12 * mag)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < step * 1e-6 else t)
        t += step
    return lo, hi, ticks


def _fmt(v: float) -> str:
    return "%.6g" % v


def line_plot(path, series, *, title: str = "", xlabel: str = "", ylabel: str = "",
              ylog: bool = False):
    """Write an SVG with one curve per series entry.

    Each entry is a dict with ``label``, ``x``, ``y`` and optionally
    ``style`` ("line", or "step" where x holds len(y)+1 bin edges) and
    ``color``.  With ``ylog`` the y axis is log10-scaled; nonpositive
    values are dropped from scaling and drawing.
    """
    series = [dict(s) for s in series]
    if not series:
        raise ValueError("line_plot needs at least one series")
    xs_all, ys_all = [], []
    for s in series:
        s["x"] = np.asarray(s["x"], dtype=float)
        s["y"] = np.asarray(s["y"], dtype=float)
        y = s["y"][s["y"] > 0.0] if ylog else s["y"]
        if y.size:
            ys_all.append(y)
        xs_all.append(s["x"])
    if not ys_all:
        raise ValueError("no drawable values (all nonpositive under ylog)")
    xcat = np.concatenate(xs_all)
    ycat = np.concatenate(ys_all)
    if ylog:
        ycat = np.log10(ycat)
    x_lo, x_hi, x_ticks = _nice_ticks(float(xcat.min()), float(xcat.max()))
    y_lo, y_hi, y_ticks = _nice_ticks(float(ycat.min()), float(ycat.max()))

    def px(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def py(y):
        if ylog:
            y = math.log10(y) if y > 0 else y_lo
        return _H - _MB - (y - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = []
    parts.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
                 f'height="{_H}" viewBox="0 0 {_W} {_H}">')
    parts.append(f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>')
    for t in y_ticks:
        yy = _H - _MB - (t - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)
        parts.append(f'<line x1="{_ML}" y1="{yy:.2f}" x2="{_W - _MR}" '
                     f'y2="{yy:.2f}" stroke="#dddddd" stroke-width="1"/>')
        label = _fmt(10.0 ** t) if ylog else _fmt(t)
        parts.append(f'<text x="{_ML - 8}" y="{yy + 4:.2f}" font-family="sans-serif" '
                     f'font-size="12" text-anchor="end">{escape(label)}</text>')
    for t in x_ticks:
        xx = px(t)
        parts.append(f'<line x1="{xx:.2f}" y1="{_H - _MB}" x2="{xx:.2f}" '
                     f'y2="{_H - _MB + 5}" stroke="#333333" stroke-width="1"/>')
        parts.append(f'<text x="{xx:.2f}" y="{_H - _MB + 20}" font-family="sans-serif" '
                     f'font-size="12" text-anchor="middle">{escape(_fmt(t))}</text>')
    parts.append(f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
                 f'height="{_H - _MT - _MB}" fill="none" stroke="#333333"/>')

    for i, s in enumerate(series):
        color = s.get("color", PALETTE[i % len(PALETTE)])
        x, y = s["x"], s["y"]
        pts = []
        if s.get("style", "line") == "step":
            if x.size != y.size + 1:
                raise ValueError("step series needs len(x) == len(y) + 1")
            for j in range(y.size):
                if ylog and y[j] <= 0:
                    continue
                pts.append(f"{px(x[j]):.2f},{py(y[j]):.2f}")
                pts.append(f"{px(x[j + 1]):.2f},{py(y[j]):.2f}")
        else:
            for j in range(x.size):
                if ylog and y[j] <= 0:
                    continue
                pts.append(f"{px(x[j]):.2f},{py(y[j]):.2f}")
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                     f'stroke="{color}" stroke-width="1.6"/>')

    ly = _MT + 14
    for i, s in enumerate(series):
        color = s.get("color", PALETTE[i % len(PALETTE)])
        label = escape(str(s["label"]))
        parts.append(f'<line x1="{_W - _MR - 150}" y1="{ly - 4}" '
                     f'x2="{_W - _MR - 126}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{_W - _MR - 120}" y="{ly}" font-family="sans-serif" '
                     f'font-size="12">{label}</text>')
        ly += 16

    if title:
        parts.append(f'<text x="{_W / 2:.0f}" y="22" font-family="sans-serif" '
                     f'font-size="14" text-anchor="middle" font-weight="bold">'
                     f'{escape(title)}</text>')
    if xlabel:
        parts.append(f'<text x="{(_ML + _W - _MR) / 2:.0f}" y="{_H - 14}" '
                     f'font-family="sans-serif" font-size="13" text-anchor="middle">'
                     f'{escape(xlabel)}</text>')
    if ylabel:
        cx, cy = 18, (_MT + _H - _MB) / 2
        parts.append(f'<text x="{cx}" y="{cy:.0f}" font-family="sans-serif" '
                     f'font-size="13" text-anchor="middle" '
                     f'transform="rotate(-90 {cx} {cy:.0f})">{escape(ylabel)}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
