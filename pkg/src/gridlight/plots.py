"""Self-contained SVG line charts (no plotting dependency)."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 62, 18, 34, 46


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min(s for s in (1 * mag, 2 * mag, 5 * mag, 10 * mag) if s >= raw)
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-12 * max(1.0, abs(hi)):
        out.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return out


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def svg_line_chart(
    path,
    x,
    lines: list[tuple[str, np.ndarray]],
    band: tuple[np.ndarray, np.ndarray] | None = None,
    vlines: tuple[float, ...] = (),
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    width: int = 720,
    height: int = 440,
) -> str:
    """Write a line chart; `band` draws a shaded min/max region behind the
    lines, `vlines` dashed vertical markers. Returns the path written."""
    if not lines:
        raise ValueError("svg_line_chart needs at least one line")
    x = np.asarray(x, dtype=np.float64)
    ys = [np.asarray(y, dtype=np.float64) for _, y in lines]
    for (label, _), y in zip(lines, ys):
        if y.shape != x.shape:
            raise ValueError(f"line {label!r} has {y.shape[0] if y.ndim else 0} points, x has {x.shape[0]}")
    all_y = np.concatenate(ys + ([band[0], band[1]] if band is not None else []))
    x_lo, x_hi = float(x.min()), float(x.max())
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    plot_w = width - _MARGIN_L - _MARGIN_R
    plot_h = height - _MARGIN_T - _MARGIN_B

    def sx(v: float) -> float:
        return _MARGIN_L + (v - x_lo) / (x_hi - x_lo) * plot_w

    def sy(v: float) -> float:
        return _MARGIN_T + (y_hi - v) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if band is not None:
        lo, hi = np.asarray(band[0], float), np.asarray(band[1], float)
        pts = " ".join(f"{sx(xv):.2f},{sy(yv):.2f}" for xv, yv in zip(x, hi))
        pts += " " + " ".join(f"{sx(xv):.2f},{sy(yv):.2f}" for xv, yv in zip(x[::-1], lo[::-1]))
        parts.append(f'<polygon points="{pts}" fill="#1f77b4" fill-opacity="0.15" stroke="none"/>')
    for vx in vlines:
        parts.append(
            f'<line x1="{sx(vx):.2f}" y1="{_MARGIN_T}" x2="{sx(vx):.2f}" '
            f'y2="{height - _MARGIN_B}" stroke="#555" stroke-dasharray="6,4"/>'
        )
    # axes
    parts.append(
        f'<line x1="{_MARGIN_L}" y1="{height - _MARGIN_B}" x2="{width - _MARGIN_R}" '
        f'y2="{height - _MARGIN_B}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
        f'y2="{height - _MARGIN_B}" stroke="black"/>'
    )
    for t in _ticks(x_lo, x_hi):
        parts.append(
            f'<line x1="{sx(t):.2f}" y1="{height - _MARGIN_B}" x2="{sx(t):.2f}" '
            f'y2="{height - _MARGIN_B + 5}" stroke="black"/>'
            f'<text x="{sx(t):.2f}" y="{height - _MARGIN_B + 18}" text-anchor="middle">{_fmt(t)}</text>'
        )
    for t in _ticks(y_lo, y_hi):
        parts.append(
            f'<line x1="{_MARGIN_L - 5}" y1="{sy(t):.2f}" x2="{_MARGIN_L}" y2="{sy(t):.2f}" stroke="black"/>'
            f'<text x="{_MARGIN_L - 8}" y="{sy(t):.2f}" text-anchor="end" dominant-baseline="middle">{_fmt(t)}</text>'
        )
    for i, ((label, _), y) in enumerate(zip(lines, ys)):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(xv):.2f},{sy(yv):.2f}" for xv, yv in zip(x, y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        lx = width - _MARGIN_R - 150
        ly = _MARGIN_T + 16 * i + 4
        parts.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
            f'<text x="{lx + 28}" y="{ly + 4}">{escape(label)}</text>'
        )
    if title:
        parts.append(
            f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>'
        )
    if xlabel:
        parts.append(
            f'<text x="{(_MARGIN_L + width - _MARGIN_R) / 2:.0f}" y="{height - 10}" '
            f'text-anchor="middle">{escape(xlabel)}</text>'
        )
    if ylabel:
        parts.append(
            f'<text x="16" y="{(_MARGIN_T + height - _MARGIN_B) / 2:.0f}" text-anchor="middle" '
            f'transform="rotate(-90 16 {(_MARGIN_T + height - _MARGIN_B) / 2:.0f})">{escape(ylabel)}</text>'
        )
    parts.append("</svg>")
    out = Path(path)
    out.write_text("\n".join(parts) + "\n")
    return str(out)
