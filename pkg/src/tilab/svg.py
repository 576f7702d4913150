"""Tiny dependency-free SVG writers for heatmaps, line plots and scatters."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 480, 360, 50


def _doc(body: list[str], title: str) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">'
    return "\n".join([head, f'<text x="{W / 2}" y="18" text-anchor="middle">{escape(title)}</text>', *body,
                      "</svg>"]) + "\n"


def _color(v: float) -> str:
    """White (0) to dark blue (1); values are clipped."""
    v = float(np.clip(v, 0.0, 1.0))
    r = g = int(round(255 * (1 - v)))
    return f"rgb({r},{g},{int(round(255 - 100 * v))})"


def _diverging(v: float, vmax: float) -> str:
    t = 0.0 if vmax == 0 else float(np.clip(v / vmax, -1, 1))
    if t >= 0:
        return f"rgb(255,{int(255 * (1 - t))},{int(255 * (1 - t))})"
    return f"rgb({int(255 * (1 + t))},{int(255 * (1 + t))},255)"


def _scale(values, lo_px, hi_px):
    v = np.asarray(values, dtype=float)
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi == lo:
        lo, hi = lo - 1, hi + 1
    return lambda x: lo_px + (float(x) - lo) / (hi - lo) * (hi_px - lo_px), lo, hi


def heatmap(matrix, row_labels, col_labels, title: str = "") -> str:
    """Cells coloured by value in [0, 1]; NaN cells left blank."""
    m = np.asarray(matrix, dtype=float)
    nr, nc = m.shape
    cw, ch = (W - 2 * PAD) / nc, (H - 2 * PAD) / nr
    body = []
    for i in range(nr):
        body.append(f'<text x="{PAD - 4}" y="{PAD + (i + 0.6) * ch:.1f}" text-anchor="end">{escape(str(row_labels[i]))}</text>')
        for j in range(nc):
            if np.isnan(m[i, j]):
                continue
            body.append(f'<rect x="{PAD + j * cw:.1f}" y="{PAD + i * ch:.1f}" width="{cw:.1f}" height="{ch:.1f}" '
                        f'fill="{_color(m[i, j])}"><title>{m[i, j]:.3f}</title></rect>')
    for j in range(nc):
        body.append(f'<text x="{PAD + (j + 0.5) * cw:.1f}" y="{PAD - 4}" text-anchor="middle">{escape(str(col_labels[j]))}</text>')
    return _doc(body, title)


def lines(x, series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """One polyline per named series over a shared x axis."""
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]
    allv = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    sx, x0, x1 = _scale(x, PAD, W - PAD)
    sy, y0, y1 = _scale(allv, H - PAD, PAD)
    body = [_axes(x0, x1, y0, y1, xlabel, ylabel)]
    for k, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, ys))
        col = palette[k % len(palette)]
        body.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{W - PAD + 4}" y="{PAD + 14 * k}" fill="{col}">{escape(str(name))}</text>')
    return _doc(body, title)


def scatter(x, y, colors=None, labels=None, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """Points optionally coloured by a signed value (red positive, blue negative)."""
    sx, x0, x1 = _scale(x, PAD, W - PAD)
    sy, y0, y1 = _scale(y, H - PAD, PAD)
    vmax = 0.0 if colors is None else float(np.max(np.abs(colors)))
    body = [_axes(x0, x1, y0, y1, xlabel, ylabel)]
    for k, (a, b) in enumerate(zip(x, y)):
        fill = "black" if colors is None else _diverging(colors[k], vmax)
        tip = "" if labels is None else f"<title>{escape(str(labels[k]))}</title>"
        body.append(f'<circle cx="{sx(a):.1f}" cy="{sy(b):.1f}" r="4" fill="{fill}" stroke="black" stroke-width="0.5">{tip}</circle>')
    return _doc(body, title)


def _axes(x0, x1, y0, y1, xlabel, ylabel) -> str:
    return "\n".join([
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{PAD}" y="{H - PAD + 14}">{x0:.3g}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 14}" text-anchor="end">{x1:.3g}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end">{y1:.3g}</text>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" transform="rotate(-90 14 {H / 2})" text-anchor="middle">{escape(ylabel)}</text>',
    ])
