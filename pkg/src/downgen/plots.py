"""Minimal static SVG emission: heatmaps and line plots, no dependencies."""

from __future__ import annotations

import numpy as np


def _ramp(v):
    """Blue-white-red ramp for v in [0, 1]."""
    v = min(max(float(v), 0.0), 1.0)
    if v < 0.5:
        t = v / 0.5
        r, g, b = int(40 + t * 215), int(70 + t * 185), 255
    else:
        t = (v - 0.5) / 0.5
        r, g, b = 255, int(255 - t * 185), int(255 - t * 215)
    return f"rgb({r},{g},{b})"


def heatmap_svg(field, path, title="", cell=12):
    """field: [NX, NY] written with x along the horizontal axis."""
    field = np.asarray(field, dtype=np.float64)
    nx, ny = field.shape
    lo, hi = float(field.min()), float(field.max())
    span = hi - lo if hi > lo else 1.0
    width, height = nx * cell, ny * cell + 18
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="2" y="12" font-size="11" font-family="monospace">'
             f'{title} [{lo:.4g}, {hi:.4g}]</text>']
    for i in range(nx):
        for j in range(ny):
            color = _ramp((field[i, j] - lo) / span)
            y = height - (j + 1) * cell
            parts.append(f'<rect x="{i * cell}" y="{y}" width="{cell}" '
                         f'height="{cell}" fill="{color}"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")


_SERIES_COLORS = ("#1f4e9c", "#c23b22", "#1a8a5a", "#8a5aa8", "#c2881e", "#444444")


def curves_svg(x, series, path, title="", width=480, height=280):
    """series: mapping name -> y array over the shared x axis."""
    x = np.asarray(x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    all_y = np.concatenate(list(ys.values()))
    ylo, yhi = float(all_y.min()), float(all_y.max())
    yspan = yhi - ylo if yhi > ylo else 1.0
    xlo, xhi = float(x.min()), float(x.max())
    xspan = xhi - xlo if xhi > xlo else 1.0
    pad, legend = 20, 14

    def px(vx):
        return pad + (vx - xlo) / xspan * (width - 2 * pad)

    def py(vy):
        return height - pad - (vy - ylo) / yspan * (height - 2 * pad - legend * len(ys))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="4" y="12" font-size="11" font-family="monospace">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" '
             f'height="{height - 2 * pad - legend * len(ys)}" fill="none" stroke="#999"/>']
    for idx, (name, y) in enumerate(ys.items()):
        color = _SERIES_COLORS[idx % len(_SERIES_COLORS)]
        pts = " ".join(f"{px(vx):.2f},{py(vy):.2f}" for vx, vy in zip(x, y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ty = 24 + legend * idx
        parts.append(f'<text x="{width - 150}" y="{ty}" font-size="10" '
                     f'font-family="monospace" fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
