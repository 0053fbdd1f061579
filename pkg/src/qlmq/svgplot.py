"""Minimal self-contained SVG rendering for diagnostics artifacts.

No plotting dependency: heatmaps are grids of colored rects, histograms and
bar charts are path/rect runs. Output is a complete standalone SVG document
viewable in any browser.
"""

from __future__ import annotations

from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ContractError

_FONT = 'font-family="Helvetica,Arial,sans-serif"'


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _diverging_color(t: float) -> str:
    """Blue (-1) through white (0) to red (+1)."""
    t = float(min(1.0, max(-1.0, t)))
    lo, mid, hi = (59, 76, 192), (255, 255, 255), (180, 4, 38)
    a, b = (mid, hi) if t >= 0 else (mid, lo)
    u = abs(t)
    rgb = tuple(round(a[i] + u * (b[i] - a[i])) for i in range(3))
    return f"rgb({rgb[0]},{rgb[1]},{rgb[2]})"


def _pool(values: np.ndarray, max_cells: int) -> tuple[np.ndarray, int]:
    """Block-average a large matrix so the rect grid stays tractable."""
    n, m = values.shape
    f = max(1, -(-max(n, m) // max_cells))
    if f == 1:
        return values, 1
    pn, pm = -(-n // f), -(-m // f)
    padded = np.full((pn * f, pm * f), np.nan)
    padded[:n, :m] = values
    finite = np.isfinite(padded)
    sums = np.where(finite, padded, 0.0).reshape(pn, f, pm, f).sum(axis=(1, 3))
    counts = finite.reshape(pn, f, pm, f).sum(axis=(1, 3))
    with np.errstate(invalid="ignore"):
        pooled = sums / counts  # blocks with no finite cells become NaN
    return pooled, f


def _document(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">')
    bg = f'<rect width="{width}" height="{height}" fill="white"/>'
    return "\n".join([head, bg, *body, "</svg>"]) + "\n"


def heatmap_svg(values: np.ndarray, title: str = "", vmin: float = -1.0,
                vmax: float = 1.0, max_cells: int = 160) -> str:
    """Square-cell heatmap with a diverging colormap and a small colorbar.

    Matrices larger than ``max_cells`` per side are block-averaged first;
    the title notes the pooling factor.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ContractError(f"heatmap needs a nonempty 2-D matrix, got shape {values.shape}")
    if not vmin < vmax:
        raise ContractError(f"heatmap range requires vmin < vmax, got [{vmin}, {vmax}]")
    pooled, factor = _pool(values, max_cells)
    if factor > 1:
        title = f"{title} (block mean x{factor})" if title else f"block mean x{factor}"
    n, m = pooled.shape
    cell = max(2, min(24, 560 // max(n, m)))
    margin, top = 46, 34
    grid_w, grid_h = m * cell, n * cell
    width = margin + grid_w + 70
    height = top + grid_h + 34
    body = []
    if title:
        body.append(f'<text x="{margin}" y="20" {_FONT} font-size="13">{escape(title)}</text>')
    half = 0.5 * (vmax - vmin)
    center = vmin + half
    rows = []
    for i in range(n):
        for j in range(m):
            v = pooled[i, j]
            color = "rgb(238,238,238)" if not np.isfinite(v) \
                else _diverging_color((v - center) / half)
            rows.append(f'<rect x="{margin + j * cell}" y="{top + i * cell}" '
                        f'width="{cell}" height="{cell}" fill="{color}"/>')
    body.append(f'<g shape-rendering="crispEdges">{"".join(rows)}</g>')
    body.append(f'<rect x="{margin}" y="{top}" width="{grid_w}" height="{grid_h}" '
                f'fill="none" stroke="black" stroke-width="0.5"/>')
    # colorbar: a short vertical strip sampling the map
    cb_x, cb_h = margin + grid_w + 16, min(grid_h, 120)
    steps = 24
    for s in range(steps):
        t = 1.0 - 2.0 * s / (steps - 1)
        body.append(f'<rect x="{cb_x}" y="{top + s * cb_h / steps:.2f}" width="12" '
                    f'height="{cb_h / steps + 0.5:.2f}" fill="{_diverging_color(t)}"/>')
    for frac, val in ((0.0, vmax), (1.0, vmin)):
        body.append(f'<text x="{cb_x + 16}" y="{top + frac * cb_h + 4:.2f}" {_FONT} '
                    f'font-size="10">{_fmt(val)}</text>')
    body.append(f'<text x="{margin}" y="{top + grid_h + 16}" {_FONT} font-size="10">'
                f'{n} x {m} cells</text>')
    return _document(width, height, body)


def histogram_svg(counts: Sequence[float], edges: Sequence[float], title: str = "",
                  clip_values: Optional[Sequence[float]] = None,
                  width: int = 640, height: int = 360) -> str:
    """Bars as one path; optional dashed clip-boundary markers."""
    counts = np.asarray(counts, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if counts.ndim != 1 or edges.shape != (counts.size + 1,):
        raise ContractError("histogram needs counts [n] and edges [n+1]")
    if counts.size == 0:
        raise ContractError("histogram needs at least one bin")
    margin, top, bottom = 52, 34, 30
    plot_w, plot_h = width - margin - 16, height - top - bottom
    lo, hi = float(edges[0]), float(edges[-1])
    span = (hi - lo) or 1.0
    peak = float(counts.max()) or 1.0

    def x_at(v):
        return margin + (v - lo) / span * plot_w

    def y_at(c):
        return top + plot_h * (1.0 - c / peak)

    parts = []
    for i, c in enumerate(counts):
        x0, x1 = x_at(edges[i]), x_at(edges[i + 1])
        y = y_at(float(c))
        parts.append(f"M{x0:.2f},{top + plot_h:.2f}V{y:.2f}H{x1:.2f}V{top + plot_h:.2f}Z")
    body = []
    if title:
        body.append(f'<text x="{margin}" y="20" {_FONT} font-size="13">{escape(title)}</text>')
    body.append(f'<path d="{" ".join(parts)}" fill="rgb(93,120,190)" '
                f'stroke="white" stroke-width="0.4"/>')
    body.append(f'<line x1="{margin}" y1="{top + plot_h}" x2="{margin + plot_w}" '
                f'y2="{top + plot_h}" stroke="black" stroke-width="1"/>')
    body.append(f'<line x1="{margin}" y1="{top}" x2="{margin}" y2="{top + plot_h}" '
                f'stroke="black" stroke-width="1"/>')
    for v, anchor in ((lo, "start"), (hi, "end")):
        body.append(f'<text x="{x_at(v):.2f}" y="{height - 8}" {_FONT} font-size="10" '
                    f'text-anchor="{anchor}">{_fmt(v)}</text>')
    body.append(f'<text x="{margin - 6}" y="{top + 4}" {_FONT} font-size="10" '
                f'text-anchor="end">{_fmt(peak)}</text>')
    body.append(f'<text x="{margin - 6}" y="{top + plot_h + 4}" {_FONT} font-size="10" '
                f'text-anchor="end">0</text>')
    for v in (clip_values if clip_values is not None else []):
        if lo <= v <= hi:
            x = x_at(float(v))
            body.append(f'<line x1="{x:.2f}" y1="{top}" x2="{x:.2f}" y2="{top + plot_h}" '
                        f'stroke="rgb(200,30,30)" stroke-width="1.2" '
                        f'stroke-dasharray="5,3" class="clip-marker"/>')
            body.append(f'<text x="{x:.2f}" y="{top - 4}" {_FONT} font-size="9" '
                        f'text-anchor="middle" fill="rgb(200,30,30)">{_fmt(float(v))}</text>')
    return _document(width, height, body)


def barchart_svg(labels: Sequence[str], values: Sequence[float], title: str = "",
                 width: int = 640, height: int = 360) -> str:
    """Labeled vertical bars; labels thin out when there are many bars."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0 or len(labels) != values.size:
        raise ContractError("bar chart needs equally many labels and values")
    margin, top, bottom = 52, 34, 64
    plot_w, plot_h = width - margin - 16, height - top - bottom
    peak = float(values.max()) if values.max() > 0 else 1.0
    n = values.size
    slot = plot_w / n
    bar_w = max(1.0, slot * 0.8)
    body = []
    if title:
        body.append(f'<text x="{margin}" y="20" {_FONT} font-size="13">{escape(title)}</text>')
    stride = max(1, -(-n // 16))
    for i, v in enumerate(values):
        x = margin + i * slot + (slot - bar_w) / 2
        h = plot_h * max(0.0, float(v)) / peak
        body.append(f'<rect x="{x:.2f}" y="{top + plot_h - h:.2f}" width="{bar_w:.2f}" '
                    f'height="{h:.2f}" fill="rgb(93,120,190)"/>')
        if i % stride == 0:
            cx = margin + (i + 0.5) * slot
            body.append(f'<text x="{cx:.2f}" y="{top + plot_h + 12}" {_FONT} font-size="9" '
                        f'text-anchor="end" transform="rotate(-45 {cx:.2f} '
                        f'{top + plot_h + 12})">{escape(str(labels[i]))}</text>')
    body.append(f'<line x1="{margin}" y1="{top + plot_h}" x2="{margin + plot_w}" '
                f'y2="{top + plot_h}" stroke="black" stroke-width="1"/>')
    body.append(f'<text x="{margin - 6}" y="{top + 4}" {_FONT} font-size="10" '
                f'text-anchor="end">{_fmt(peak)}</text>')
    return _document(width, height, body)
