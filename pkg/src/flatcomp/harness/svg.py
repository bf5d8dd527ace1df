"""Tiny dependency-free SVG writers: line charts with bands and heatmaps."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
W, H, PAD = 560, 380, 56


def _scale(lo: float, hi: float, a: float, b: float):
    if hi == lo:
        hi = lo + 1.0
    return lambda x: a + (x - lo) * (b - a) / (hi - lo)


def _doc(body: list[str], title: str, w: int = W, h: int = H) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">'
            f'<title>{escape(title)}</title>'
            f'<rect width="{w}" height="{h}" fill="white"/>'
            f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-size="14" font-family="sans-serif">'
            f'{escape(title)}</text>')
    return head + "".join(body) + "</svg>\n"


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float], Sequence[float]]],
               title: str, xlabel: str, ylabel: str) -> str:
    """``series[name] = (x, mean, std)``; one polyline per series plus a shaded +-std band."""
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()]) if series else np.zeros(1)
    lo_y = [np.asarray(m) - np.asarray(s) for _, m, s in series.values()]
    hi_y = [np.asarray(m) + np.asarray(s) for _, m, s in series.values()]
    ymin = float(min(a.min() for a in lo_y)) if series else 0.0
    ymax = float(max(a.max() for a in hi_y)) if series else 1.0
    sx = _scale(float(xs.min()), float(xs.max()), PAD, W - PAD)
    sy = _scale(ymin, ymax, H - PAD, PAD)
    body = [f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
            f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
            f'<text x="{W / 2:.1f}" y="{H - 14}" text-anchor="middle" font-size="12" font-family="sans-serif">'
            f'{escape(xlabel)}</text>',
            f'<text x="16" y="{H / 2:.1f}" transform="rotate(-90 16 {H / 2:.1f})" text-anchor="middle" '
            f'font-size="12" font-family="sans-serif">{escape(ylabel)}</text>']
    for v in np.linspace(ymin, ymax, 5):
        body.append(f'<text x="{PAD - 4}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="10" '
                    f'font-family="sans-serif">{v:.3g}</text>')
    for v in sorted(set(float(x) for x in xs)):
        body.append(f'<text x="{sx(v):.1f}" y="{H - PAD + 14}" text-anchor="middle" font-size="10" '
                    f'font-family="sans-serif">{v:.3g}</text>')
    for i, (name, (x, m, s)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        x, m, s = (np.asarray(a, float) for a in (x, m, s))
        band = [f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, m + s)] + \
               [f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[::-1], (m - s)[::-1])]
        body.append(f'<polygon class="band" points="{" ".join(band)}" fill="{color}" fill-opacity="0.18" '
                    f'stroke="none"/>')
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, m))
        body.append(f'<polyline class="series" data-name="{escape(name)}" points="{pts}" fill="none" '
                    f'stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{W - PAD + 4}" y="{PAD + 14 * i:.1f}" font-size="11" fill="{color}" '
                    f'font-family="sans-serif">{escape(name)}</text>')
    return _doc(body, title)


def _color(t: float) -> str:
    # white -> dark blue ramp, t in [0, 1]
    t = min(1.0, max(0.0, t))
    r = int(round(255 - t * (255 - 8)))
    g = int(round(255 - t * (255 - 48)))
    b = int(round(255 - t * (255 - 107)))
    return f"#{r:02x}{g:02x}{b:02x}"


def _diverging(t: float) -> str:
    # t in [-1, 1]: red for negative, blue for positive
    t = min(1.0, max(-1.0, t))
    if t >= 0:
        return _color(t)
    s = -t
    return f"#{255:02x}{int(round(255 - s * 200)):02x}{int(round(255 - s * 200)):02x}"


def heatmap(values: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str], title: str,
            diverging: bool = False, annotate: bool = True, marks: Sequence[tuple[float, float, str]] = ()) -> str:
    """Cell grid; ``marks`` are (row_pos, col_pos, label) points in fractional cell units."""
    values = np.asarray(values, float)
    nr, nc = values.shape
    cell = max(6.0, min(60.0, 420.0 / max(nr, nc)))
    left, top = 90.0, 40.0
    w, h = int(left + nc * cell + 30), int(top + nr * cell + 60)
    finite = values[np.isfinite(values)]
    if diverging:
        span = float(np.abs(finite).max()) if finite.size else 1.0
        span = span or 1.0
        color = lambda v: _diverging(v / span)  # noqa: E731
    else:
        lo = float(finite.min()) if finite.size else 0.0
        hi = float(finite.max()) if finite.size else 1.0
        color = lambda v: _color((v - lo) / (hi - lo) if hi > lo else 0.5)  # noqa: E731
    body = []
    for i in range(nr):
        for j in range(nc):
            v = values[i, j]
            fill = color(v) if np.isfinite(v) else "#cccccc"
            x, y = left + j * cell, top + i * cell
            body.append(f'<rect class="cell" x="{x:.2f}" y="{y:.2f}" width="{cell:.2f}" height="{cell:.2f}" '
                        f'fill="{fill}"/>')
            if annotate and cell >= 28:
                body.append(f'<text x="{x + cell / 2:.2f}" y="{y + cell / 2 + 4:.2f}" text-anchor="middle" '
                            f'font-size="10" font-family="sans-serif">{v:.3g}</text>')
    step_r = max(1, nr // 12)
    step_c = max(1, nc // 12)
    for i in range(0, nr, step_r):
        body.append(f'<text x="{left - 4}" y="{top + (i + 0.5) * cell + 4:.2f}" text-anchor="end" font-size="10" '
                    f'font-family="sans-serif">{escape(str(row_labels[i]))}</text>')
    for j in range(0, nc, step_c):
        body.append(f'<text x="{left + (j + 0.5) * cell:.2f}" y="{top + nr * cell + 14:.2f}" '
                    f'text-anchor="middle" font-size="10" font-family="sans-serif">'
                    f'{escape(str(col_labels[j]))}</text>')
    for r, c, label in marks:
        x, y = left + (c + 0.5) * cell, top + (r + 0.5) * cell
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="black"/>'
                    f'<text x="{x + 6:.2f}" y="{y - 6:.2f}" font-size="11" font-family="sans-serif">'
                    f'{escape(label)}</text>')
    return _doc(body, title, w, h)
