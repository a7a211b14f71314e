"""Minimal SVG plots: scatter, lines and histograms on linear axes.

Output is plain text with fixed number formatting, so the same data always
gives the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WIDTH = 640
HEIGHT = 420
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#000000")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + 0.5 * step, step)


@dataclass
class Plot:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    _items: list = field(default_factory=list)

    def scatter(self, x, y, color: int = 0, radius: float = 1.5, opacity: float = 0.5) -> Plot:
        self._items.append(("scatter", np.asarray(x, float), np.asarray(y, float),
                            color, radius, opacity))
        return self

    def line(self, x, y, color: int = 0, width: float = 1.5, opacity: float = 1.0) -> Plot:
        self._items.append(("line", np.asarray(x, float), np.asarray(y, float),
                            color, width, opacity))
        return self

    def histogram(self, edges, counts, color: int = 0) -> Plot:
        self._items.append(("hist", np.asarray(edges, float), np.asarray(counts, float),
                            color, 0, 0.7))
        return self

    def _limits(self):
        xs, ys = [], []
        for kind, x, y, *_ in self._items:
            if kind == "hist":
                xs += [x.min(), x.max()]
                ys += [0.0, y.max()]
            else:
                ok = np.isfinite(x) & np.isfinite(y)
                if ok.any():
                    xs += [x[ok].min(), x[ok].max()]
                    ys += [y[ok].min(), y[ok].max()]
        if not xs:
            return 0.0, 1.0, 0.0, 1.0
        x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        return x0, x1, y0, y1

    def render(self) -> str:
        left, right, top, bottom = MARGIN
        pw, ph = WIDTH - left - right, HEIGHT - top - bottom
        x0, x1, y0, y1 = self._limits()

        def sx(v):
            return left + (v - x0) / (x1 - x0) * pw

        def sy(v):
            return top + ph - (v - y0) / (y1 - y0) * ph

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
               f'font-family="sans-serif" font-size="11">',
               f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
               f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
        for t in _nice_ticks(x0, x1):
            if x0 <= t <= x1:
                out.append(f'<text x="{_fmt(sx(t))}" y="{top + ph + 15}" '
                           f'text-anchor="middle">{t:.4g}</text>')
        for t in _nice_ticks(y0, y1):
            if y0 <= t <= y1:
                out.append(f'<text x="{left - 5}" y="{_fmt(sy(t) + 4)}" '
                           f'text-anchor="end">{t:.4g}</text>')
        for kind, x, y, color, size, opacity in self._items:
            c = PALETTE[color % len(PALETTE)]
            if kind == "scatter":
                for a, b in zip(x, y):
                    if np.isfinite(a) and np.isfinite(b):
                        out.append(f'<circle cx="{_fmt(sx(a))}" cy="{_fmt(sy(b))}" r="{size}" '
                                   f'fill="{c}" fill-opacity="{opacity}"/>')
            elif kind == "line":
                ok = np.isfinite(x) & np.isfinite(y)
                pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x[ok], y[ok]))
                out.append(f'<polyline points="{pts}" fill="none" stroke="{c}" '
                           f'stroke-width="{size}" stroke-opacity="{opacity}"/>')
            else:
                for lo, hi, n in zip(x, x[1:], y):
                    out.append(f'<rect x="{_fmt(sx(lo))}" y="{_fmt(sy(n))}" '
                               f'width="{_fmt(sx(hi) - sx(lo))}" height="{_fmt(sy(0) - sy(n))}" '
                               f'fill="{c}" fill-opacity="{opacity}" stroke="white"/>')
        out.append(f'<text x="{WIDTH / 2}" y="{top - 10}" text-anchor="middle">{self.title}</text>')
        out.append(f'<text x="{left + pw / 2}" y="{HEIGHT - 10}" '
                   f'text-anchor="middle">{self.xlabel}</text>')
        out.append(f'<text x="15" y="{top + ph / 2}" text-anchor="middle" '
                   f'transform="rotate(-90 15 {top + ph / 2})">{self.ylabel}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.render())
