"""Minimal static SVG line charts (no plotting dependency)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def symlog(x, linthresh):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.where(np.abs(x) <= linthresh, np.abs(x) / linthresh,
                                 1.0 + np.log10(np.maximum(np.abs(x), linthresh) / linthresh))


def _ticks(lo, hi, n=5):
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt(v):
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.0e}"
    return f"{v:g}"


class LinePlot:
    def __init__(self, title="", xlabel="", ylabel="", yscale="linear", linthresh=1e-2,
                 width=640, height=400):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.yscale, self.linthresh = yscale, linthresh
        self.width, self.height = width, height
        self.series = []
        self.hlines = []

    def add(self, x, y, label="", dashed=False, color=None):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        keep = np.isfinite(x) & np.isfinite(y)
        if self.yscale == "log":
            keep &= y > 0
        self.series.append((x[keep], y[keep], label, dashed, color))
        return self

    def hline(self, y, label=""):
        self.hlines.append((float(y), label))
        return self

    def _ty(self, y):
        if self.yscale == "log":
            return np.log10(y)
        if self.yscale == "symlog":
            return symlog(y, self.linthresh)
        return np.asarray(y, dtype=np.float64)

    def _inv(self, v):
        if self.yscale == "log":
            return 10 ** v
        if self.yscale == "symlog":
            a = abs(v)
            return math.copysign(a * self.linthresh if a <= 1 else self.linthresh * 10 ** (a - 1), v)
        return v

    def render(self) -> str:
        W, H = self.width, self.height
        L, R, T, B = 70, 150, 36, 50
        pw, ph = W - L - R, H - T - B
        xs = [s[0] for s in self.series if s[0].size]
        ys = [self._ty(s[1]) for s in self.series if s[1].size] + [self._ty(np.array([h[0]])) for h in self.hlines]
        x_lo, x_hi = (min(a.min() for a in xs), max(a.max() for a in xs)) if xs else (0.0, 1.0)
        y_lo, y_hi = (min(a.min() for a in ys), max(a.max() for a in ys)) if ys else (0.0, 1.0)
        if x_hi == x_lo:
            x_hi = x_lo + 1.0
        if y_hi == y_lo:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad

        def px(x):
            return L + (x - x_lo) / (x_hi - x_lo) * pw

        def py(v):
            return T + ph - (v - y_lo) / (y_hi - y_lo) * ph

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
               f'<rect width="{W}" height="{H}" fill="white"/>',
               f'<text x="{L + pw / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(self.title)}</text>',
               f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
        for xv in _ticks(x_lo, x_hi):
            out.append(f'<line x1="{px(xv):.1f}" y1="{T + ph}" x2="{px(xv):.1f}" y2="{T + ph + 4}" stroke="#333"/>')
            out.append(f'<text x="{px(xv):.1f}" y="{T + ph + 16}" text-anchor="middle">{_fmt(xv)}</text>')
        if self.yscale == "linear":
            yt = _ticks(y_lo, y_hi)
        else:
            yt = [float(v) for v in range(math.ceil(y_lo), math.floor(y_hi) + 1)] or [y_lo]
        for v in yt:
            out.append(f'<line x1="{L - 4}" y1="{py(v):.1f}" x2="{L + pw}" y2="{py(v):.1f}" stroke="#ddd"/>')
            out.append(f'<text x="{L - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{_fmt(self._inv(v))}</text>')
        out.append(f'<text x="{L + pw / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text transform="translate(16,{T + ph / 2:.1f}) rotate(-90)" text-anchor="middle">{escape(self.ylabel)}</text>')
        for yv, label in self.hlines:
            yy = py(float(self._ty(np.array([yv]))[0]))
            out.append(f'<line x1="{L}" y1="{yy:.1f}" x2="{L + pw}" y2="{yy:.1f}" stroke="#888" stroke-dasharray="2,3"/>')
            if label:
                out.append(f'<text x="{L + pw - 4}" y="{yy - 4:.1f}" text-anchor="end" fill="#666">{escape(label)}</text>')
        for i, (x, y, label, dashed, color) in enumerate(self.series):
            c = color or PALETTE[i % len(PALETTE)]
            if x.size:
                pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, self._ty(y)))
                dash = ' stroke-dasharray="6,4"' if dashed else ""
                out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.8"{dash} points="{pts}"/>')
            ly = T + 12 + 16 * i
            out.append(f'<line x1="{L + pw + 10}" y1="{ly}" x2="{L + pw + 30}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
            out.append(f'<text x="{L + pw + 34}" y="{ly + 4}">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.render())
