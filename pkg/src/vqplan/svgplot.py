"""Minimal static SVG charts: grouped bars, line traces and 1-D Gaussian KDEs."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 60


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    sd = x.std(ddof=1) if n > 1 else 0.0
    iqr = np.subtract(*np.percentile(x, [75, 25])) / 1.34 if n > 1 else 0.0
    spread = min(sd, iqr) if min(sd, iqr) > 0 else max(sd, iqr)
    if spread <= 0:
        spread = 1.0
    return 0.9 * spread * n ** (-0.2)


def gaussian_kde(x: np.ndarray, grid: np.ndarray, bandwidth: float | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = silverman_bandwidth(x) if bandwidth is None else bandwidth
    z = (np.asarray(grid)[:, None] - x[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * np.sqrt(2.0 * np.pi))


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xlim, ylim):
        self.parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
                      f'<rect width="{W}" height="{H}" fill="white"/>',
                      f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
                      f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
                      f'<text x="16" y="{H / 2}" text-anchor="middle" font-size="12" '
                      f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>']
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        self.parts.append(f'<rect x="{LEFT}" y="{TOP}" width="{W - LEFT - RIGHT}" height="{H - TOP - BOTTOM}" '
                          'fill="none" stroke="black"/>')
        for t in np.linspace(self.y0, self.y1, 5):
            y = self.py(t)
            self.parts.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{t:.3g}</text>')
            self.parts.append(f'<line x1="{LEFT}" x2="{W - RIGHT}" y1="{y:.1f}" y2="{y:.1f}" stroke="#ddd"/>')

    def px(self, v):
        return LEFT + (v - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)

    def py(self, v):
        return H - BOTTOM - (v - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)

    def legend(self, names):
        for i, name in enumerate(names):
            y = TOP + 14 + 16 * i
            self.parts.append(f'<rect x="{W - RIGHT - 150}" y="{y - 9}" width="10" height="10" fill="{PALETTE[i % len(PALETTE)]}"/>')
            self.parts.append(f'<text x="{W - RIGHT - 135}" y="{y}" font-size="11">{escape(str(name))}</text>')

    def xticks(self, values, labels=None):
        labels = labels if labels is not None else [f"{v:.3g}" for v in values]
        for v, lab in zip(values, labels):
            self.parts.append(f'<text x="{self.px(v):.1f}" y="{H - BOTTOM + 16}" text-anchor="middle" '
                              f'font-size="10">{escape(str(lab))}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def bar_chart(path, categories, series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    """Grouped bars; ``series`` maps a legend name to one value per category."""
    names = list(series)
    vals = np.array([series[n] for n in names], dtype=np.float64).reshape(len(names), len(categories))
    top = float(np.nanmax(vals)) if vals.size and np.isfinite(np.nanmax(vals)) else 1.0
    c = _Canvas(title, xlabel, ylabel, (0, len(categories)), (0, top * 1.1 if top > 0 else 1.0))
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        for j, v in enumerate(vals[i]):
            if not np.isfinite(v):
                continue
            x = c.px(j + 0.1 + i * width)
            y = c.py(v)
            c.parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{c.px(width) - c.px(0):.1f}" '
                           f'height="{c.py(0) - y:.1f}" fill="{PALETTE[i % len(PALETTE)]}"/>')
    c.xticks([j + 0.5 for j in range(len(categories))], categories)
    c.legend(names)
    with open(path, "w") as fh:
        fh.write(c.render())


def line_chart(path, x, series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    x = np.asarray(x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    allv = np.concatenate([v[np.isfinite(v)] for v in ys.values()]) if ys else np.zeros(1)
    c = _Canvas(title, xlabel, ylabel, (x.min(), x.max()), (min(allv.min(), 0.0), allv.max()))
    for i, (name, y) in enumerate(ys.items()):
        pts = " ".join(f"{c.px(a):.1f},{c.py(b):.1f}" for a, b in zip(x, y) if np.isfinite(b))
        c.parts.append(f'<polyline points="{pts}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="1.5"/>')
    c.xticks(np.linspace(x.min(), x.max(), 5))
    c.legend(list(ys))
    with open(path, "w") as fh:
        fh.write(c.render())


def kde_plot(path, samples: dict, title: str = "", xlabel: str = "", points: int = 200) -> None:
    """Gaussian KDE per named sample set (Silverman bandwidth)."""
    allx = np.concatenate([np.asarray(v, dtype=np.float64) for v in samples.values()])
    pad = 3.0 * silverman_bandwidth(allx)
    grid = np.linspace(allx.min() - pad, allx.max() + pad, points)
    dens = {k: gaussian_kde(v, grid) for k, v in samples.items()}
    line_chart(path, grid, dens, title, xlabel, "density")
