"""Static SVG figures: line charts for loss curves, bar histograms for element quality."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return []
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.0e}"
    return f"{v:g}"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xlim, ylim, log_y: bool = False):
        self.parts: list[str] = []
        self.log_y = log_y
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        self.parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        self.parts.append(f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>')
        self.parts.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
        self.parts.append(
            f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {HEIGHT / 2})">{escape(ylabel)}</text>'
        )
        self._axes()

    def sx(self, x):
        return MARGIN["left"] + (x - self.x0) / (self.x1 - self.x0) * self.pw

    def sy(self, y):
        return MARGIN["top"] + (1 - (y - self.y0) / (self.y1 - self.y0)) * self.ph

    def _axes(self):
        L, T = MARGIN["left"], MARGIN["top"]
        self.parts.append(f'<rect x="{L}" y="{T}" width="{self.pw}" height="{self.ph}" fill="none" stroke="#333"/>')
        for t in _nice_ticks(self.x0, self.x1):
            x = self.sx(t)
            self.parts.append(f'<line x1="{x:.1f}" y1="{T + self.ph}" x2="{x:.1f}" y2="{T + self.ph + 5}" stroke="#333"/>')
            self.parts.append(f'<text x="{x:.1f}" y="{T + self.ph + 18}" text-anchor="middle" font-size="10">{_label(t)}</text>')
        for t in _nice_ticks(self.y0, self.y1):
            y = self.sy(t)
            text = _label(10**t) if self.log_y else _label(t)
            self.parts.append(f'<line x1="{L - 5}" y1="{y:.1f}" x2="{L + self.pw}" y2="{y:.1f}" stroke="#ddd"/>')
            self.parts.append(f'<text x="{L - 8}" y="{y + 3:.1f}" text-anchor="end" font-size="10">{text}</text>')

    def polyline(self, xs, ys, color):
        pts = " ".join(f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')

    def bar(self, x0, x1, h, color):
        X0, X1, Y = self.sx(x0), self.sx(x1), self.sy(h)
        self.parts.append(
            f'<rect x="{X0:.2f}" y="{Y:.2f}" width="{max(X1 - X0, 0):.2f}" height="{self.sy(self.y0) - Y:.2f}" '
            f'fill="{color}" fill-opacity="0.55" stroke="{color}"/>'
        )

    def legend(self, names, colors):
        x = MARGIN["left"] + self.pw - 150
        for i, (n, c) in enumerate(zip(names, colors)):
            y = MARGIN["top"] + 16 + 16 * i
            self.parts.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 20}" y2="{y - 4}" stroke="{c}" stroke-width="3"/>')
            self.parts.append(f'<text x="{x + 26}" y="{y}" font-size="11">{escape(n)}</text>')

    def svg(self) -> str:
        body = "\n".join(self.parts)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
                f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">\n{body}\n</svg>\n')


def line_chart(path, series: dict[str, tuple], title: str, xlabel: str, ylabel: str, log_y: bool = True) -> Path:
    """``series`` maps a legend name to ``(x, y)`` sequences."""
    clean = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, float), np.asarray(y, float)
        keep = np.isfinite(y) & ((y > 0) if log_y else True)
        if keep.any():
            clean[name] = (x[keep], np.log10(y[keep]) if log_y else y[keep])
    if not clean:
        raise ValueError("nothing to plot: every series is empty or non-finite")
    xs = np.concatenate([v[0] for v in clean.values()])
    ys = np.concatenate([v[1] for v in clean.values()])
    pad = 0.05 * (ys.max() - ys.min() or 1.0)
    c = _Canvas(title, xlabel, ylabel + (" (log)" if log_y else ""), (xs.min(), xs.max()),
                (ys.min() - pad, ys.max() + pad), log_y=log_y)
    colors = [PALETTE[i % len(PALETTE)] for i in range(len(clean))]
    for (x, y), col in zip(clean.values(), colors):
        c.polyline(x, y, col)
    c.legend(list(clean), colors)
    p = Path(path)
    p.write_text(c.svg())
    return p


def histogram_chart(path, edges, counts: dict[str, np.ndarray], title: str, xlabel: str, ylabel: str = "fraction of elements") -> Path:
    """Overlaid bar histograms sharing ``edges``; counts are normalised per series."""
    edges = np.asarray(edges, float)
    fracs = {k: np.asarray(v, float) / max(np.sum(v), 1) for k, v in counts.items()}
    top = max((f.max() for f in fracs.values() if f.size), default=1.0) * 1.08
    c = _Canvas(title, xlabel, ylabel, (edges[0], edges[-1]), (0.0, top or 1.0))
    colors = [PALETTE[i % len(PALETTE)] for i in range(len(fracs))]
    for f, col in zip(fracs.values(), colors):
        for a, b, h in zip(edges[:-1], edges[1:], f):
            if h > 0:
                c.bar(a, b, h, col)
    c.legend(list(fracs), colors)
    p = Path(path)
    p.write_text(c.svg())
    return p


def smooth(values, window: int = 25) -> np.ndarray:
    """Trailing moving average (the first entries average what is available)."""
    v = np.asarray(values, float)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def read_csv_columns(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) if r[k] not in ("", None) else np.nan for r in rows]) for k in rows[0]}


def plot_run_dir(run) -> list[Path]:
    """Loss and MSE curves from a training run plus any scaled-Jacobian histograms below it."""
    run = Path(run)
    written = []
    if (run / "train_log.csv").is_file():
        t = read_csv_columns(run / "train_log.csv")
        if t:
            series = {"total (smoothed)": (t["step"], smooth(t["total"])), "recon (smoothed)": (t["step"], smooth(t["recon"]))}
            written.append(line_chart(run / "loss_curves.svg", series, "Training loss", "step", "loss"))
    if (run / "val_curve.csv").is_file():
        v = read_csv_columns(run / "val_curve.csv")
        if v:
            series = {"train MSE": (v["step"], v["train_mse"]), "validation MSE": (v["step"], v["val_mse"])}
            written.append(line_chart(run / "mse_curves.svg", series, "Vertex MSE (relative space)", "step", "MSE"))
    for hist in sorted(run.rglob("sj_histogram.csv")):
        h = read_csv_columns(hist)
        if h:
            edges = np.append(h["bin_lo"], h["bin_hi"][-1])
            written.append(histogram_chart(hist.with_suffix(".svg"), edges, {"scaled Jacobian": h["count"]},
                                           "Element quality", "scaled Jacobian"))
    return written
