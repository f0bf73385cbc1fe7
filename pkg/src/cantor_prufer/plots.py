"""Self-contained SVG line plots (no plotting dependency)."""

import math
from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _nice_ticks(lo, hi, n=6):
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    t = math.ceil(lo / step) * step
    out = []
    while t <= hi + 1e-9 * step:
        out.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return out


def _fmt(v):
    if v == 0:
        return "0"
    a = abs(v)
    if 1e-3 <= a < 1e5:
        return f"{v:g}"
    return f"{v:.0e}".replace("e+0", "e").replace("e-0", "e-")


def _thin(x, y, n=2000):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size <= n:
        return x, y
    # min and max of each of n/2 equal-width bins in the plotted x, so peaks survive
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    edges = np.linspace(x[0], x[-1], n // 2 + 1)
    b = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n // 2 - 1)
    starts = np.flatnonzero(np.r_[True, b[1:] != b[:-1]])
    keep = [0, x.size - 1]
    for s, e in zip(starts, np.r_[starts[1:], x.size]):
        keep += [s + int(np.argmin(y[s:e])), s + int(np.argmax(y[s:e]))]
    idx = np.unique(keep)
    return x[idx], y[idx]


class Figure:
    """A single panel: series, vertical markers, optional shaded spans."""

    def __init__(self, title, xlabel, ylabel, width=820, height=460):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.width, self.height = width, height
        self.series = []
        self.vlines = []
        self.spans = []

    def line(self, x, y, label, color=None, dash=None):
        x, y = _thin(x, y)
        self.series.append((x, y, label, color or COLORS[len(self.series) % len(COLORS)], dash))

    def vline(self, x, label):
        self.vlines.append((float(x), label))

    def span(self, x0, x1, label, fill):
        self.spans.append((float(x0), float(x1), label, fill))

    def svg(self):
        ml, mr, mt, mb = 80, 20, 40, 60
        pw, ph = self.width - ml - mr, self.height - mt - mb
        xs = np.concatenate([s[0] for s in self.series]) if self.series else np.array([0.0, 1.0])
        ys = np.concatenate([s[1] for s in self.series]) if self.series else np.array([0.0, 1.0])
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = float(ys.min()), float(ys.max())
        if x1 <= x0:
            x1 = x0 + 1.0
        if y1 <= y0:
            y1 = y0 + 1.0
        pad = 0.04 * (y1 - y0)
        y0, y1 = y0 - pad, y1 + pad

        def px(x):
            return ml + (x - x0) / (x1 - x0) * pw

        def py(y):
            return mt + (1.0 - (y - y0) / (y1 - y0)) * ph

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
               f'height="{self.height}" viewBox="0 0 {self.width} {self.height}" '
               'font-family="sans-serif" font-size="12">',
               f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
               f'<text x="{self.width / 2:.1f}" y="22" text-anchor="middle" font-size="15">'
               f'{escape(self.title)}</text>']
        for a, b, label, fill in self.spans:
            a, b = max(a, x0), min(b, x1)
            if b <= a:
                continue
            out.append(f'<rect x="{px(a):.2f}" y="{mt}" width="{px(b) - px(a):.2f}" '
                       f'height="{ph}" fill="{fill}" fill-opacity="0.35"/>')
            out.append(f'<text x="{(px(a) + px(b)) / 2:.2f}" y="{mt + 14}" '
                       f'text-anchor="middle" fill="#555">{escape(label)}</text>')
        out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
                   'stroke="black"/>')
        for t in _nice_ticks(x0, x1):
            out.append(f'<line x1="{px(t):.2f}" y1="{mt + ph}" x2="{px(t):.2f}" '
                       f'y2="{mt + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{px(t):.2f}" y="{mt + ph + 18}" text-anchor="middle">'
                       f'{_fmt(t)}</text>')
        for t in _nice_ticks(y0, y1):
            out.append(f'<line x1="{ml - 5}" y1="{py(t):.2f}" x2="{ml}" y2="{py(t):.2f}" '
                       'stroke="black"/>')
            out.append(f'<text x="{ml - 8}" y="{py(t) + 4:.2f}" text-anchor="end">'
                       f'{_fmt(t)}</text>')
        out.append(f'<text x="{ml + pw / 2:.1f}" y="{self.height - 15}" text-anchor="middle">'
                   f'{escape(self.xlabel)}</text>')
        out.append(f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 18 {mt + ph / 2:.1f})">{escape(self.ylabel)}</text>')
        for x, label in self.vlines:
            if not x0 <= x <= x1:
                continue
            out.append(f'<line x1="{px(x):.2f}" y1="{mt}" x2="{px(x):.2f}" y2="{mt + ph}" '
                       'stroke="#444" stroke-dasharray="4 3"/>')
            out.append(f'<text x="{px(x) + 3:.2f}" y="{mt + ph - 6}" fill="#444">'
                       f'{escape(label)}</text>')
        for i, (x, y, label, color, dash) in enumerate(self.series):
            pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
            d = f' stroke-dasharray="{dash}"' if dash else ""
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.4"{d} '
                       f'points="{pts}"/>')
            ly = mt + 30 + 16 * i
            out.append(f'<line x1="{ml + pw - 150}" y1="{ly}" x2="{ml + pw - 125}" y2="{ly}" '
                       f'stroke="{color}" stroke-width="2"{d}/>')
            out.append(f'<text x="{ml + pw - 120}" y="{ly + 4}">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def eigenfunction_svg(traj, j=0):
    """log10 R^2 against x for both energies of pair ``j``, phases shaded."""
    pair = traj.stage.pairs[j]
    ln10 = math.log(10.0)
    fig = Figure(f"Eigenfunction amplitude, stage {traj.stage.n}, pair {j}",
                 "x", "log10 R^2")
    xr = traj.rec_x
    sides = ("lo",) if pair.kind == "wvn" else ("lo", "hi")
    for side in sides:
        e = pair.k_parent if pair.kind == "wvn" else (pair.k_lo if side == "lo" else pair.k_hi)
        fig.line(xr, traj.column(j, f"log_r2_{side}") / ln10, f"k = {e.value:.10g}",
                 dash=None if side == "lo" else "6 3")
    x_flip = traj.x_flip(j)
    tail = traj.stage.tail_start(j)
    start = traj.stage.x_start
    if x_flip is not None:
        fig.span(start, x_flip, "drive", "#cfe3f5")
        fig.span(x_flip, tail, "post-flip", "#f7d9c4")
        fig.vline(x_flip, "flip, R^2 = 1/2")
    else:
        fig.span(start, tail, "drive", "#cfe3f5")
    fig.span(tail, traj.x_end, "tail", "#d8efd1")
    return fig.svg()


def bumps_svg(state):
    """Per-stage amplitude and accumulated norm on a log10 x axis."""
    ln10 = math.log(10.0)
    fig = Figure("Eigenfunction bumps across stages", "log10 x",
                 "log10 R^2 (solid), log10 ||R||^2 on (0, x) (dashed)")
    ci = 0
    for rec in state.stages:
        tr = rec.traj
        m = tr.rec_x > 0
        for j, pair in enumerate(tr.stage.pairs):
            color = COLORS[ci % len(COLORS)]
            ci += 1
            e = pair.k_lo
            lx = np.log10(tr.rec_x[m])
            fig.line(lx, tr.column(j, "log_r2_lo")[m] / ln10,
                     f"stage {tr.stage.n} k = {e.value:.8g}", color=color)
            nr = tr.column(j, "norm_r2_lo")[m]
            with np.errstate(divide="ignore"):
                fig.line(lx, np.log10(nr), f"stage {tr.stage.n} norm", color=color, dash="5 3")
        if tr.stage.x_start > 0:
            fig.vline(math.log10(tr.stage.x_start), f"x{tr.stage.n}")
    return fig.svg()
