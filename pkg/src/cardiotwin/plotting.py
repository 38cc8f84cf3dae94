"""PV-loop figures: a dependency-free SVG writer and matplotlib renderings."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .analysis import PvLoop

WIDTH, HEIGHT = 640, 480
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 150, 30, 55
PAD = 0.05
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def axis_ranges(loops: Sequence[PvLoop]) -> tuple[tuple[float, float], tuple[float, float]]:
    """Data extrema padded by 5% of the span on each side."""
    v = np.concatenate([lp.volume for lp in loops])
    p = np.concatenate([lp.pressure for lp in loops])

    def padded(a):
        lo, hi = float(a.min()), float(a.max())
        span = hi - lo if hi > lo else max(abs(hi), 1.0)
        return lo - PAD * span, hi + PAD * span

    return padded(v), padded(p)


def svg_text(loops: Sequence[PvLoop], labels: Sequence[str] | None = None, title: str = "") -> str:
    if not loops:
        raise ValueError("no loops to draw")
    labels = list(labels) if labels is not None else [f"loop {i + 1}" for i in range(len(loops))]
    (v0, v1), (p0, p1) = axis_ranges(loops)
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def sx(v):
        return MARGIN_L + (v - v0) / (v1 - v0) * pw

    def sy(p):
        return MARGIN_T + ph - (p - p0) / (p1 - p0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="18" text-anchor="middle">{escape(title)}</text>')
    for v in np.linspace(v0, v1, 6):
        x = sx(v)
        out.append(f'<line x1="{x:.2f}" y1="{MARGIN_T + ph}" x2="{x:.2f}" y2="{MARGIN_T + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{MARGIN_T + ph + 18}" text-anchor="middle">{v:.4g}</text>')
    for p in np.linspace(p0, p1, 6):
        y = sy(p)
        out.append(f'<line x1="{MARGIN_L - 5}" y1="{y:.2f}" x2="{MARGIN_L}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN_L - 8}" y="{y + 4:.2f}" text-anchor="end">{p:.4g}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">V_LV (ml)</text>')
    out.append(f'<text x="18" y="{MARGIN_T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {MARGIN_T + ph / 2:.1f})">P_LV (mmHg)</text>')
    for i, (loop, label) in enumerate(zip(loops, labels)):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(v):.3f},{sy(p):.3f}" for v, p in loop.points)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN_T + 14 + 18 * i
        lx = WIDTH - MARGIN_R + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_pv_svg(loops: Sequence[PvLoop], labels: Sequence[str] | None, path, title: str = "") -> Path:
    """Write a standalone SVG with one polyline per loop."""
    path = Path(path)
    text = svg_text(loops, labels, title)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write SVG to {path}: {exc}") from exc
    return path


def render_pv_png(loops: Sequence[PvLoop], labels: Sequence[str] | None, path, title: str = "") -> Path:
    """Matplotlib rendering of the same loops, for reports."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = list(labels) if labels is not None else [f"loop {i + 1}" for i in range(len(loops))]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for loop, label in zip(loops, labels):
        ax.plot(loop.volume, loop.pressure, lw=1.5, label=label)
    (v0, v1), (p0, p1) = axis_ranges(loops)
    ax.set_xlim(v0, v1)
    ax.set_ylim(p0, p1)
    ax.set_xlabel("V_LV (ml)")
    ax.set_ylabel("P_LV (mmHg)")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
