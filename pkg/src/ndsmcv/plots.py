"""Minimal SVG output: a sample scatter over the true supports and a mode-balance bar chart.

Both use a fixed 600x600 viewport. Mode ``i`` is drawn in ``MODE_COLORS[i % 8]``;
samples outside every support are black.
"""

from xml.sax.saxutils import escape

import numpy as np

from .datasets import OUTSIDE, assign_modes
from .io import atomic_write_text

SIZE = 600
MARGIN = 40
MODE_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
OUTSIDE_COLOR = "#000000"
MAX_POINTS = 5000


def _f(x):
    return f"{x:.2f}"


def scatter_svg(samples, spec, tau=None, title=""):
    X = np.asarray(samples, dtype=np.float64)[:MAX_POINTS]
    lo = (spec.centers - spec.half_widths).min() - 1.0
    hi = (spec.centers + spec.half_widths).max() + 1.0
    scale = (SIZE - 2 * MARGIN) / (hi - lo)

    def px(x):
        return MARGIN + (x - lo) * scale

    def py(y):
        return SIZE - MARGIN - (y - lo) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
        f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{SIZE // 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>')
    for i, (c, h) in enumerate(zip(spec.centers, spec.half_widths)):
        color = MODE_COLORS[i % len(MODE_COLORS)]
        parts.append(
            f'<rect x="{_f(px(c[0] - h[0]))}" y="{_f(py(c[1] + h[1]))}" width="{_f(2 * h[0] * scale)}" '
            f'height="{_f(2 * h[1] * scale)}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
    labels = assign_modes(X, spec, tau) if X.size else np.array([], dtype=int)
    for (x, y), lab in zip(X, labels):
        if not (np.isfinite(x) and np.isfinite(y)) or not (lo <= x <= hi and lo <= y <= hi):
            continue
        color = OUTSIDE_COLOR if lab == OUTSIDE else MODE_COLORS[lab % len(MODE_COLORS)]
        parts.append(f'<circle cx="{_f(px(x))}" cy="{_f(py(y))}" r="1.2" fill="{color}" fill-opacity="0.6"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def balance_svg(report, spec, title=""):
    """Bars: generated fraction per mode, with the true weight as a grey tick."""
    m = spec.n_modes
    top = max(float(report.fractions.max()), float(spec.weights.max()), 1e-9) * 1.1
    width = (SIZE - 2 * MARGIN) / m
    base = SIZE - MARGIN
    height = SIZE - 2 * MARGIN - 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
        f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{base}" x2="{SIZE - MARGIN}" y2="{base}" stroke="black"/>',
    ]
    if title:
        parts.append(f'<text x="{SIZE // 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>')
    for i in range(m):
        x0 = MARGIN + i * width
        h = report.fractions[i] / top * height
        parts.append(
            f'<rect x="{_f(x0 + 0.15 * width)}" y="{_f(base - h)}" width="{_f(0.7 * width)}" height="{_f(h)}" '
            f'fill="{MODE_COLORS[i % len(MODE_COLORS)]}"/>'
        )
        hw = spec.weights[i] / top * height
        parts.append(
            f'<line x1="{_f(x0 + 0.1 * width)}" y1="{_f(base - hw)}" x2="{_f(x0 + 0.9 * width)}" '
            f'y2="{_f(base - hw)}" stroke="#555555" stroke-width="2"/>'
        )
        parts.append(f'<text x="{_f(x0 + width / 2)}" y="{base + 16}" text-anchor="middle" font-size="12">{i}</text>')
    parts.append(
        f'<text x="{SIZE - MARGIN}" y="{MARGIN}" text-anchor="end" font-size="12">'
        f"support fraction {report.support_fraction:.3f}, std {report.std_fractions:.4f}</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_scatter_svg(path, samples, spec, tau=None, title=""):
    atomic_write_text(path, scatter_svg(samples, spec, tau, title))


def write_balance_svg(path, report, spec, title=""):
    atomic_write_text(path, balance_svg(report, spec, title))
