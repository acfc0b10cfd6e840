"""Dependency-free SVG charts of reproduce outputs."""

from __future__ import annotations

import csv
import os

W, H, PAD = 480, 300, 40
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _frame(title, xlabel, ylabel):
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{title}</text>',
            f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - 10}" y2="{H - PAD}" stroke="black"/>',
            f'<line x1="{PAD}" y1="{H - PAD}" x2="{PAD}" y2="24" stroke="black"/>',
            f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">{xlabel}</text>',
            f'<text x="12" y="{H / 2}" transform="rotate(-90 12 {H / 2})" text-anchor="middle">{ylabel}</text>']


def _xy(i, n, v, lo, hi):
    x = PAD + (W - PAD - 20) * (i + 0.5) / n
    y = (H - PAD) - (H - PAD - 30) * (v - lo) / (hi - lo)
    return x, y


def line_chart(series, labels, title, ylabel, lo=None, hi=1.0):
    """``series`` maps name -> list of values, one per x label."""
    vals = [v for s in series.values() for v in s]
    lo = min(0.0, min(vals)) if lo is None else lo
    n = len(labels)
    out = _frame(title, "layer", ylabel)
    for i, lab in enumerate(labels):
        x, _ = _xy(i, n, lo, lo, hi)
        out.append(f'<text x="{x:.1f}" y="{H - PAD + 14}" text-anchor="middle">{lab}</text>')
    for j, (name, s) in enumerate(series.items()):
        pts = " ".join("{:.1f},{:.1f}".format(*_xy(i, n, v, lo, hi)) for i, v in enumerate(s))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{COLORS[j % 4]}" stroke-width="2"/>')
        out.append(f'<text x="{W - 120}" y="{36 + 14 * j}" fill="{COLORS[j % 4]}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out)


def bar_chart(series, labels, title, ylabel):
    hi = max(max(s) for s in series.values()) or 1.0
    n, k = len(labels), len(series)
    slot = (W - PAD - 20) / n
    out = _frame(title, "layer", ylabel)
    for i, lab in enumerate(labels):
        out.append(f'<text x="{PAD + slot * (i + 0.5):.1f}" y="{H - PAD + 14}" text-anchor="middle">{lab}</text>')
        for j, s in enumerate(series.values()):
            h = (H - PAD - 30) * s[i] / hi
            x = PAD + slot * i + slot * 0.1 + j * slot * 0.8 / k
            out.append(f'<rect x="{x:.1f}" y="{H - PAD - h:.1f}" width="{slot * 0.8 / k:.1f}" height="{h:.1f}" '
                       f'fill="{COLORS[j % 4]}"/>')
    for j, name in enumerate(series):
        out.append(f'<text x="{W - 120}" y="{36 + 14 * j}" fill="{COLORS[j % 4]}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out)


def plot_outputs(outdir):
    """Render the similarity curves and exit histogram found in ``outdir``."""
    written = []
    lc = os.path.join(outdir, "layer_comparison.csv")
    if os.path.exists(lc):
        rows = _read(lc)
        labels = [r["layer"] for r in rows]
        svg = line_chart({"baseline": [float(r["baseline_sim"]) for r in rows],
                          "exit-aware": [float(r["leap_sim"]) for r in rows]},
                         labels, "similarity to final layer", "cosine")
        written.append(_write(os.path.join(outdir, "similarity_curves.svg"), svg))
    eh = os.path.join(outdir, "exit_histogram.csv")
    if os.path.exists(eh):
        rows = _read(eh)
        svg = bar_chart({"baseline": [float(r["baseline"]) for r in rows],
                         "exit-aware": [float(r["leap"]) for r in rows]},
                        [r["layer"] for r in rows], "exit layer distribution", "fraction")
        written.append(_write(os.path.join(outdir, "exit_histogram.svg"), svg))
    return written


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text + "\n")
    return path
