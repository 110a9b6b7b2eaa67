"""Standalone SVG line charts of mean IID/OOD return against training step."""
from __future__ import annotations

from pathlib import Path

import numpy as np

W, H, PAD = 640, 400, 56
SERIES = (("iid_mean", "#1f77b4", "IID"), ("ood_mean", "#d62728", "OOD"))


def _mean_by_step(rows, key):
    steps = sorted({r["step"] for r in rows if r.get(key) is not None})
    return steps, [float(np.mean([r[key] for r in rows if r["step"] == s and r.get(key) is not None]))
                   for s in steps]


def curves_svg(rows, title="") -> str:
    """SVG text; one polyline per series, averaged over seeds at each step."""
    data = [(label, color, *_mean_by_step(rows, key)) for key, color, label in SERIES]
    xs = [s for _, _, st, _ in data for s in st] or [0, 1]
    ys = [v for _, _, _, vals in data for v in vals] or [0, 1]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def px(x):
        return PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)

    def py(y):
        return H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>']
    for v, anchor_y in ((y0, H - PAD), (y1, PAD)):
        out.append(f'<text x="{PAD - 6}" y="{anchor_y:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{v:.2f}</text>')
    for v in (x0, x1):
        out.append(f'<text x="{px(v):.1f}" y="{H - PAD + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{v:g}</text>')
    for i, (label, color, steps, vals) in enumerate(data):
        if steps:
            pts = " ".join(f"{px(s):.2f},{py(v):.2f}" for s, v in zip(steps, vals))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        out.append(f'<text x="{W - PAD}" y="{PAD + 16 * i}" text-anchor="end" fill="{color}" '
                   f'font-family="sans-serif" font-size="12">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_curves_svg(path, rows, title="") -> str:
    text = curves_svg(rows, title)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return text
