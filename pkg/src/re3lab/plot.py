"""Static SVG learning curves: mean line plus a mean +/- std band across seeds.

Output is plain text built by hand so that identical inputs give identical
bytes (no renderer version or timestamp leaks into the file).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import read_metrics

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
WIDTH, HEIGHT = 640, 400
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom


@dataclass
class Curve:
    label: str
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_runs: int


def aggregate(runs: list[tuple[np.ndarray, np.ndarray]], label: str = "run") -> Curve:
    """Mean and population std per step.

    The step grid is that of the first run; other runs are linearly
    interpolated onto it when their grids differ.
    """
    if not runs:
        raise ValueError("need at least one run")
    grid = np.asarray(runs[0][0], dtype=np.float64)
    ys = []
    for steps, vals in runs:
        steps = np.asarray(steps, dtype=np.float64)
        vals = np.asarray(vals, dtype=np.float64)
        ys.append(vals if np.array_equal(steps, grid) else np.interp(grid, steps, vals))
    ys = np.stack(ys)
    return Curve(label, grid, ys.mean(axis=0), ys.std(axis=0), len(runs))


def load_curves(inputs: list[str], column: str = "eval_return_mean") -> list[Curve]:
    """``inputs`` are CSV paths, optionally prefixed ``label=``; same labels form one band."""
    groups: dict[str, list] = {}
    for item in inputs:
        label, _, path = item.rpartition("=") if "=" in item else ("all", "", item)
        rows = read_metrics(path)
        if not rows:
            raise ValueError(f"{path}: no data rows")
        steps = np.array([r.env_step for r in rows], dtype=np.float64)
        vals = np.array([getattr(r, column) for r in rows], dtype=np.float64)
        groups.setdefault(label, []).append((steps, vals))
    return [aggregate(runs, label) for label, runs in groups.items()]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(curves: list[Curve], title: str = "", ylabel: str = "eval return") -> str:
    left, right, top, bottom = MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom
    xmax = max(float(c.steps.max()) for c in curves) or 1.0
    xmin = min(float(c.steps.min()) for c in curves)
    lo = min(float((c.mean - c.std).min()) for c in curves)
    hi = max(float((c.mean + c.std).max()) for c in curves)
    lo, hi = min(lo, 0.0), max(hi, 1e-9)
    if xmax == xmin:
        xmin = 0.0

    def sx(x):
        return left + pw * (x - xmin) / (xmax - xmin)

    def sy(y):
        return top + ph * (1.0 - (y - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle">{_escape(title)}</text>')
    for i in range(5):
        yv = lo + (hi - lo) * i / 4
        xv = xmin + (xmax - xmin) * i / 4
        out.append(f'<text x="{left - 6}" y="{_fmt(sy(yv) + 4)}" text-anchor="end">{yv:.3g}</text>')
        out.append(f'<text x="{_fmt(sx(xv))}" y="{top + ph + 16}" text-anchor="middle">{xv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">env steps</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{_escape(ylabel)}</text>')

    for idx, c in enumerate(curves):
        color = PALETTE[idx % len(PALETTE)]
        upper = [(sx(x), sy(y)) for x, y in zip(c.steps, c.mean + c.std)]
        lower = [(sx(x), sy(y)) for x, y in zip(c.steps, c.mean - c.std)]
        band = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in upper + lower[::-1])
        line = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(c.steps, c.mean))
        out.append(f'<polygon class="band" points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        out.append(f'<polyline class="mean" points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 + 14 * idx
        out.append(f'<text x="{left + 8}" y="{ly}" fill="{color}">{_escape(c.label)} (n={c.n_runs})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def plot_files(out_path, inputs: list[str], column: str = "eval_return_mean", title: str = "") -> list[Curve]:
    curves = load_curves(inputs, column)
    svg = render_svg(curves, title=title, ylabel=column)
    with open(out_path, "w", newline="\n") as fh:
        fh.write(svg)
    return curves
