"""Metrics CSV rows written at every evaluation point."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass

COLUMNS = ("env_step", "eval_return_mean", "eval_return_std", "intrinsic_mean", "intrinsic_std",
           "beta", "cumulative_flops", "wall_seconds")


class MetricsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRow:
    env_step: int
    eval_return_mean: float
    eval_return_std: float
    intrinsic_mean: float
    intrinsic_std: float
    beta: float
    cumulative_flops: int
    wall_seconds: float

    def cells(self) -> list[str]:
        return [str(self.env_step), repr(float(self.eval_return_mean)), repr(float(self.eval_return_std)),
                repr(float(self.intrinsic_mean)), repr(float(self.intrinsic_std)), repr(float(self.beta)),
                str(self.cumulative_flops), repr(float(self.wall_seconds))]


class MetricsWriter:
    """Append-only CSV writer that enforces strictly increasing ``env_step``."""

    def __init__(self, path):
        self.path = path
        self.last_step = None
        with open(path, "w", newline="") as fh:
            fh.write(",".join(COLUMNS) + "\n")

    def append(self, row: MetricsRow):
        if self.last_step is not None and row.env_step <= self.last_step:
            raise ValueError(f"env_step {row.env_step} not after {self.last_step}")
        self.last_step = row.env_step
        with open(self.path, "a", newline="") as fh:
            fh.write(",".join(row.cells()) + "\n")


def parse_metrics(text: str, source: str = "<csv>") -> list[MetricsRow]:
    """Parse metrics CSV text; errors name the offending line (1-based)."""
    reader = csv.reader(io.StringIO(text))
    rows: list[MetricsRow] = []
    header = None
    types = [f.type for f in dataclasses.fields(MetricsRow)]
    for lineno, cells in enumerate(reader, 1):
        if not cells or all(not c.strip() for c in cells):
            continue
        if header is None:
            header = [c.strip() for c in cells]
            if tuple(header) != COLUMNS:
                raise MetricsFormatError(f"{source}:{lineno}: bad header {header}")
            continue
        if len(cells) != len(COLUMNS):
            raise MetricsFormatError(f"{source}:{lineno}: expected {len(COLUMNS)} fields, got {len(cells)}")
        vals = []
        for name, typ, cell in zip(COLUMNS, types, cells):
            try:
                vals.append(int(cell) if typ in (int, "int") else float(cell))
            except ValueError:
                raise MetricsFormatError(f"{source}:{lineno}: bad {name} value {cell!r}") from None
        row = MetricsRow(*vals)
        if rows and row.env_step <= rows[-1].env_step:
            raise MetricsFormatError(
                f"{source}:{lineno}: env_step {row.env_step} not after {rows[-1].env_step}")
        rows.append(row)
    if header is None:
        raise MetricsFormatError(f"{source}:1: empty file")
    return rows


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return parse_metrics(fh.read(), str(path))
