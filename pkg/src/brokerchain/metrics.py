"""Round metrics, summary statistics, and the run's CSV serialization.

The CSV schema is fixed: one row per committed round, twelve columns, LF
line endings, floats printed with six decimals, integers bare, no quoting.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, fields
from typing import Iterable, Sequence, TextIO

CSV_COLUMNS = (
    "round",
    "pooling_ms",
    "preprepare_ms",
    "prepare_ms",
    "commit_ms",
    "sync_ms",
    "consensus_ms",
    "total_ms",
    "ttf_ms",
    "failed_tx",
    "pool_tps",
    "block_tps",
)
_INT_COLUMNS = {"round", "failed_tx"}


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    pooling_ms: float
    preprepare_ms: float
    prepare_ms: float
    commit_ms: float
    sync_ms: float
    consensus_ms: float
    total_ms: float
    ttf_ms: float
    failed_tx: int
    pool_tps: float
    block_tps: float


assert tuple(f.name for f in fields(RoundMetrics)) == CSV_COLUMNS


def compute_block_tps(block_size: int, consensus_ms: float) -> float:
    """Committed transactions per second of consensus time."""
    if consensus_ms <= 0:
        raise ValueError("consensus duration must be positive")
    return block_size * 1000.0 / consensus_ms


def compute_pool_tps(processed: int, pooling_ms: float) -> float:
    """Accepted plus rejected transactions per second of pooling time."""
    if pooling_ms <= 0:
        raise ValueError("pooling duration must be positive")
    return processed * 1000.0 / pooling_ms


def compute_ttf(commit_ms: float, publish_times_ms: Sequence[float]) -> float:
    """Worst transaction wait in the block: commit instant minus earliest publish."""
    if not publish_times_ms:
        raise ValueError("a block always carries at least one transaction")
    return commit_ms - min(publish_times_ms)


def five_number_summary(values: Sequence[float]) -> tuple[float, float, float, float, float]:
    """(min, q1, median, q3, max) with linearly interpolated quartiles."""
    if not values:
        raise ValueError("cannot summarize an empty sample")
    data = sorted(float(v) for v in values)
    if len(data) == 1:
        v = data[0]
        return (v, v, v, v, v)
    q1, med, q3 = statistics.quantiles(data, n=4, method="inclusive")
    return (data[0], q1, med, q3, data[-1])


def pct_change(before: float, after: float) -> float:
    if before == 0:
        raise ValueError("percent change from zero is undefined")
    return (after - before) / before * 100.0


def pearson_matrix(columns: dict[str, Sequence[float]]) -> dict[str, dict[str, float | None]]:
    """Pairwise Pearson correlations; a constant column yields None entries.

    All columns must be equally sized with at least two observations.
    """
    names = list(columns)
    lengths = {len(columns[n]) for n in names}
    if len(lengths) != 1:
        raise ValueError("columns must have equal length")
    n = lengths.pop()
    if n < 2:
        raise ValueError("need at least two observations")
    means = {name: sum(columns[name]) / n for name in names}
    sds = {}
    for name in names:
        var = sum((x - means[name]) ** 2 for x in columns[name])
        sds[name] = math.sqrt(var)
    out: dict[str, dict[str, float | None]] = {a: {} for a in names}
    for a in names:
        for b in names:
            if sds[a] == 0.0 or sds[b] == 0.0:
                out[a][b] = None  # undefined, deliberately not zero
                continue
            cov = sum(
                (x - means[a]) * (y - means[b]) for x, y in zip(columns[a], columns[b])
            )
            out[a][b] = cov / (sds[a] * sds[b])
    return out


def _format_cell(column: str, value: float | int) -> str:
    if column in _INT_COLUMNS:
        return str(int(value))
    return f"{value:.6f}"


def write_csv(out: TextIO, rows: Iterable[RoundMetrics]) -> None:
    out.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        out.write(
            ",".join(_format_cell(col, getattr(row, col)) for col in CSV_COLUMNS) + "\n"
        )


def parse_csv(text: str) -> list[RoundMetrics]:
    """Strict reader for the run CSV; raises ValueError naming the defect."""
    lines = [line for line in text.split("\n") if line.strip()]
    if not lines:
        raise ValueError("empty csv")
    header = tuple(lines[0].split(","))
    if header != CSV_COLUMNS:
        for i, (got, want) in enumerate(zip(header, CSV_COLUMNS)):
            if got != want:
                raise ValueError(f"column {i}: expected {want!r}, found {got!r}")
        raise ValueError(f"expected {len(CSV_COLUMNS)} columns, found {len(header)}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(CSV_COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(CSV_COLUMNS)} cells")
        try:
            rows.append(
                RoundMetrics(
                    **{
                        col: (int(cell) if col in _INT_COLUMNS else float(cell))
                        for col, cell in zip(CSV_COLUMNS, cells)
                    }
                )
            )
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return rows


def column(rows: Sequence[RoundMetrics], name: str) -> list[float]:
    return [float(getattr(row, name)) for row in rows]
