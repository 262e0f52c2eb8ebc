"""Desk-scale simulation harness for a broker-mediated PBFT blockchain.

The package wires four pieces together: an in-process partitioned pub-sub
broker, a pool of stake-selected validator actors running a leaderless PBFT
round, a master coordinator that gates phase transitions, and a metrics
pipeline that renders per-round timing rows and summary statistics.
"""

from .config import ConfigError, HarnessConfig, parse_config
from .harness import (
    AnalyzeReport,
    RunFailure,
    RunResult,
    analyze_csvs,
    run_simulation,
    topology_rows,
    topology_text,
    write_outputs,
)

__version__ = "0.1.0"

__all__ = [
    "AnalyzeReport",
    "ConfigError",
    "HarnessConfig",
    "RunFailure",
    "RunResult",
    "analyze_csvs",
    "parse_config",
    "run_simulation",
    "topology_rows",
    "topology_text",
    "write_outputs",
    "__version__",
]
