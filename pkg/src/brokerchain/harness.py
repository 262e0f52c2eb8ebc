"""Simulation assembly and reporting: wires users, broker, validators, and the
master together, runs a configured number of rounds, consolidates per-node
timings, and renders the run artifacts (CSV, injection log, round records,
summary).
"""

from __future__ import annotations

import io
import json
import logging
import time
from dataclasses import dataclass, field

from . import metrics as metrics_mod
from .broker import Broker, BrokerConfig, connection_count, p2p_edge_count
from .config import HarnessConfig
from .consensus import ALL_TOPICS, ValidatorActor, ValidatorConfig
from .core import Block, KeyPair, sha256
from .master import MasterActor, MasterConfig, Registry, RoundRecord
from .metrics import RoundMetrics
from .runtime import (
    CostModel,
    RealClock,
    SimulationStalled,
    VirtualClock,
    run_cooperative,
    run_threaded,
)
from .workload import InjectionRecord, WorkloadActor, generate_users

log = logging.getLogger(__name__)


class RunFailure(RuntimeError):
    """The simulation could not complete: stall, abort storm, or actor crash."""


@dataclass
class RunResult:
    config: HarnessConfig
    rows: list[RoundMetrics]
    node_rows: dict[str, list[RoundMetrics]]
    chains: dict[str, list[Block]]
    genesis_balances: dict[bytes, int]
    stakes: dict[str, int]
    injection_records: list[InjectionRecord]
    fraud_ids: dict[int, set[bytes]]
    valid_ids: dict[int, set[bytes]]
    round_records: list[RoundRecord]
    elapsed_s: float
    dropped_envelopes: int = 0

    def csv_text(self) -> str:
        buf = io.StringIO()
        metrics_mod.write_csv(buf, self.rows)
        return buf.getvalue()

    def injection_log_text(self) -> str:
        lines = [
            json.dumps(
                {
                    "round": r.round,
                    "valid_sent": r.valid_sent,
                    "fraud_sent": r.fraud_sent,
                    "fraud_kinds": r.fraud_kinds,
                },
                sort_keys=True,
            )
            for r in self.injection_records
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def round_records_text(self) -> str:
        lines = [
            json.dumps(
                {
                    "round": r.round,
                    "attempt": r.attempt,
                    "status": r.status,
                    "proposals": r.proposals,
                    "selection": r.selection,
                    "seed": r.seed_hex,
                    "block_hash": r.block_hash_hex,
                    "reason": r.reason,
                    "auth_accepted": r.auth_accepted,
                    "auth_rejected": r.auth_rejected,
                    "denied": r.denied,
                },
                sort_keys=True,
            )
            for r in self.round_records
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def summary_text(self) -> str:
        return build_summary(self)


def _derived_seed(seed: int, label: str) -> int:
    return int.from_bytes(sha256(f"{seed}|{label}".encode())[:8], "big")


def assign_stakes(config: HarnessConfig) -> dict[str, int]:
    """Equal stakes unless the config lists explicit ones.

    The default must stay symmetric: the stake cap permanently denies any
    proposer holding more than cap_fraction of the total, and uneven defaults
    would trip it on perfectly ordinary small clusters.
    """
    node_ids = [f"node-{i}" for i in range(config.nodes)]
    if config.stakes:
        return dict(zip(node_ids, config.stakes))
    return {node_id: 50 for node_id in node_ids}


def run_simulation(config: HarnessConfig) -> RunResult:
    started = time.perf_counter()
    modeled = config.mode == "seeded"
    clock = VirtualClock() if modeled else RealClock()

    broker = Broker(
        BrokerConfig(
            partitions=config.partitions,
            linger_ms=config.linger_ms,
            min_batch_bytes=config.min_batch_bytes,
            ack_mode=config.ack_mode,
            broker_count=config.broker_count,
            compression=config.compression,
            latency_range_ms=config.latency_range(),
            latency_seed=_derived_seed(config.rng_seed, "latency"),
        ),
        clock.now_ms,
    )
    for topic in ALL_TOPICS:
        broker.create_topic(topic)

    users, genesis_balances = generate_users(config.user_count, config.rng_seed)
    stakes = assign_stakes(config)

    registry = Registry()
    node_keys: dict[str, KeyPair] = {}
    for node_id in stakes:
        node_keys[node_id] = KeyPair.generate(sha256(f"{config.rng_seed}|key|{node_id}".encode()))
        registry.register_validator(node_id, node_keys[node_id].public_bytes, stakes[node_id])
    master_key = KeyPair.generate(sha256(f"{config.rng_seed}|key|master".encode()))
    node_publics = registry.public_keys()

    validator_config = ValidatorConfig(
        block_size=config.block_size,
        granularity_s=config.granularity_s,
        sync_timeout_ms=config.sync_timeout_ms,
        rounds=config.rounds,
        pool_tps_formula=config.pool_tps_formula,
    )
    validators = [
        ValidatorActor(
            node_id=node_id,
            keypair=node_keys[node_id],
            stake=stakes[node_id],
            genesis_balances=genesis_balances,
            broker=broker,
            config=validator_config,
            master_public=master_key.public_bytes,
            node_publics=node_publics,
            clock=clock,
            modeled_time=modeled,
            costs=CostModel(config.rng_seed, node_id),
        )
        for node_id in stakes
    ]
    master = MasterActor(
        keypair=master_key,
        registry=registry,
        broker=broker,
        config=MasterConfig(
            validators_per_round=config.k,
            cap_fraction=config.cap_fraction,
            sync_timeout_ms=config.sync_timeout_ms,
            rounds=config.rounds,
            seed_base=sha256(f"{config.rng_seed}|selection".encode()),
        ),
        clock=clock,
        modeled_time=modeled,
        costs=CostModel(config.rng_seed, "master"),
    )
    workload = WorkloadActor(
        users=users,
        broker=broker,
        rounds=config.rounds,
        block_size=config.block_size,
        batch_size=config.batch_size,
        fraud_ratio_for=config.fraud_ratio_for,
        seed=_derived_seed(config.rng_seed, "workload"),
        node_publics=node_publics,
        clock=clock,
        modeled_time=modeled,
        costs=CostModel(config.rng_seed, "workload"),
    )

    actors = [workload, *validators, master]
    try:
        if modeled:
            run_cooperative(
                actors, clock, broker, max_rotations=5000 * config.rounds + 100_000
            )
        else:
            run_threaded(actors, deadline_s=10.0 * config.rounds + 60.0)
    except (SimulationStalled, RuntimeError) as exc:
        raise RunFailure(str(exc)) from exc

    node_rows = {v.actor_id: v.rows for v in validators}
    rows = consolidate_rows(node_rows, config.rounds)
    chains = {v.actor_id: v.chain for v in validators}
    tips = {chain[-1].block_hash for chain in chains.values()}
    if len(tips) != 1:
        raise RunFailure("nodes finished on different chain tips")
    return RunResult(
        config=config,
        rows=rows,
        node_rows=node_rows,
        chains=chains,
        genesis_balances=genesis_balances,
        stakes=stakes,
        injection_records=workload.records,
        fraud_ids=workload.fraud_ids,
        valid_ids=workload.valid_ids,
        round_records=master.records,
        elapsed_s=time.perf_counter() - started,
        dropped_envelopes=sum(v.dropped_envelopes for v in validators),
    )


def consolidate_rows(
    node_rows: dict[str, list[RoundMetrics]], rounds: int
) -> list[RoundMetrics]:
    """One row per round: the participant with the median consensus time.

    Taking a whole row (rather than per-column medians) keeps the row's
    internal identities intact: phase times still sum to consensus_ms and
    block_tps still matches its own consensus_ms.
    """
    out: list[RoundMetrics] = []
    for round_num in range(1, rounds + 1):
        candidates = [
            row
            for rows in node_rows.values()
            for row in rows
            if row.round == round_num
        ]
        if not candidates:
            raise RunFailure(f"no committed metrics for round {round_num}")
        candidates.sort(key=lambda row: row.consensus_ms)
        out.append(candidates[(len(candidates) - 1) // 2])
    return out


_SUMMARY_METRICS = (
    "pool_tps",
    "block_tps",
    "pooling_ms",
    "preprepare_ms",
    "prepare_ms",
    "commit_ms",
    "sync_ms",
    "consensus_ms",
    "total_ms",
    "ttf_ms",
)


def _five_number_table(rows: list[RoundMetrics]) -> list[str]:
    header = f"{'metric':<14}{'min':>12}{'q1':>12}{'median':>12}{'q3':>12}{'max':>12}"
    lines = [header]
    for name in _SUMMARY_METRICS:
        mn, q1, med, q3, mx = metrics_mod.five_number_summary(metrics_mod.column(rows, name))
        lines.append(f"{name:<14}{mn:>12.2f}{q1:>12.2f}{med:>12.2f}{q3:>12.2f}{mx:>12.2f}")
    return lines


def build_summary(result: RunResult) -> str:
    config = result.config
    committed = [r for r in result.round_records if r.status == "committed"]
    failed_attempts = [r for r in result.round_records if r.status != "committed"]
    injected = sum(r.fraud_sent for r in result.injection_records)
    rejected = sum(row.failed_tx for row in result.rows)
    tip = next(iter(result.chains.values()))[-1]
    lines = ["run summary", "=" * 11, "", "[config]"]
    lines += config.echo_lines()
    lines += [
        "",
        "[outcome]",
        f"rounds committed = {len(committed)}",
        f"attempts aborted/skipped = {len(failed_attempts)}",
        f"chain height = {tip.height}",
        f"chain tip = {tip.block_hash.hex()}",
        f"transactions committed = {sum(b.header.tx_count for c in result.chains.values() for b in c) // max(len(result.chains), 1)}",
        f"frauds injected = {injected}",
        f"transactions rejected (consolidated rows) = {rejected}",
        f"envelopes dropped by validators = {result.dropped_envelopes}",
        f"auth accepted = {sum(r.auth_accepted for r in result.round_records)}",
        f"auth rejected = {sum(r.auth_rejected for r in result.round_records)}",
        f"stakes = {json.dumps(result.stakes, sort_keys=True)}",
        f"elapsed seconds = {result.elapsed_s:.3f}",
        "",
        "[statistics]  (per-round row = participant with median consensus_ms)",
    ]
    lines += _five_number_table(result.rows)
    return "\n".join(lines) + "\n"


def write_outputs(result: RunResult, out_dir) -> dict[str, str]:
    """Write the four run artifacts into out_dir; returns name -> path."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {
        "metrics.csv": result.csv_text(),
        "injection_log.jsonl": result.injection_log_text(),
        "round_records.jsonl": result.round_records_text(),
        "summary.txt": result.summary_text(),
    }
    paths = {}
    for name, text in artifacts.items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        paths[name] = str(path)
    return paths


# -- analyze ------------------------------------------------------------------

_PAIR_METRICS = (
    "block_tps",
    "preprepare_ms",
    "prepare_ms",
    "commit_ms",
    "sync_ms",
    "consensus_ms",
)
_CORR_COLUMNS = ("ttf_ms", "failed_tx", "block_tps", "pool_tps", "consensus_ms", "sync_ms")


@dataclass
class AnalyzeReport:
    runs: list[str]
    summaries: dict[str, tuple[float, float, float, float, float]]
    pairs: list[dict] = field(default_factory=list)
    correlations: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def text(self) -> str:
        lines = ["analysis report", "=" * 15, "", f"runs = {', '.join(self.runs)}", ""]
        lines.append("[five-number summary, all rows pooled]")
        header = f"{'metric':<14}{'min':>12}{'q1':>12}{'median':>12}{'q3':>12}{'max':>12}"
        lines.append(header)
        for name, (mn, q1, med, q3, mx) in self.summaries.items():
            lines.append(f"{name:<14}{mn:>12.2f}{q1:>12.2f}{med:>12.2f}{q3:>12.2f}{mx:>12.2f}")
        if self.pairs:
            lines += ["", "[median % change between consecutive runs]"]
            for pair in self.pairs:
                lines.append(f"{pair['before']} -> {pair['after']}:")
                for name in _PAIR_METRICS:
                    lines.append(f"  {name:<14}{pair['pct_change'][name]:>+10.2f}%")
        lines += ["", "[pearson correlation, all rows pooled]"]
        names = list(self.correlations)
        lines.append(" " * 14 + "".join(f"{n:>14}" for n in names))
        for a in names:
            cells = []
            for b in names:
                v = self.correlations[a][b]
                cells.append(f"{'undef':>14}" if v is None else f"{v:>14.4f}")
            lines.append(f"{a:<14}" + "".join(cells))
        return "\n".join(lines) + "\n"


def analyze_csvs(named_texts: list[tuple[str, str]]) -> AnalyzeReport:
    """Summaries, pairwise median changes, and correlations for one or more runs."""
    if not named_texts:
        raise ValueError("no csv inputs")
    per_run: list[tuple[str, list[RoundMetrics]]] = []
    for name, text in named_texts:
        try:
            rows = metrics_mod.parse_csv(text)
        except ValueError as exc:
            raise ValueError(f"{name}: {exc}") from None
        if not rows:
            raise ValueError(f"{name}: no data rows")
        per_run.append((name, rows))
    pooled = [row for _, rows in per_run for row in rows]
    summaries = {
        name: metrics_mod.five_number_summary(metrics_mod.column(pooled, name))
        for name in _SUMMARY_METRICS
    }
    pairs = []
    for (name_a, rows_a), (name_b, rows_b) in zip(per_run, per_run[1:]):
        changes = {}
        for metric in _PAIR_METRICS:
            med_a = metrics_mod.five_number_summary(metrics_mod.column(rows_a, metric))[2]
            med_b = metrics_mod.five_number_summary(metrics_mod.column(rows_b, metric))[2]
            changes[metric] = metrics_mod.pct_change(med_a, med_b)
        pairs.append({"before": name_a, "after": name_b, "pct_change": changes})
    correlations: dict[str, dict[str, float | None]] = {}
    if len(pooled) >= 2:
        correlations = metrics_mod.pearson_matrix(
            {name: metrics_mod.column(pooled, name) for name in _CORR_COLUMNS}
        )
    return AnalyzeReport(
        runs=[name for name, _ in per_run],
        summaries=summaries,
        pairs=pairs,
        correlations=correlations,
    )


# -- topology -------------------------------------------------------------------


def topology_rows(n_max: int, brokers: int) -> tuple[list[dict], int | None]:
    """Connection counts for both layouts and the first node count where the
    brokered layout needs fewer links than the full mesh."""
    if n_max < 1 or brokers < 1:
        raise ValueError("n_max and brokers must be at least 1")
    rows = []
    crossover = None
    for n in range(1, n_max + 1):
        brokered = connection_count(n, brokers)
        mesh = p2p_edge_count(n)
        if crossover is None and brokered < mesh:
            crossover = n
        rows.append({"nodes": n, "broker_connections": brokered, "p2p_edges": mesh})
    return rows, crossover


def topology_text(n_max: int, brokers: int) -> str:
    rows, crossover = topology_rows(n_max, brokers)
    lines = [
        f"topology (brokers = {brokers})",
        f"{'nodes':>8}{'broker_connections':>20}{'p2p_edges':>12}",
    ]
    for row in rows:
        marker = "  <- brokered layout cheaper from here" if row["nodes"] == crossover else ""
        lines.append(
            f"{row['nodes']:>8}{row['broker_connections']:>20}{row['p2p_edges']:>12}{marker}"
        )
    if crossover is None:
        lines.append("the full mesh stays cheaper over this range")
    else:
        lines.append(f"computed crossover: n = {crossover}")
    lines.append(f"heuristic crossover (node count equal to broker count): n = {brokers}")
    return "\n".join(lines) + "\n"
