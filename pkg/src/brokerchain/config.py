"""Run configuration: flat `key = value` text with # comments.

Every key has a default; unknown keys and malformed values are rejected
with the offending key named. The parsed set is echoed verbatim into the
run summary so a result can always be traced back to its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class ConfigError(ValueError):
    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class HarnessConfig:
    nodes: int = 3
    stakes: list[int] = field(default_factory=list)  # empty -> seeded uniform
    user_count: int = 1000
    validators_per_round: int = 0  # 0 -> all nodes
    sync_timeout_ms: float = 5000.0
    granularity_s: int = 5
    cap_fraction: float = 0.5
    rounds: int = 130
    block_size: int = 512
    batch_size: int = 64
    fraud_ratio: float = 0.0
    fraud_schedule: str = ""
    partitions: int = 5
    linger_ms: float = 10.0
    min_batch_bytes: int = 64000
    ack_mode: str = "leader"
    broker_count: int = 1
    compression: str = "lz4"
    latency_ms: str = "off"
    mode: str = "seeded"
    rng_seed: int = 5
    pool_tps_formula: str = "processed"

    @property
    def k(self) -> int:
        return self.validators_per_round or self.nodes

    def latency_range(self) -> tuple[float, float] | None:
        if self.latency_ms == "off":
            return None
        lo, hi = (float(part) for part in self.latency_ms.split(":"))
        return (lo, hi)

    def fraud_ratio_for(self, round_num: int) -> float:
        for segment in _schedule_segments(self.fraud_schedule):
            lo, hi, ratio = segment
            if lo <= round_num <= hi:
                return ratio
        return self.fraud_ratio

    def echo_lines(self) -> list[str]:
        out = []
        for key, _coerce, _validate in _KEYS:
            value = getattr(self, _FIELD_FOR[key])
            if key == "deployment.stakes":
                value = ",".join(str(s) for s in value) if value else "auto"
            out.append(f"{key} = {value}")
        return out


def _schedule_segments(text: str) -> list[tuple[int, int, float]]:
    if not text:
        return []
    segments = []
    for chunk in text.split(","):
        span, _, ratio = chunk.partition(":")
        lo, _, hi = span.partition("-")
        segments.append((int(lo), int(hi or lo), float(ratio)))
    return segments


def _parse_bool_off_range(value: str) -> str:
    if value == "off":
        return value
    lo, hi = (float(part) for part in value.split(":"))
    if lo < 0 or hi < lo:
        raise ValueError("range must satisfy 0 <= lo <= hi")
    return value


def _parse_stakes(value: str) -> list[int]:
    if not value or value == "auto":
        return []
    return [int(part) for part in value.split(",")]


# key name -> (coercion, validation) over the raw string
_KEYS: list[tuple[str, object, object]] = [
    ("deployment.nodes", int, lambda v: v >= 1),
    ("deployment.stakes", _parse_stakes, lambda v: all(s >= 0 for s in v)),
    ("deployment.user_count", int, lambda v: v >= 2),
    ("consensus.validators_per_round", int, lambda v: v >= 0),
    ("consensus.sync_timeout_ms", float, lambda v: v > 0),
    ("consensus.granularity_s", int, lambda v: v >= 1),
    ("consensus.cap_fraction", float, lambda v: 0 < v <= 1),
    ("workload.rounds", int, lambda v: v >= 1),
    ("workload.block_size", int, lambda v: v >= 1),
    ("workload.batch_size", int, lambda v: v >= 1),
    ("workload.fraud_ratio", float, lambda v: v >= 0),
    ("workload.fraud_schedule", str, None),
    ("broker.partitions", int, lambda v: v >= 1),
    ("broker.linger_ms", float, lambda v: v >= 0),
    ("broker.min_batch_bytes", int, lambda v: v >= 1),
    ("broker.ack_mode", str, lambda v: v in ("leader", "all")),
    ("broker.broker_count", int, lambda v: v >= 1),
    ("broker.compression", str, lambda v: v in ("lz4", "none")),
    ("broker.latency_ms", _parse_bool_off_range, None),
    ("run.mode", str, lambda v: v in ("real", "seeded")),
    ("run.rng_seed", int, None),
    ("metrics.pool_tps", str, lambda v: v in ("processed", "block")),
]

_FIELD_FOR = {
    "deployment.nodes": "nodes",
    "deployment.stakes": "stakes",
    "deployment.user_count": "user_count",
    "consensus.validators_per_round": "validators_per_round",
    "consensus.sync_timeout_ms": "sync_timeout_ms",
    "consensus.granularity_s": "granularity_s",
    "consensus.cap_fraction": "cap_fraction",
    "workload.rounds": "rounds",
    "workload.block_size": "block_size",
    "workload.batch_size": "batch_size",
    "workload.fraud_ratio": "fraud_ratio",
    "workload.fraud_schedule": "fraud_schedule",
    "broker.partitions": "partitions",
    "broker.linger_ms": "linger_ms",
    "broker.min_batch_bytes": "min_batch_bytes",
    "broker.ack_mode": "ack_mode",
    "broker.broker_count": "broker_count",
    "broker.compression": "compression",
    "broker.latency_ms": "latency_ms",
    "run.mode": "mode",
    "run.rng_seed": "rng_seed",
    "metrics.pool_tps": "pool_tps_formula",
}

_COERCE = {key: coerce for key, coerce, _ in _KEYS}
_VALIDATE = {key: validate for key, _, validate in _KEYS}


def parse_config(text: str) -> HarnessConfig:
    config = HarnessConfig()
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', found {raw.strip()!r}")
        if key not in _FIELD_FOR:
            raise ConfigError(key, "unknown key")
        try:
            parsed = _COERCE[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(key, f"bad value {value!r} ({exc})") from None
        validate = _VALIDATE[key]
        if validate is not None and not validate(parsed):
            raise ConfigError(key, f"value {value!r} out of range")
        setattr(config, _FIELD_FOR[key], parsed)
    _cross_validate(config)
    return config


def _cross_validate(config: HarnessConfig) -> None:
    if config.k > config.nodes:
        raise ConfigError("consensus.validators_per_round", "cannot exceed deployment.nodes")
    if config.stakes and len(config.stakes) != config.nodes:
        raise ConfigError("deployment.stakes", "must list one stake per node")
    if config.fraud_schedule:
        try:
            segments = _schedule_segments(config.fraud_schedule)
        except ValueError as exc:
            raise ConfigError("workload.fraud_schedule", str(exc)) from None
        for lo, hi, ratio in segments:
            if lo < 1 or hi < lo or ratio < 0:
                raise ConfigError("workload.fraud_schedule", f"bad segment {lo}-{hi}:{ratio}")
    try:
        config.latency_range()
    except ValueError as exc:
        raise ConfigError("broker.latency_ms", str(exc)) from None
