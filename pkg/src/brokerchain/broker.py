"""In-process partitioned pub-sub broker with Kafka-style delivery semantics.

One broker object stands in for the whole cluster: named topics, hashed key
partitioning, per-partition FIFO offsets, producer batching (linger time and
minimum batch size), consumer groups that split partitions, and a
non-consuming replay view for auditors. Retention is unbounded, so a group
subscribing late still sees the full log.
"""

from __future__ import annotations

import heapq
import random
import threading
from dataclasses import dataclass, field

from .core import sha256


class UnknownTopicError(ValueError):
    pass


class DuplicateTopicError(ValueError):
    pass


@dataclass(frozen=True)
class BrokerConfig:
    partitions: int = 5
    linger_ms: float = 10.0
    min_batch_bytes: int = 64000
    ack_mode: str = "leader"  # leader | all; equivalent on a single broker
    broker_count: int = 1
    compression: str = "lz4"  # recorded for parity, applied as a no-op
    latency_range_ms: tuple[float, float] | None = None
    latency_seed: int = 0

    def __post_init__(self) -> None:
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")
        if self.linger_ms < 0 or self.min_batch_bytes < 1:
            raise ValueError("bad batching parameters")
        if self.ack_mode not in ("leader", "all"):
            raise ValueError(f"unknown ack_mode {self.ack_mode!r}")
        if self.latency_range_ms is not None:
            lo, hi = self.latency_range_ms
            if lo < 0 or hi < lo:
                raise ValueError("latency range must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class Message:
    topic: str
    partition: int
    offset: int
    key: bytes
    value: bytes
    publish_time_ms: float
    visible_at_ms: float = field(default=0.0, compare=False)


def partition_for_key(key: bytes, partitions: int) -> int:
    """Stable mapping: first 8 bytes of SHA-256(key), big-endian, mod partitions."""
    return int.from_bytes(sha256(key)[:8], "big") % partitions


class _Partition:
    def __init__(self) -> None:
        self.log: list[Message] = []  # offset-ordered, each with visible_at_ms set
        self.pending: list[Message] = []
        self.pending_bytes = 0
        self.pending_since: float | None = None
        self.next_offset = 0


class _Topic:
    def __init__(self, name: str, partitions: int) -> None:
        self.name = name
        self.partitions = [_Partition() for _ in range(partitions)]


class _Group:
    def __init__(self, partitions: int) -> None:
        self.members: list[Consumer] = []
        self.cursors = [0] * partitions  # next offset to deliver, shared by the group


class Consumer:
    """Handle returned by subscribe; poll through the broker."""

    def __init__(self, broker: Broker, topic: str, group_id: str, index: int) -> None:
        self.broker = broker
        self.topic = topic
        self.group_id = group_id
        self.index = index

    def poll(self, max_messages: int = 100, timeout_ms: float = 0.0) -> list[Message]:
        return self.broker.poll(self, max_messages=max_messages, timeout_ms=timeout_ms)


class Broker:
    def __init__(self, config: BrokerConfig, now_ms) -> None:
        """now_ms is the shared clock callable (virtual or wall)."""
        self.config = config
        self.now_ms = now_ms
        self._topics: dict[str, _Topic] = {}
        self._groups: dict[tuple[str, str], _Group] = {}
        self._lock = threading.RLock()
        self._delivered = threading.Condition(self._lock)
        self._latency_rng = random.Random(config.latency_seed)
        self._future_visible: list[float] = []

    # -- topology accounting ------------------------------------------------

    def create_topic(self, name: str, partitions: int | None = None) -> None:
        with self._lock:
            if name in self._topics:
                raise DuplicateTopicError(f"topic {name!r} already exists")
            if partitions is not None and partitions < 1:
                raise ValueError("partitions must be >= 1")
            self._topics[name] = _Topic(name, partitions or self.config.partitions)

    def topics(self) -> list[str]:
        with self._lock:
            return sorted(self._topics)

    def _topic(self, name: str) -> _Topic:
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopicError(f"unknown topic {name!r}") from None

    # -- producing ----------------------------------------------------------

    def publish(self, topic: str, key: bytes, value: bytes, ts_ms: float | None = None) -> int:
        """Append to the keyed partition's buffer; returns the acknowledged offset."""
        with self._lock:
            t = self._topic(topic)
            now = self.now_ms() if ts_ms is None else ts_ms
            self._release_due(now)
            pidx = partition_for_key(key, len(t.partitions))
            part = t.partitions[pidx]
            msg = Message(
                topic=topic,
                partition=pidx,
                offset=part.next_offset,
                key=key,
                value=value,
                publish_time_ms=now,
            )
            part.next_offset += 1
            if part.pending_since is None:
                part.pending_since = now
            part.pending.append(msg)
            part.pending_bytes += len(value) + len(key)
            if part.pending_bytes >= self.config.min_batch_bytes:
                self._flush_partition(part, now)
            return msg.offset

    def flush(self, topic: str) -> None:
        """Force all buffered messages of a topic into the visible log now."""
        with self._lock:
            now = self.now_ms()
            for part in self._topic(topic).partitions:
                self._flush_partition(part, now)

    def _flush_partition(self, part: _Partition, at_ms: float) -> None:
        if not part.pending:
            part.pending_since = None
            return
        now = self.now_ms()
        for msg in part.pending:
            # A producer running ahead of the shared clock (modeled work in
            # progress) must not have its message visible before it was sent.
            visible = max(at_ms, msg.publish_time_ms)
            if self.config.latency_range_ms is not None:
                lo, hi = self.config.latency_range_ms
                visible += self._latency_rng.uniform(lo, hi)
            part.log.append(
                Message(
                    topic=msg.topic,
                    partition=msg.partition,
                    offset=msg.offset,
                    key=msg.key,
                    value=msg.value,
                    publish_time_ms=msg.publish_time_ms,
                    visible_at_ms=visible,
                )
            )
            if visible > now:
                heapq.heappush(self._future_visible, visible)
        part.pending.clear()
        part.pending_bytes = 0
        part.pending_since = None
        self._delivered.notify_all()

    def _release_due(self, now: float) -> None:
        """Flush every buffer whose linger window has elapsed."""
        for t in self._topics.values():
            for part in t.partitions:
                if part.pending_since is not None:
                    deadline = part.pending_since + self.config.linger_ms
                    if deadline <= now:
                        self._flush_partition(part, deadline)

    def next_flush_deadline(self) -> float | None:
        """Earliest pending linger deadline or future visibility instant.

        Lets a virtual-clock driver jump exactly to the next delivery event.
        """
        with self._lock:
            now = self.now_ms()
            deadlines = [
                part.pending_since + self.config.linger_ms
                for t in self._topics.values()
                for part in t.partitions
                if part.pending_since is not None
            ]
            while self._future_visible and self._future_visible[0] <= now:
                heapq.heappop(self._future_visible)
            if self._future_visible:
                deadlines.append(self._future_visible[0])
            return min(deadlines) if deadlines else None

    def end_offsets(self, topic: str) -> int:
        """Total messages ever published to a topic, across partitions."""
        with self._lock:
            return sum(part.next_offset for part in self._topic(topic).partitions)

    # -- consuming ----------------------------------------------------------

    def subscribe(self, topic: str, group_id: str) -> Consumer:
        """Join a consumer group on a topic; triggers partition reassignment."""
        with self._lock:
            t = self._topic(topic)
            key = (topic, group_id)
            group = self._groups.get(key)
            if group is None:
                group = _Group(len(t.partitions))
                self._groups[key] = group
            consumer = Consumer(self, topic, group_id, index=len(group.members))
            group.members.append(consumer)
            for i, member in enumerate(group.members):
                member.index = i
            return consumer

    def _assigned_partitions(self, consumer: Consumer) -> list[int]:
        group = self._groups[(consumer.topic, consumer.group_id)]
        n = len(group.members)
        return [p for p in range(len(group.cursors)) if p % n == consumer.index]

    def poll(self, consumer: Consumer, max_messages: int = 100, timeout_ms: float = 0.0) -> list[Message]:
        """Deliver up to max_messages visible messages in per-partition offset order.

        A positive timeout blocks on the wall clock until something arrives;
        cooperative drivers always poll with timeout 0.
        """
        with self._lock:
            out = self._poll_once(consumer, max_messages)
            if out or timeout_ms <= 0:
                return out
            deadline = self.now_ms() + timeout_ms
            while not out:
                remaining = deadline - self.now_ms()
                if remaining <= 0:
                    break
                self._delivered.wait(timeout=min(remaining, self.config.linger_ms) / 1000.0)
                out = self._poll_once(consumer, max_messages)
            return out

    def _poll_once(self, consumer: Consumer, max_messages: int) -> list[Message]:
        now = self.now_ms()
        self._release_due(now)
        t = self._topic(consumer.topic)
        group = self._groups[(consumer.topic, consumer.group_id)]
        out: list[Message] = []
        for pidx in self._assigned_partitions(consumer):
            part = t.partitions[pidx]
            cursor = group.cursors[pidx]
            while cursor < len(part.log) and len(out) < max_messages:
                msg = part.log[cursor]
                if msg.visible_at_ms > now:
                    break  # head-of-line: later offsets stay queued
                out.append(msg)
                cursor += 1
            group.cursors[pidx] = cursor
            if len(out) >= max_messages:
                break
        return out

    def replay(self, topic: str, from_offset: int = 0) -> list[Message]:
        """Auditor view: every currently visible message, without consuming.

        from_offset applies per partition, mirroring offset semantics.
        """
        with self._lock:
            now = self.now_ms()
            self._release_due(now)
            out: list[Message] = []
            for part in self._topic(topic).partitions:
                out.extend(
                    m for m in part.log if m.visible_at_ms <= now and m.offset >= from_offset
                )
            out.sort(key=lambda m: (m.partition, m.offset))
            return out


def connection_count(nodes: int, brokers: int) -> int:
    """Links in the brokered layout: every node connects to every broker."""
    if nodes < 0 or brokers < 0:
        raise ValueError("counts must be non-negative")
    return nodes * brokers


def p2p_edge_count(nodes: int) -> int:
    """Edges in a full mesh of the same node count."""
    if nodes < 0:
        raise ValueError("counts must be non-negative")
    return nodes * (nodes - 1) // 2
