"""Pub-sub broker: partitioning, batching, groups, replay, and topology math."""

import hashlib
import random
import time

import pytest

from brokerchain.broker import (
    Broker,
    BrokerConfig,
    DuplicateTopicError,
    UnknownTopicError,
    connection_count,
    p2p_edge_count,
    partition_for_key,
)


class ManualClock:
    def __init__(self, start: float = 0.0) -> None:
        self.t = start

    def now(self) -> float:
        return self.t

    def advance(self, ms: float) -> None:
        self.t += ms


def make_broker(clock=None, **overrides) -> Broker:
    clock = clock or ManualClock()
    config = BrokerConfig(**{"partitions": 5, "linger_ms": 0.0, **overrides})
    broker = Broker(config, clock.now)
    broker.create_topic("t")
    return broker


# -- partition map -------------------------------------------------------------


def reference_partition(key: bytes, partitions: int) -> int:
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") % partitions


def test_partition_map_matches_reference_and_covers_all():
    rng = random.Random(5)
    keys = [rng.randbytes(rng.randint(1, 12)) for _ in range(100)]
    assigned = {}
    for key in keys:
        p = partition_for_key(key, 5)
        assert p == reference_partition(key, 5)
        assert 0 <= p < 5
        assigned.setdefault(p, []).append(key)
    # over 100 random keys every partition should see traffic
    assert set(assigned) == set(range(5))


def test_partition_stability_same_key():
    assert partition_for_key(b"alpha", 5) == partition_for_key(b"alpha", 5)


# -- topics ---------------------------------------------------------------------


def test_create_topic_duplicate_and_unknown():
    broker = make_broker()
    with pytest.raises(DuplicateTopicError):
        broker.create_topic("t")
    with pytest.raises(UnknownTopicError):
        broker.publish("missing", b"k", b"v")


def test_topic_partition_override():
    broker = make_broker()
    broker.create_topic("single", partitions=1)
    consumer = broker.subscribe("single", "g")
    for i in range(10):
        broker.publish("single", f"key-{i}".encode(), b"v")
    got = consumer.poll(max_messages=50)
    assert [m.partition for m in got] == [0] * 10
    assert [m.offset for m in got] == list(range(10))


# -- offsets and FIFO -------------------------------------------------------------


def test_same_key_same_partition_sequential_offsets():
    broker = make_broker()
    o1 = broker.publish("t", b"k", b"m1")
    o2 = broker.publish("t", b"k", b"m2")
    assert (o1, o2) == (0, 1)
    consumer = broker.subscribe("t", "g")
    got = consumer.poll()
    assert [m.value for m in got] == [b"m1", b"m2"]
    assert len({m.partition for m in got}) == 1


def test_per_partition_order_with_interleaved_keys():
    broker = make_broker()
    consumer = broker.subscribe("t", "g")
    rng = random.Random(9)
    keys = [f"user-{i}".encode() for i in range(10)]
    sent: dict[bytes, list[int]] = {k: [] for k in keys}
    for seq in range(200):
        key = rng.choice(keys)
        broker.publish("t", key, seq.to_bytes(4, "big"))
        sent[key].append(seq)
    received: dict[bytes, list[int]] = {k: [] for k in keys}
    while True:
        batch = consumer.poll(max_messages=64)
        if not batch:
            break
        for m in batch:
            received[m.key].append(int.from_bytes(m.value, "big"))
    assert received == sent  # per-key order preserved exactly


# -- batching --------------------------------------------------------------------


def test_linger_zero_is_immediately_visible():
    broker = make_broker()
    consumer = broker.subscribe("t", "g")
    broker.publish("t", b"k", b"v")
    assert [m.value for m in consumer.poll()] == [b"v"]


def test_linger_holds_until_exact_deadline():
    clock = ManualClock()
    broker = make_broker(clock, linger_ms=10.0)
    consumer = broker.subscribe("t", "g")
    broker.publish("t", b"k", b"v")
    clock.advance(9.999)
    assert consumer.poll() == []
    clock.advance(0.001)
    got = consumer.poll()
    assert [m.value for m in got] == [b"v"]
    assert got[0].visible_at_ms == pytest.approx(10.0)


def test_min_batch_bytes_flushes_early():
    clock = ManualClock()
    broker = make_broker(clock, linger_ms=10_000.0, min_batch_bytes=64)
    consumer = broker.subscribe("t", "g")
    broker.publish("t", b"k", b"x" * 80)  # exceeds the threshold alone
    assert len(consumer.poll()) == 1


def test_explicit_flush():
    clock = ManualClock()
    broker = make_broker(clock, linger_ms=10_000.0)
    consumer = broker.subscribe("t", "g")
    broker.publish("t", b"k", b"v")
    assert consumer.poll() == []
    broker.flush("t")
    assert len(consumer.poll()) == 1


def test_next_flush_deadline_tracks_linger():
    clock = ManualClock()
    broker = make_broker(clock, linger_ms=10.0)
    assert broker.next_flush_deadline() is None
    clock.advance(5.0)
    broker.publish("t", b"k", b"v")
    assert broker.next_flush_deadline() == pytest.approx(15.0)


def test_end_offsets_counts_published_not_flushed():
    clock = ManualClock()
    broker = make_broker(clock, linger_ms=10_000.0)
    for i in range(7):
        broker.publish("t", f"k{i}".encode(), b"v")
    assert broker.end_offsets("t") == 7


# -- consumer groups -------------------------------------------------------------


def test_two_groups_both_receive():
    broker = make_broker()
    g1 = broker.subscribe("t", "g1")
    g2 = broker.subscribe("t", "g2")
    broker.publish("t", b"k", b"v")
    assert len(g1.poll()) == 1
    assert len(g2.poll()) == 1


def test_group_members_split_partitions_without_duplicates():
    broker = make_broker()
    c1 = broker.subscribe("t", "g")
    c2 = broker.subscribe("t", "g")
    for i in range(100):
        broker.publish("t", f"key-{i}".encode(), i.to_bytes(4, "big"))
    seen: dict[tuple[int, int], int] = {}
    for consumer in (c1, c2):
        while True:
            batch = consumer.poll(max_messages=32)
            if not batch:
                break
            for m in batch:
                slot = (m.partition, m.offset)
                seen[slot] = seen.get(slot, 0) + 1
    assert len(seen) == 100  # nothing lost
    assert set(seen.values()) == {1}  # nothing duplicated within the group


def test_subscribe_then_publish_receives():
    broker = make_broker()
    consumer = broker.subscribe("t", "g")
    broker.publish("t", b"k", b"v")
    assert len(consumer.poll()) == 1


def test_late_group_sees_full_history():
    broker = make_broker()
    for i in range(5):
        broker.publish("t", b"k", bytes([i]))
    late = broker.subscribe("t", "latecomer")
    assert len(late.poll()) == 5


def test_poll_timeout_on_empty_topic_real_clock():
    broker = Broker(BrokerConfig(partitions=1, linger_ms=0.0), lambda: time.monotonic() * 1000.0)
    broker.create_topic("t")
    consumer = broker.subscribe("t", "g")
    started = time.monotonic()
    assert consumer.poll(timeout_ms=10.0) == []
    waited_ms = (time.monotonic() - started) * 1000.0
    assert 8.0 <= waited_ms < 200.0


# -- replay ----------------------------------------------------------------------


def test_replay_full_suffix_and_idempotence():
    broker = make_broker()
    consumer = broker.subscribe("t", "g")
    for i in range(10):
        broker.publish("t", b"same-key", bytes([i]))
    assert len(broker.replay("t")) == 10
    suffix = broker.replay("t", from_offset=6)
    assert [m.value for m in suffix] == [bytes([i]) for i in range(6, 10)]
    assert broker.replay("t") == broker.replay("t")
    # replay consumed nothing: the group still gets everything
    assert len(consumer.poll(max_messages=50)) == 10


# -- latency injection --------------------------------------------------------------


def test_latency_injection_is_seeded_and_deferred():
    def run(seed: int) -> list[float]:
        clock = ManualClock()
        broker = Broker(
            BrokerConfig(partitions=1, linger_ms=0.0, latency_range_ms=(5.0, 15.0), latency_seed=seed),
            clock.now,
        )
        broker.create_topic("t")
        consumer = broker.subscribe("t", "g")
        for i in range(10):
            broker.publish("t", b"k", bytes([i]))
        assert consumer.poll() == []  # nothing visible before the latency elapses
        clock.advance(15.0)
        return [m.visible_at_ms for m in consumer.poll(max_messages=20)]

    first = run(1)
    assert run(1) == first
    assert run(2) != first
    assert all(5.0 <= v <= 15.0 for v in first)


def test_head_of_line_blocking_orders_delivery():
    clock = ManualClock()
    broker = Broker(BrokerConfig(partitions=1, linger_ms=0.0), clock.now)
    broker.create_topic("t")
    consumer = broker.subscribe("t", "g")
    broker.publish("t", b"k", b"later", ts_ms=50.0)  # producer ahead of the clock
    broker.publish("t", b"k", b"early", ts_ms=51.0)
    assert consumer.poll() == []
    clock.advance(60.0)
    assert [m.value for m in consumer.poll()] == [b"later", b"early"]


# -- topology model ----------------------------------------------------------------


def test_connection_count_examples():
    assert connection_count(4, 1) == 4
    assert connection_count(10, 3) == 30
    assert connection_count(1, 1) == 1


def test_p2p_edge_count_examples():
    assert p2p_edge_count(4) == 6
    assert p2p_edge_count(1) == 0


def test_closed_forms_over_wide_range():
    for n in range(1, 1001):
        assert connection_count(n, 3) == 3 * n
        assert p2p_edge_count(n) == n * (n - 1) // 2


def test_first_crossover_with_three_brokers_is_eight():
    crossover = next(
        n for n in range(1, 51) if connection_count(n, 3) < p2p_edge_count(n)
    )
    assert crossover == 8
    assert connection_count(8, 3) == 24
    assert p2p_edge_count(8) == 28
