"""Execution backends for the simulation: real threads or a seeded virtual clock.

Actors are non-blocking state machines exposing step(). The real driver runs
one thread per actor against the wall clock, so timings are genuine
measurements. The seeded driver steps actors in a fixed rotation against a
virtual clock and charges work durations from a seeded cost model, which
makes entire runs, timing columns included, bit-reproducible.
"""

from __future__ import annotations

import hashlib
import logging
import random
import threading
import time

log = logging.getLogger(__name__)

VIRTUAL_EPOCH_MS = 1_700_000_000_000.0


class VirtualClock:
    def __init__(self, start_ms: float = VIRTUAL_EPOCH_MS) -> None:
        self._now = start_ms

    def now_ms(self) -> float:
        return self._now

    def advance_to(self, t_ms: float) -> None:
        if t_ms < self._now:
            raise ValueError("virtual clock cannot move backwards")
        self._now = t_ms


class RealClock:
    """Monotonic milliseconds anchored to the wall clock at construction."""

    def __init__(self) -> None:
        self._anchor = time.time() * 1000.0 - time.monotonic() * 1000.0

    def now_ms(self) -> float:
        return self._anchor + time.monotonic() * 1000.0


class CostModel:
    """Seeded work durations for modeled time, in milliseconds.

    Centered on desk-scale magnitudes: several hundred ms to assemble or
    check a full block, low single digits for bookkeeping, and a small
    per-message term that lets coordination cost grow with traffic volume.
    """

    VERIFY_TX_MS = 2.42
    BUILD_BLOCK_MS = 205.0
    VALIDATE_BLOCK_MS = 205.0
    COMMIT_MS = 13.0
    GENERATE_TX_MS = 0.045
    MASTER_BARRIER_BASE_MS = 0.2
    MASTER_PER_MESSAGE_MS = 0.0015

    def __init__(self, seed: int, actor_id: str) -> None:
        digest = hashlib.sha256(f"{seed}|cost|{actor_id}".encode()).digest()
        self._rng = random.Random(int.from_bytes(digest[:8], "big"))

    def _gauss(self, mean: float, sigma: float) -> float:
        return max(0.001, self._rng.gauss(mean, sigma))

    def verify_batch(self, count: int) -> float:
        return count * self.VERIFY_TX_MS * (1.0 + self._rng.gauss(0.0, 0.012))

    def build_block(self) -> float:
        return self._gauss(self.BUILD_BLOCK_MS, 1.5)

    def validate_block(self) -> float:
        return self._gauss(self.VALIDATE_BLOCK_MS, 1.5)

    def commit_block(self) -> float:
        return self._gauss(self.COMMIT_MS, 0.5)

    def propose(self) -> float:
        return self._gauss(1.0, 0.1)

    def selection_ack(self) -> float:
        return self._gauss(0.5, 0.05)

    def generate_batch(self, count: int) -> float:
        return count * self.GENERATE_TX_MS * (1.0 + self._rng.gauss(0.0, 0.02))

    def master_barrier(self, message_volume: int) -> float:
        return self._gauss(self.MASTER_BARRIER_BASE_MS, 0.05) + (
            self.MASTER_PER_MESSAGE_MS * message_volume
        )

    def master_selection(self) -> float:
        return self._gauss(1.5, 0.15)

    def master_audit(self) -> float:
        return self._gauss(3.0, 0.2)


class SimActor:
    """Base for stepwise actors runnable on either driver.

    In modeled time an actor charges its work via charge(); the driver skips
    it until the charge elapses, and local_now() reflects work in progress.
    In real time charge() is a no-op because the work itself took the time.
    """

    def __init__(self, actor_id: str, clock, modeled_time: bool) -> None:
        self.actor_id = actor_id
        self.clock = clock
        self.modeled_time = modeled_time
        self.busy_until = float("-inf")
        self.done = False
        self.failure: Exception | None = None

    def local_now(self) -> float:
        if self.modeled_time:
            return max(self.clock.now_ms(), self.busy_until)
        return self.clock.now_ms()

    def charge(self, duration_ms: float) -> float:
        if self.modeled_time:
            self.busy_until = self.local_now() + duration_ms
        return duration_ms

    def step(self) -> bool:
        """Do one unit of work; True if any progress was made."""
        raise NotImplementedError

    def next_wakeup(self) -> float | None:
        """Earliest future instant at which this actor has scheduled work."""
        return None


class SimulationStalled(RuntimeError):
    pass


def run_cooperative(actors: list[SimActor], clock: VirtualClock, broker, max_rotations: int) -> None:
    """Deterministic driver: fixed rotation, virtual clock jumps to deadlines."""
    rotations = 0
    while True:
        live = [a for a in actors if not a.done]
        if not live:
            return
        rotations += 1
        if rotations > max_rotations:
            stuck = ", ".join(f"{a.actor_id}" for a in live)
            raise SimulationStalled(f"no progress after {max_rotations} rotations; live: {stuck}")
        progressed = False
        now = clock.now_ms()
        for actor in live:
            if actor.busy_until > now:
                continue
            if actor.step():
                progressed = True
            if actor.failure is not None:
                raise actor.failure
        if progressed:
            continue
        deadlines = [a.busy_until for a in live if a.busy_until > now]
        flush = broker.next_flush_deadline()
        if flush is not None and flush > now:
            deadlines.append(flush)
        for actor in live:
            wake = actor.next_wakeup()
            if wake is not None and wake > now:
                deadlines.append(wake)
        clock.advance_to(min(deadlines) if deadlines else now + 1.0)


def run_threaded(actors: list[SimActor], deadline_s: float) -> None:
    """Wall-clock driver: one thread per actor, stopped on a shared event."""
    stop = threading.Event()

    def loop(actor: SimActor) -> None:
        try:
            while not stop.is_set() and not actor.done:
                if not actor.step():
                    time.sleep(0.0002)
        except Exception as exc:  # surfaced to the caller below
            actor.failure = exc
            stop.set()

    threads = [threading.Thread(target=loop, args=(a,), name=a.actor_id) for a in actors]
    for t in threads:
        t.start()
    started = time.monotonic()
    try:
        while any(t.is_alive() for t in threads):
            if time.monotonic() - started > deadline_s:
                stop.set()
                for t in threads:
                    t.join(timeout=2.0)
                raise SimulationStalled(f"run exceeded the {deadline_s:.0f}s watchdog")
            time.sleep(0.01)
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=2.0)
    for actor in actors:
        if actor.failure is not None:
            raise actor.failure
    if any(not a.done for a in actors):
        raise SimulationStalled("driver stopped before all actors finished")
