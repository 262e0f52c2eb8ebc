"""Master node: registry governance, verifiable stake-weighted selection, and
round coordination via Ready/Proceed barriers.

Selection uses the exponent-key construction: every proposer gets a uniform
draw from a public seed and is ranked by u ** (1/stake), so the draw is
reproducible by anyone holding the seed, and a single pick lands on a node
with probability exactly proportional to its stake.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import Enum

from .broker import Broker
from .consensus import (
    BARRIERS,
    TOPIC_BLOCKS,
    TOPIC_COMMIT,
    TOPIC_PREPARE,
    TOPIC_PREPREPARE,
    TOPIC_PROCEED,
    TOPIC_PROPOSALS,
    TOPIC_READY,
    TOPIC_SELECTION,
    TOPIC_TRANSACTIONS,
)
from .core import Block, KeyPair, make_genesis, sha256
from .messages import (
    AbortNotice,
    BlockAnnounce,
    Envelope,
    Proceed,
    Ready,
    Selection,
    StakeProposal,
    make_envelope,
    parse_envelope,
    verify_envelope,
)
from .runtime import CostModel, SimActor

log = logging.getLogger(__name__)


class NodeStatus(Enum):
    ACTIVE = "Active"
    DENIED = "Denied"


@dataclass
class RegistryEntry:
    node_id: str
    public_bytes: bytes
    stake: int
    status: NodeStatus = NodeStatus.ACTIVE


class Registry:
    def __init__(self) -> None:
        self._entries: dict[str, RegistryEntry] = {}

    def register_validator(self, node_id: str, public_bytes: bytes, stake: int) -> RegistryEntry:
        if node_id in self._entries:
            raise ValueError(f"node {node_id!r} already registered")
        if stake < 0:
            raise ValueError("stake cannot be negative")
        entry = RegistryEntry(node_id, public_bytes, stake)
        self._entries[node_id] = entry
        return entry

    def deny(self, node_id: str) -> None:
        self._entries[node_id].status = NodeStatus.DENIED

    def get(self, node_id: str) -> RegistryEntry | None:
        return self._entries.get(node_id)

    def size(self) -> int:
        return len(self._entries)

    def active_ids(self) -> list[str]:
        return [e.node_id for e in self._entries.values() if e.status is NodeStatus.ACTIVE]

    def public_keys(self) -> dict[str, bytes]:
        return {e.node_id: e.public_bytes for e in self._entries.values()}


def authenticate(registry: Registry, env: Envelope) -> tuple[bool, str]:
    """Gatekeeping for every consumed envelope: identity, status, signature."""
    entry = registry.get(env.sender)
    if entry is None:
        return False, "Unknown"
    if entry.status is NodeStatus.DENIED:
        return False, "Denied"
    if not verify_envelope(env, entry.public_bytes):
        return False, "BadSignature"
    return True, ""


def enforce_stake_cap(registry: Registry, proposals: dict[str, int], cap_fraction: float) -> set[str]:
    """Deny every proposer whose share of the proposed total exceeds the cap.

    Shares are taken against the original total in one pass. If denial would
    leave no proposer at all, nobody is denied: a chain with a single staker
    has no monopoly to break, and halting it would serve no one.
    """
    total = sum(proposals.values())
    if total <= 0:
        return set()
    over = {node for node, stake in proposals.items() if stake / total > cap_fraction}
    if not over or len(proposals) == len(over):
        return set()
    for node in over:
        registry.deny(node)
    return over


def _round_bytes(round_num: int) -> bytes:
    return struct.pack("<Q", round_num)


def selection_seed(seed_base: bytes, round_num: int, last_block_hash: bytes) -> bytes:
    """Seed chain: each round's randomness commits to the previous block."""
    return sha256(seed_base + _round_bytes(round_num) + last_block_hash)


def select_validators(eligible: dict[str, int], round_num: int, seed: bytes, k: int) -> list[str]:
    """Top-k proposers by stake-exponent key; deterministic and recomputable."""
    if k < 1:
        raise ValueError("k must be at least 1")
    scored: list[tuple[float, str]] = []
    for node_id, stake in eligible.items():
        draw = sha256(seed + _round_bytes(round_num) + node_id.encode())
        u = (int.from_bytes(draw[:8], "big") + 0.5) / 2.0**64
        key = u ** (1.0 / stake) if stake > 0 else 0.0
        scored.append((key, node_id))
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [node_id for _, node_id in scored[: min(k, len(scored))]]


@dataclass
class RoundRecord:
    round: int
    attempt: int
    status: str  # committed | aborted | skipped
    proposals: dict[str, int]
    selection: list[str]
    seed_hex: str
    block_hash_hex: str = ""
    reason: str = ""
    auth_accepted: int = 0
    auth_rejected: int = 0
    denied: list[str] = field(default_factory=list)


class ConsensusStalled(RuntimeError):
    pass


@dataclass(frozen=True)
class MasterConfig:
    validators_per_round: int
    cap_fraction: float
    sync_timeout_ms: float
    rounds: int
    seed_base: bytes
    max_consecutive_aborts: int = 3


class MasterActor(SimActor):
    def __init__(
        self,
        keypair: KeyPair,
        registry: Registry,
        broker: Broker,
        config: MasterConfig,
        clock,
        modeled_time: bool,
        costs: CostModel,
    ) -> None:
        super().__init__("master", clock, modeled_time)
        self.keypair = keypair
        self.registry = registry
        self.broker = broker
        self.config = config
        self.costs = costs
        self.records: list[RoundRecord] = []

        self._consumers = {
            topic: broker.subscribe(topic, "master")
            for topic in (
                TOPIC_PROPOSALS,
                TOPIC_READY,
                TOPIC_BLOCKS,
                TOPIC_PREPREPARE,
                TOPIC_PREPARE,
                TOPIC_COMMIT,
            )
        }
        self.round = 1
        self.attempt = 1
        self.stage = "collect_proposals"
        self._deadline: float | None = None
        self._proposals: dict[str, int] = {}
        self._selected: tuple[str, ...] = ()
        self._seed = b""
        self._denied_this_round: list[str] = []
        self._ready: dict[tuple[int, str], set[str]] = {}
        self._abort_reason: str | None = None
        self._auth_accepted = 0
        self._auth_rejected = 0
        self._last_height = 0
        self._last_hash = make_genesis().block_hash
        self._volume_mark = 0
        self._round_volume = 0
        self.consecutive_aborts = 0

    # -- intake -------------------------------------------------------------

    def _authenticated(self, raw: bytes) -> Envelope | None:
        env = parse_envelope(raw)
        ok, _reason = authenticate(self.registry, env)
        if ok:
            self._auth_accepted += 1
            return env
        self._auth_rejected += 1
        return None

    def _pump(self) -> bool:
        progressed = False
        for msg in self._consumers[TOPIC_PROPOSALS].poll(max_messages=50):
            progressed = True
            env = self._authenticated(msg.value)
            if env is None or env.round != self.round:
                continue
            proposal = StakeProposal.from_bytes(env.body)
            entry = self.registry.get(proposal.node_id)
            if entry is None or proposal.node_id != env.sender or proposal.stake != entry.stake:
                self._auth_rejected += 1
                self._auth_accepted -= 1
                continue
            if proposal.stake <= 0:
                continue  # zero stake is never eligible
            self._proposals.setdefault(proposal.node_id, proposal.stake)
        for msg in self._consumers[TOPIC_READY].poll(max_messages=100):
            progressed = True
            env = self._authenticated(msg.value)
            if env is None:
                continue
            if env.phase == "abort":
                notice = AbortNotice.from_bytes(env.body)
                if env.round == self.round:
                    self._abort_reason = f"{notice.node_id}: {notice.reason}"
                continue
            ready = Ready.from_bytes(env.body)
            self._ready.setdefault((env.round, ready.barrier), set()).add(ready.node_id)
        for msg in self._consumers[TOPIC_BLOCKS].poll(max_messages=20):
            progressed = True
            env = self._authenticated(msg.value)
            if env is None:
                continue
            ann = BlockAnnounce.from_bytes(env.body)
            if ann.height == self._last_height + 1:
                block = Block.from_bytes(ann.block_bytes)
                self._last_height = ann.height
                self._last_hash = block.block_hash
        for topic in (TOPIC_PREPREPARE, TOPIC_PREPARE, TOPIC_COMMIT):
            for msg in self._consumers[topic].poll(max_messages=100):
                progressed = True
                self._authenticated(msg.value)  # audit trail only
        return progressed

    # -- publishing -----------------------------------------------------------

    def _broadcast(self, topic: str, phase: str, body: bytes) -> None:
        env = make_envelope(self.keypair, self.actor_id, self.round, phase, body)
        self.broker.publish(topic, b"master", env.to_bytes(), ts_ms=self.local_now())
        self.broker.flush(topic)

    # -- main loop --------------------------------------------------------------

    def step(self) -> bool:
        if self.done:
            return False
        progressed = self._pump()
        if self.stage == "collect_proposals":
            return self._stage_collect() or progressed
        if self.stage.startswith("barrier:"):
            return self._stage_barrier(self.stage.split(":", 1)[1]) or progressed
        return progressed

    def next_wakeup(self) -> float | None:
        return self._deadline

    def _stage_collect(self) -> bool:
        if self._deadline is None:
            self._deadline = self.local_now() + 4 * self.config.sync_timeout_ms
        if self._abort_reason is not None:
            self._finish_attempt("aborted", self._abort_reason)
            return True
        eligible = {
            node: stake
            for node, stake in self._proposals.items()
            if self.registry.get(node) is not None
            and self.registry.get(node).status is NodeStatus.ACTIVE
        }
        expected = {
            node for node in self.registry.active_ids() if self.registry.get(node).stake > 0
        }
        caught_up = self._last_height == self.round - 1
        timed_out = self.local_now() > self._deadline
        if not caught_up:
            return False
        # Hold the selection until every live staker has proposed, so stake
        # shares (and the cap) are judged against the full field; the window
        # deadline is the escape hatch for unresponsive nodes.
        if not expected <= set(eligible) and not timed_out:
            return False
        if not eligible:
            self._finish_attempt("skipped", "no eligible proposals before timeout")
            return True
        denied = enforce_stake_cap(self.registry, dict(eligible), self.config.cap_fraction)
        self._denied_this_round = sorted(denied)
        for node in denied:
            eligible.pop(node, None)
        if not eligible:
            self._finish_attempt("skipped", "stake cap left no eligible proposer")
            return True
        self._round_volume = self.broker.end_offsets(TOPIC_TRANSACTIONS) - self._volume_mark
        self._seed = selection_seed(self.config.seed_base, self.round, self._last_hash)
        chosen = select_validators(eligible, self.round, self._seed, min(len(eligible), self.config.validators_per_round))
        self.charge(self.costs.master_selection())
        self._selected = tuple(chosen)
        self._broadcast(
            TOPIC_SELECTION,
            "selection",
            Selection(self.round, self._seed, self._selected).to_bytes(),
        )
        self._enter_barrier("preprepare")
        return True

    def _enter_barrier(self, barrier: str) -> None:
        self.stage = f"barrier:{barrier}"
        self._deadline = self.local_now() + self.config.sync_timeout_ms

    def _stage_barrier(self, barrier: str) -> bool:
        if self._abort_reason is not None and barrier != "sync":
            self._finish_attempt("aborted", self._abort_reason)
            return True
        ready = self._ready.get((self.round, barrier), set())
        if not set(self._selected) <= ready:
            if self.local_now() > self._deadline:
                missing = sorted(set(self._selected) - ready)
                if barrier == "sync":
                    # Post-commit: the block is final, so keep waiting.
                    log.warning("round %d: sync barrier slow, missing %s", self.round, missing)
                    self._deadline = self.local_now() + self.config.sync_timeout_ms
                    return False
                self._finish_attempt("aborted", f"{barrier} barrier timeout, missing {missing}")
                return True
            return False
        self.charge(self.costs.master_barrier(self._round_volume))
        self._broadcast(TOPIC_PROCEED, "proceed", Proceed(barrier, ok=True).to_bytes())
        idx = BARRIERS.index(barrier)
        if idx + 1 < len(BARRIERS):
            self._enter_barrier(BARRIERS[idx + 1])
        else:
            self._finish_attempt("committed", "")
        return True

    def _finish_attempt(self, status: str, reason: str) -> None:
        if status != "committed":
            self._broadcast(
                TOPIC_PROCEED,
                "proceed",
                Proceed(self._current_barrier(), ok=False, reason=reason).to_bytes(),
            )
        self.charge(self.costs.master_audit())
        self.records.append(
            RoundRecord(
                round=self.round,
                attempt=self.attempt,
                status=status,
                proposals=dict(self._proposals),
                selection=list(self._selected),
                seed_hex=self._seed.hex(),
                block_hash_hex=self._last_hash.hex() if status == "committed" else "",
                reason=reason,
                auth_accepted=self._auth_accepted,
                auth_rejected=self._auth_rejected,
                denied=list(self._denied_this_round),
            )
        )
        self._auth_accepted = 0
        self._auth_rejected = 0
        for barrier in BARRIERS:
            self._ready.pop((self.round, barrier), None)
        self._proposals = {}
        self._selected = ()
        self._abort_reason = None
        self._denied_this_round = []
        self._deadline = None
        if status == "committed":
            self.consecutive_aborts = 0
            self._volume_mark = self.broker.end_offsets(TOPIC_TRANSACTIONS)
            self.round += 1
            self.attempt = 1
            if self.round > self.config.rounds:
                self.done = True
                self.stage = "finished"
                return
        else:
            self.consecutive_aborts += 1
            log.warning("round %d attempt %d %s: %s", self.round, self.attempt, status, reason)
            if self.consecutive_aborts > self.config.max_consecutive_aborts:
                raise ConsensusStalled(
                    f"{self.consecutive_aborts} consecutive failed rounds at round {self.round}"
                )
            self.attempt += 1
        self.stage = "collect_proposals"

    def _current_barrier(self) -> str:
        if self.stage.startswith("barrier:"):
            return self.stage.split(":", 1)[1]
        return "preprepare"

