"""Leaderless PBFT validator: phase automaton, voting, and barrier handling.

Every selected validator assembles the block itself from its own pool, so
the three PBFT exchanges compare block hashes instead of shipping a
leader's proposal. A master-coordinated Ready/Proceed barrier precedes each
phase; quantized block timestamps make independently built blocks
byte-identical inside one window.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from . import metrics as metrics_mod
from .broker import Broker
from .core import (
    Block,
    KeyPair,
    LedgerState,
    Transaction,
    build_block,
    make_genesis,
    validate_block,
    apply_block,
)
from .mempool import Mempool
from .messages import (
    AbortNotice,
    BlockAnnounce,
    Proceed,
    Ready,
    Selection,
    StakeProposal,
    Vote,
    make_envelope,
    parse_envelope,
    verify_envelope,
)
from .runtime import CostModel, SimActor

log = logging.getLogger(__name__)

TOPIC_TRANSACTIONS = "transactions"
TOPIC_PROPOSALS = "stake-proposals"
TOPIC_SELECTION = "selection"
TOPIC_READY = "ready"
TOPIC_PROCEED = "proceed"
TOPIC_PREPREPARE = "preprepare"
TOPIC_PREPARE = "prepare"
TOPIC_COMMIT = "commit"
TOPIC_BLOCKS = "blocks"

ALL_TOPICS = (
    TOPIC_TRANSACTIONS,
    TOPIC_PROPOSALS,
    TOPIC_SELECTION,
    TOPIC_READY,
    TOPIC_PROCEED,
    TOPIC_PREPREPARE,
    TOPIC_PREPARE,
    TOPIC_COMMIT,
    TOPIC_BLOCKS,
)

BARRIERS = ("preprepare", "prepare", "commit", "sync")


def quorum(k: int) -> int:
    """Votes needed among k participants: floor(2k/3) + 1."""
    if k < 1:
        raise ValueError("quorum needs at least one participant")
    return (2 * k) // 3 + 1


class Phase(Enum):
    IDLE = "Idle"
    POOLING = "Pooling"
    STAKE_PROPOSED = "StakeProposed"
    SELECTED = "Selected"
    PREPREPARED = "PrePrepared"
    PREPARED = "Prepared"
    COMMITTED = "Committed"


class Event(Enum):
    START = "Start"
    BLOCK_READY = "BlockReady"
    SELECTED = "Selected"
    NOT_SELECTED = "NotSelected"
    PREPREPARE_DONE = "PrePrepareDone"
    PREPARE_QUORUM = "PrepareQuorum"
    COMMIT_QUORUM = "CommitQuorum"
    NEXT_ROUND = "NextRound"
    ABORT = "Abort"


class IllegalTransition(RuntimeError):
    pass


_TRANSITIONS: dict[tuple[Phase, Event], Phase] = {
    (Phase.IDLE, Event.START): Phase.POOLING,
    (Phase.POOLING, Event.BLOCK_READY): Phase.STAKE_PROPOSED,
    (Phase.STAKE_PROPOSED, Event.SELECTED): Phase.SELECTED,
    (Phase.STAKE_PROPOSED, Event.NOT_SELECTED): Phase.POOLING,
    (Phase.SELECTED, Event.PREPREPARE_DONE): Phase.PREPREPARED,
    (Phase.PREPREPARED, Event.PREPARE_QUORUM): Phase.PREPARED,
    (Phase.PREPARED, Event.COMMIT_QUORUM): Phase.COMMITTED,
    (Phase.COMMITTED, Event.NEXT_ROUND): Phase.POOLING,
}


class PhaseAutomaton:
    """The per-node consensus lifecycle; rejects every undeclared transition.

    The round number only advances on Committed -> Pooling. Abort is legal
    from any phase and returns to Pooling with the round unchanged.
    """

    def __init__(self) -> None:
        self.phase = Phase.IDLE
        self.round = 1

    def step(self, event: Event) -> Phase:
        if event == Event.ABORT:
            self.phase = Phase.POOLING
            return self.phase
        nxt = _TRANSITIONS.get((self.phase, event))
        if nxt is None:
            raise IllegalTransition(f"({self.phase.value}, {event.value}) is not a legal step")
        if self.phase is Phase.COMMITTED and event is Event.NEXT_ROUND:
            self.round += 1
        self.phase = nxt
        return self.phase

    def sync_round(self, round_num: int) -> None:
        """Adopt an externally committed height while pooling (catch-up path)."""
        if self.phase is not Phase.POOLING:
            raise IllegalTransition(f"cannot sync round while {self.phase.value}")
        if round_num < self.round:
            raise IllegalTransition("round number cannot move backwards")
        self.round = round_num


@dataclass(frozen=True)
class ValidatorConfig:
    block_size: int
    granularity_s: int
    sync_timeout_ms: float
    settle_ms: float = 15.0
    rounds: int = 1
    pool_tps_formula: str = "processed"


@dataclass
class _RoundScratch:
    """Per-round working state, rebuilt after aborts."""

    marks: dict[str, float] = field(default_factory=dict)
    selected: tuple[str, ...] = ()
    block: Block | None = None
    target_hash: bytes | None = None
    proposed: bool = False
    notice_sent: bool = False


class ValidatorActor(SimActor):
    def __init__(
        self,
        node_id: str,
        keypair: KeyPair,
        stake: int,
        genesis_balances: dict[bytes, int],
        broker: Broker,
        config: ValidatorConfig,
        master_public: bytes,
        node_publics: dict[str, bytes],
        clock,
        modeled_time: bool,
        costs: CostModel,
    ) -> None:
        super().__init__(node_id, clock, modeled_time)
        self.keypair = keypair
        self.stake = stake
        self.config = config
        self.broker = broker
        self.master_public = master_public
        self.node_publics = node_publics
        self.costs = costs

        self.automaton = PhaseAutomaton()
        self.ledger = LedgerState.from_balances(genesis_balances)
        self.chain: list[Block] = [make_genesis()]
        self.pool = Mempool()
        self.rows: list[metrics_mod.RoundMetrics] = []
        self.dropped_envelopes = 0

        self._consumers = {
            topic: broker.subscribe(topic, node_id)
            for topic in (
                TOPIC_TRANSACTIONS,
                TOPIC_SELECTION,
                TOPIC_PROCEED,
                TOPIC_PREPREPARE,
                TOPIC_PREPARE,
                TOPIC_COMMIT,
                TOPIC_BLOCKS,
            )
        }
        self._sel_msgs: dict[int, Selection] = {}
        self._proceed_msgs: dict[tuple[int, str], Proceed] = {}
        self._votes: dict[str, dict[int, dict[str, bytes]]] = {
            TOPIC_PREPREPARE: {},
            TOPIC_PREPARE: {},
            TOPIC_COMMIT: {},
        }
        self._blocks_seen: dict[int, Block] = {}
        self._pub_times: dict[bytes, float] = {}
        self._last_rx: float | None = None

        self.stage = "start"
        self._deadline: float | None = None
        self.scratch = _RoundScratch()

    # -- helpers --------------------------------------------------------------

    @property
    def round(self) -> int:
        return self.automaton.round

    def _publish(self, topic: str, phase: str, body_bytes: bytes) -> None:
        env = make_envelope(self.keypair, self.actor_id, self.round, phase, body_bytes)
        self.broker.publish(topic, self.actor_id.encode(), env.to_bytes(), ts_ms=self.local_now())

    def _send_ready(self, barrier: str) -> None:
        self._publish(TOPIC_READY, "ready", Ready(self.actor_id, barrier).to_bytes())

    def _send_abort_notice(self, reason: str) -> None:
        if not self.scratch.notice_sent:
            self._publish(TOPIC_READY, "abort", AbortNotice(self.actor_id, reason).to_bytes())
            self.scratch.notice_sent = True
            log.warning("%s round %d: abort notice (%s)", self.actor_id, self.round, reason)

    def _enter(self, stage: str, timeout_ms: float | None) -> None:
        self.stage = stage
        self._deadline = None if timeout_ms is None else self.local_now() + timeout_ms
        self.scratch.notice_sent = False

    def next_wakeup(self) -> float | None:
        if self.stage == "pooling" and self.pool.ready(self.config.block_size):
            if self._last_rx is not None:
                return self._last_rx + self.config.settle_ms
        return self._deadline

    # -- message intake ---------------------------------------------------------

    def _pump(self) -> bool:
        progressed = self._ingest_transactions()
        for msg in self._consumers[TOPIC_SELECTION].poll(max_messages=50):
            progressed = True
            env = parse_envelope(msg.value)
            if not verify_envelope(env, self.master_public):
                self.dropped_envelopes += 1
                continue
            self._sel_msgs[env.round] = Selection.from_bytes(env.body)
        for msg in self._consumers[TOPIC_PROCEED].poll(max_messages=50):
            progressed = True
            env = parse_envelope(msg.value)
            if not verify_envelope(env, self.master_public):
                self.dropped_envelopes += 1
                continue
            proceed = Proceed.from_bytes(env.body)
            self._proceed_msgs[(env.round, proceed.barrier)] = proceed
        for topic in (TOPIC_PREPREPARE, TOPIC_PREPARE, TOPIC_COMMIT):
            for msg in self._consumers[topic].poll(max_messages=100):
                progressed = True
                env = parse_envelope(msg.value)
                public = self.node_publics.get(env.sender)
                if public is None or not verify_envelope(env, public):
                    self.dropped_envelopes += 1
                    continue
                if env.round < self.round:
                    continue
                vote = Vote.from_bytes(env.body)
                self._votes[topic].setdefault(env.round, {}).setdefault(vote.node_id, vote.block_hash)
        for msg in self._consumers[TOPIC_BLOCKS].poll(max_messages=20):
            progressed = True
            env = parse_envelope(msg.value)
            public = self.node_publics.get(env.sender)
            if public is None or not verify_envelope(env, public):
                self.dropped_envelopes += 1
                continue
            ann = BlockAnnounce.from_bytes(env.body)
            if ann.height >= len(self.chain) and ann.height not in self._blocks_seen:
                self._blocks_seen[ann.height] = Block.from_bytes(ann.block_bytes)
        return progressed

    def _ingest_transactions(self) -> bool:
        msgs = self._consumers[TOPIC_TRANSACTIONS].poll(max_messages=256)
        if not msgs:
            return False
        batch = [Transaction.from_bytes(m.value) for m in msgs]
        self.pool.ingest_batch(batch, self.ledger)
        self.charge(self.costs.verify_batch(len(batch)))
        for m, tx in zip(msgs, batch):
            if self.pool.knows_valid(tx.tx_id):
                self._pub_times.setdefault(tx.tx_id, m.publish_time_ms)
        self._last_rx = self.local_now()
        return True

    # -- main loop ----------------------------------------------------------------

    def step(self) -> bool:
        if self.done:
            return False
        try:
            progressed = self._pump()
            if self._abort_signalled():
                self._handle_abort()
                return True
            handler = {
                "start": self._stage_start,
                "pooling": self._stage_pooling,
                "await_selection": self._stage_await_selection,
                "pooling_external": self._stage_pooling_external,
                "barrier:preprepare": lambda: self._stage_barrier("preprepare", self._run_preprepare),
                "barrier:prepare": lambda: self._stage_barrier("prepare", self._run_prepare_entry),
                "collect_preprepares": self._stage_collect_preprepares,
                "collect_prepares": self._stage_collect_prepares,
                "barrier:commit": lambda: self._stage_barrier("commit", self._run_commit_entry),
                "collect_commits": self._stage_collect_commits,
                "await_block": self._stage_await_block,
                "barrier:sync": lambda: self._stage_barrier("sync", self._finish_round),
            }[self.stage]
            return handler() or progressed
        except Exception as exc:
            self.failure = exc
            self.done = True
            raise

    def _abort_signalled(self) -> bool:
        if self.stage in ("start", "pooling"):
            return False
        return any(
            not p.ok
            for (rnd, _), p in self._proceed_msgs.items()
            if rnd == self.round
        )

    def _handle_abort(self) -> None:
        """Master declared the round failed: restore candidates and retry."""
        if self.stage == "barrier:sync":
            # The block is already applied; a sync-stage abort cannot roll back.
            raise RuntimeError(f"{self.actor_id}: abort after commit of round {self.round}")
        self.pool.on_abort()
        self._clear_round_buffers(self.round)
        self.automaton.step(Event.ABORT)
        start = self.scratch.marks.get("round_start", self.local_now())
        self.scratch = _RoundScratch()
        self.scratch.marks["round_start"] = start
        self._enter("pooling", None)
        log.info("%s: round %d aborted, retrying", self.actor_id, self.round)

    def _clear_round_buffers(self, round_num: int) -> None:
        self._sel_msgs.pop(round_num, None)
        for barrier in BARRIERS:
            self._proceed_msgs.pop((round_num, barrier), None)
        for votes in self._votes.values():
            votes.pop(round_num, None)

    # -- stages ------------------------------------------------------------------

    def _stage_start(self) -> bool:
        self.automaton.step(Event.START)
        self.scratch.marks["round_start"] = self.local_now()
        self._enter("pooling", None)
        return True

    def _stage_pooling(self) -> bool:
        if self.scratch.proposed or not self.pool.ready(self.config.block_size):
            return False
        settled = (
            self._last_rx is not None
            and self.local_now() - self._last_rx >= self.config.settle_ms
        )
        if not settled:
            return False
        self.charge(self.costs.propose())
        self._publish(
            TOPIC_PROPOSALS, "proposal", StakeProposal(self.actor_id, self.stake).to_bytes()
        )
        self.scratch.proposed = True
        self.automaton.step(Event.BLOCK_READY)
        self._enter("await_selection", 4 * self.config.sync_timeout_ms)
        return True

    def _stage_await_selection(self) -> bool:
        sel = self._sel_msgs.get(self.round)
        if sel is None:
            if self._deadline is not None and self.local_now() > self._deadline:
                self._send_abort_notice("selection timeout")
                self._deadline = self.local_now() + self.config.sync_timeout_ms
            return False
        if self.actor_id in sel.selected:
            self.scratch.selected = sel.selected
            self.automaton.step(Event.SELECTED)
            self.charge(self.costs.selection_ack())
            self.scratch.marks["ready_preprepare"] = self.local_now()
            self._send_ready("preprepare")
            self._enter("barrier:preprepare", self.config.sync_timeout_ms)
        else:
            self.automaton.step(Event.NOT_SELECTED)
            self._enter("pooling_external", None)
        return True

    def _stage_pooling_external(self) -> bool:
        """Not selected this round: keep pooling and adopt the committed block."""
        if not self._try_adopt_blocks():
            return False
        if self.round > self.config.rounds:
            self.done = True
            self.stage = "finished"
            return True
        self.scratch = _RoundScratch()
        self.scratch.marks["round_start"] = self.local_now()
        self._enter("pooling", None)
        return True

    def _try_adopt_blocks(self) -> bool:
        adopted = False
        while len(self.chain) in self._blocks_seen:
            block = self._blocks_seen.pop(len(self.chain))
            skip_sigs = all(self.pool.knows_valid(tx.tx_id) for tx in block.txs)
            violations = validate_block(
                block, self.chain[-1], self.ledger, self.config.granularity_s, skip_signatures=skip_sigs
            )
            if violations:
                raise RuntimeError(
                    f"{self.actor_id}: committed block {block.height} failed validation: {violations[0]}"
                )
            self._apply_committed(block)
            self.automaton.sync_round(block.height + 1)
            self.pool.take_round_counts()
            adopted = True
        return adopted

    def _apply_committed(self, block: Block) -> None:
        self.ledger = apply_block(self.ledger, block)
        self.chain.append(block)
        self.pool.on_commit(list(block.txs), self.ledger)
        for tx in block.txs:
            self._pub_times.pop(tx.tx_id, None)

    def _stage_barrier(self, barrier: str, action) -> bool:
        proceed = self._proceed_msgs.get((self.round, barrier))
        if proceed is None or not proceed.ok:
            if self._deadline is not None and self.local_now() > self._deadline:
                self._send_abort_notice(f"{barrier} barrier timeout")
                self._deadline = self.local_now() + self.config.sync_timeout_ms
            return False
        self.scratch.marks[f"proceed_{barrier}"] = self.local_now()
        action()
        return True

    # -- phase bodies ---------------------------------------------------------------

    def _run_preprepare(self) -> None:
        """Build the block from drained candidates and announce its hash."""
        candidates = self.pool.drain_block_candidates(self.config.block_size)
        if candidates is None:
            self._send_abort_notice("pool drained below block size")
            self._enter("barrier:preprepare", self.config.sync_timeout_ms)
            return
        block = build_block(
            candidates, self.chain[-1], self.scratch.marks["proceed_preprepare"], self.config.granularity_s
        )
        self.charge(self.costs.build_block())
        self.scratch.block = block
        self._publish(TOPIC_PREPREPARE, "preprepare", Vote(self.actor_id, block.block_hash).to_bytes())
        self.automaton.step(Event.PREPREPARE_DONE)
        self.scratch.marks["ready_prepare"] = self.local_now()
        self._send_ready("prepare")
        self._enter("barrier:prepare", self.config.sync_timeout_ms)

    def _run_prepare_entry(self) -> None:
        self._enter("collect_preprepares", self.config.sync_timeout_ms)

    def _stage_collect_preprepares(self) -> bool:
        """Compare announced hashes; vote prepare for the plurality choice."""
        announced = self._votes[TOPIC_PREPREPARE].get(self.round, {})
        have_all = all(node in announced for node in self.scratch.selected)
        if not have_all:
            if self._deadline is not None and self.local_now() > self._deadline:
                self._send_abort_notice("missing preprepare announcements")
                self._deadline = self.local_now() + self.config.sync_timeout_ms
            return False
        own_hash = self.scratch.block.block_hash
        counts = Counter(announced[node] for node in self.scratch.selected)
        top = counts.most_common()
        target = top[0][0]
        if len(top) > 1 and top[0][1] == top[1][1] and own_hash in counts:
            target = own_hash
        self.scratch.target_hash = target
        if target == own_hash:
            violations = validate_block(
                self.scratch.block, self.chain[-1], self.ledger, self.config.granularity_s,
                skip_signatures=True,
            )
            if violations:
                raise RuntimeError(f"{self.actor_id}: own block failed validation: {violations[0]}")
        self.charge(self.costs.validate_block())
        self._publish(TOPIC_PREPARE, "prepare", Vote(self.actor_id, target).to_bytes())
        self._enter("collect_prepares", self.config.sync_timeout_ms)
        return True

    def _stage_collect_prepares(self) -> bool:
        votes = self._votes[TOPIC_PREPARE].get(self.round, {})
        needed = quorum(len(self.scratch.selected))
        counts = Counter(votes[node] for node in self.scratch.selected if node in votes)
        winner = next((h for h, c in counts.items() if c >= needed), None)
        if winner is None:
            if len(counts) and sum(counts.values()) == len(self.scratch.selected):
                self._send_abort_notice("prepare votes cannot reach quorum")
            elif self._deadline is not None and self.local_now() > self._deadline:
                self._send_abort_notice("prepare quorum timeout")
                self._deadline = self.local_now() + self.config.sync_timeout_ms
            return False
        self.scratch.target_hash = winner
        self.automaton.step(Event.PREPARE_QUORUM)
        self.scratch.marks["ready_commit"] = self.local_now()
        self._send_ready("commit")
        self._enter("barrier:commit", self.config.sync_timeout_ms)
        return True

    def _run_commit_entry(self) -> None:
        self._publish(
            TOPIC_COMMIT, "commit", Vote(self.actor_id, self.scratch.target_hash).to_bytes()
        )
        self.charge(self.costs.commit_block())
        self._enter("collect_commits", self.config.sync_timeout_ms)

    def _stage_collect_commits(self) -> bool:
        votes = self._votes[TOPIC_COMMIT].get(self.round, {})
        needed = quorum(len(self.scratch.selected))
        counts = Counter(votes[node] for node in self.scratch.selected if node in votes)
        winner = next((h for h, c in counts.items() if c >= needed), None)
        if winner is None:
            if len(counts) and sum(counts.values()) == len(self.scratch.selected):
                self._send_abort_notice("commit votes cannot reach quorum")
            elif self._deadline is not None and self.local_now() > self._deadline:
                self._send_abort_notice("commit quorum timeout")
                self._deadline = self.local_now() + self.config.sync_timeout_ms
            return False
        self.automaton.step(Event.COMMIT_QUORUM)
        if winner == self.scratch.block.block_hash:
            self._commit_block(self.scratch.block, built_here=True)
        else:
            # The quorum settled on a different timestamp window; fetch the bytes.
            self.scratch.target_hash = winner
            self._enter("await_block", self.config.sync_timeout_ms)
        return True

    def _stage_await_block(self) -> bool:
        block = self._blocks_seen.get(len(self.chain))
        if block is None or block.block_hash != self.scratch.target_hash:
            if self._deadline is not None and self.local_now() > self._deadline:
                self._send_abort_notice("committed block bytes missing")
                self._deadline = self.local_now() + self.config.sync_timeout_ms
            return False
        self._blocks_seen.pop(len(self.chain))
        self.pool.on_abort()  # restore own drained candidates before adopting
        skip_sigs = all(self.pool.knows_valid(tx.tx_id) for tx in block.txs)
        violations = validate_block(
            block, self.chain[-1], self.ledger, self.config.granularity_s, skip_signatures=skip_sigs
        )
        if violations:
            raise RuntimeError(f"{self.actor_id}: quorum block failed validation: {violations[0]}")
        self._commit_block(block, built_here=False)
        return True

    def _commit_block(self, block: Block, built_here: bool) -> None:
        if built_here:
            violations = validate_block(
                block, self.chain[-1], self.ledger, self.config.granularity_s, skip_signatures=True
            )
            if violations:
                raise RuntimeError(f"{self.actor_id}: built block failed validation: {violations[0]}")
        earliest_pub = min(
            (self._pub_times[tx.tx_id] for tx in block.txs if tx.tx_id in self._pub_times),
            default=None,
        )
        self._apply_committed(block)
        self._publish(
            TOPIC_BLOCKS, "block", BlockAnnounce(block.height, block.to_bytes()).to_bytes()
        )
        commit_point = self.local_now()
        self.scratch.marks["ready_sync"] = commit_point
        accepted, rejected = self.pool.take_round_counts()
        self.scratch.marks["round_accepted"] = accepted
        self.scratch.marks["round_rejected"] = sum(rejected.values())
        self.scratch.marks["ttf_ms"] = (
            commit_point - earliest_pub if earliest_pub is not None else 0.0
        )
        self._send_ready("sync")
        self._enter("barrier:sync", self.config.sync_timeout_ms)

    def _finish_round(self) -> None:
        m = self.scratch.marks
        proceed_sync = self.local_now()
        pooling_ms = m["ready_preprepare"] - m["round_start"]
        preprepare_ms = m["ready_prepare"] - m["proceed_preprepare"]
        prepare_ms = m["ready_commit"] - m["proceed_prepare"]
        commit_ms = m["ready_sync"] - m["proceed_commit"]
        sync_ms = (
            (m["proceed_preprepare"] - m["ready_preprepare"])
            + (m["proceed_prepare"] - m["ready_prepare"])
            + (m["proceed_commit"] - m["ready_commit"])
            + (proceed_sync - m["ready_sync"])
        )
        consensus_ms = preprepare_ms + prepare_ms + commit_ms + sync_ms
        processed = int(m["round_accepted"]) + int(m["round_rejected"])
        if self.config.pool_tps_formula == "block":
            processed = self.config.block_size
        row = metrics_mod.RoundMetrics(
            round=self.round,
            pooling_ms=pooling_ms,
            preprepare_ms=preprepare_ms,
            prepare_ms=prepare_ms,
            commit_ms=commit_ms,
            sync_ms=sync_ms,
            consensus_ms=consensus_ms,
            total_ms=pooling_ms + consensus_ms,
            ttf_ms=m["ttf_ms"],
            failed_tx=int(m["round_rejected"]),
            pool_tps=metrics_mod.compute_pool_tps(processed, pooling_ms),
            block_tps=metrics_mod.compute_block_tps(self.config.block_size, consensus_ms),
        )
        self.rows.append(row)
        self._clear_round_buffers(self.round)
        self.automaton.step(Event.NEXT_ROUND)
        self.scratch = _RoundScratch()
        self.scratch.marks["round_start"] = self.local_now()
        if self.round > self.config.rounds:
            self.done = True
            self.stage = "finished"
        else:
            self._enter("pooling", None)
