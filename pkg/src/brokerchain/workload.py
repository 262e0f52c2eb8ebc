"""Seeded user population and round-gated traffic generation.

Each round publishes exactly block_size valid transfers plus a configured
share of deliberately invalid ones, tagged in an injection log by the
rejection reason they are built to trigger. The generator only starts round
r+1 after it has observed block r commit, so every node's pool sees the same
candidate set for each height.
"""

from __future__ import annotations

import logging
import random
from collections import deque
from dataclasses import dataclass, field

from .broker import Broker
from .consensus import TOPIC_BLOCKS, TOPIC_TRANSACTIONS
from .core import KeyPair, Transaction, sha256, sign_transaction
from .mempool import BAD_NONCE, INSUFFICIENT_BALANCE, INVALID_SIGNATURE
from .messages import BlockAnnounce, parse_envelope, verify_envelope
from .runtime import CostModel, SimActor

log = logging.getLogger(__name__)

MIN_GENESIS_BALANCE = 10_000_000
MAX_GENESIS_BALANCE = 100_000_000
MAX_TRANSFER = 5_000


@dataclass
class User:
    user_id: int
    keypair: KeyPair
    next_nonce: int = 1
    available: int = 0  # genesis minus everything ever debited, credits ignored
    committed_nonce: int = 0


@dataclass
class InjectionRecord:
    round: int
    valid_sent: int
    fraud_sent: int
    fraud_kinds: dict[str, int] = field(default_factory=dict)


def generate_users(count: int, seed: int) -> tuple[list[User], dict[bytes, int]]:
    """Deterministic population: keypairs from the seed, balances uniform."""
    if count < 2:
        raise ValueError("need at least two users to transact")
    rng = random.Random(seed)
    users: list[User] = []
    balances: dict[bytes, int] = {}
    for i in range(count):
        key_seed = sha256(f"{seed}|user|{i}".encode())
        user = User(user_id=i, keypair=KeyPair.generate(key_seed))
        user.available = rng.randint(MIN_GENESIS_BALANCE, MAX_GENESIS_BALANCE)
        balances[user.keypair.public_bytes] = user.available
        users.append(user)
    return users, balances


class WorkloadActor(SimActor):
    def __init__(
        self,
        users: list[User],
        broker: Broker,
        rounds: int,
        block_size: int,
        batch_size: int,
        fraud_ratio_for,
        seed: int,
        node_publics: dict[str, bytes],
        clock,
        modeled_time: bool,
        costs: CostModel,
    ) -> None:
        super().__init__("workload", clock, modeled_time)
        self.users = users
        self.broker = broker
        self.rounds = rounds
        self.block_size = block_size
        self.batch_size = batch_size
        self.fraud_ratio_for = fraud_ratio_for
        self.node_publics = node_publics
        self.costs = costs
        self.rng = random.Random(seed)
        self.total_supply = sum(u.available for u in self.users)

        self.records: list[InjectionRecord] = []
        self.fraud_ids: dict[int, set[bytes]] = {}
        self.valid_ids: dict[int, set[bytes]] = {}
        self._blocks = broker.subscribe(TOPIC_BLOCKS, "workload")
        self._outbox: deque[Transaction] = deque()
        self._round = 1
        self._observed_height = 0

    # -- generation ------------------------------------------------------------

    def _pick_sender(self, amount: int) -> User:
        while True:
            user = self.rng.choice(self.users)
            if user.available >= amount:
                return user

    def _pick_receiver(self, sender: User) -> User:
        while True:
            user = self.rng.choice(self.users)
            if user is not sender:
                return user

    def _make_valid(self, now_ms: float) -> Transaction:
        amount = self.rng.randint(1, MAX_TRANSFER)
        sender = self._pick_sender(amount)
        receiver = self._pick_receiver(sender)
        tx = Transaction(
            sender=sender.keypair.public_bytes,
            receiver=receiver.keypair.public_bytes,
            amount=amount,
            nonce=sender.next_nonce,
            created_at_ms=int(now_ms),
        )
        sender.next_nonce += 1
        sender.available -= amount
        return sign_transaction(sender.keypair, tx)

    def _make_fraud(self, kind: str, now_ms: float) -> Transaction:
        sender = self.rng.choice(self.users)
        receiver = self._pick_receiver(sender)
        if kind == INVALID_SIGNATURE:
            tx = Transaction(
                sender=sender.keypair.public_bytes,
                receiver=receiver.keypair.public_bytes,
                amount=self.rng.randint(1, MAX_TRANSFER),
                nonce=sender.next_nonce,
                created_at_ms=int(now_ms),
                signature=self.rng.randbytes(64),
            )
            return tx
        if kind == INSUFFICIENT_BALANCE:
            tx = Transaction(
                sender=sender.keypair.public_bytes,
                receiver=receiver.keypair.public_bytes,
                amount=self.total_supply + 1,
                nonce=sender.next_nonce,
                created_at_ms=int(now_ms),
            )
            return sign_transaction(sender.keypair, tx)
        if kind == BAD_NONCE:
            candidates = [u for u in self.users if u.committed_nonce >= 1]
            sender = self.rng.choice(candidates)
            receiver = self._pick_receiver(sender)
            tx = Transaction(
                sender=sender.keypair.public_bytes,
                receiver=receiver.keypair.public_bytes,
                amount=self.rng.randint(1, MAX_TRANSFER),
                nonce=self.rng.randint(1, sender.committed_nonce),
                created_at_ms=int(now_ms),
            )
            return sign_transaction(sender.keypair, tx)
        raise ValueError(f"unknown fraud kind {kind!r}")

    def generate_round_traffic(self, round_num: int) -> list[Transaction]:
        """Build the round's stream: valid first, frauds after, then an
        interleave that keeps every sender's own order intact."""
        now = self.local_now()
        valid = [self._make_valid(now) for _ in range(self.block_size)]
        ratio = self.fraud_ratio_for(round_num)
        fraud_count = int(self.block_size * ratio)
        kinds = [INVALID_SIGNATURE, INSUFFICIENT_BALANCE]
        if any(u.committed_nonce >= 1 for u in self.users):
            kinds.append(BAD_NONCE)
        record = InjectionRecord(round=round_num, valid_sent=len(valid), fraud_sent=fraud_count)
        frauds: list[Transaction] = []
        for _ in range(fraud_count):
            kind = self.rng.choice(kinds)
            frauds.append(self._make_fraud(kind, now))
            record.fraud_kinds[kind] = record.fraud_kinds.get(kind, 0) + 1
        self.records.append(record)
        self.fraud_ids[round_num] = {tx.tx_id for tx in frauds}
        self.valid_ids[round_num] = {tx.tx_id for tx in valid}

        per_sender: dict[bytes, deque[Transaction]] = {}
        for tx in valid + frauds:
            per_sender.setdefault(tx.sender, deque()).append(tx)
        senders = list(per_sender)
        weights = [len(per_sender[s]) for s in senders]
        stream: list[Transaction] = []
        while senders:
            idx = self.rng.choices(range(len(senders)), weights=weights)[0]
            stream.append(per_sender[senders[idx]].popleft())
            weights[idx] -= 1
            if weights[idx] == 0:
                del senders[idx], weights[idx]
        return stream

    # -- actor loop ---------------------------------------------------------------

    def step(self) -> bool:
        if self.done:
            return False
        progressed = self._watch_blocks()
        if self._outbox:
            self._publish_batch()
            return True
        if self._round > self.rounds:
            self.done = True
            return True
        if self._observed_height == self._round - 1:
            stream = self.generate_round_traffic(self._round)
            self.charge(self.costs.generate_batch(len(stream)))
            self._outbox.extend(stream)
            self._round += 1
            return True
        return progressed

    def _publish_batch(self) -> None:
        batch = [self._outbox.popleft() for _ in range(min(self.batch_size, len(self._outbox)))]
        self.charge(self.costs.generate_batch(len(batch)) * 0.1)
        now = self.local_now()
        for tx in batch:
            self.broker.publish(TOPIC_TRANSACTIONS, tx.sender, tx.to_bytes(), ts_ms=now)

    def _watch_blocks(self) -> bool:
        progressed = False
        for msg in self._blocks.poll(max_messages=20):
            progressed = True
            env = parse_envelope(msg.value)
            public = self.node_publics.get(env.sender)
            if public is None or not verify_envelope(env, public):
                continue
            ann = BlockAnnounce.from_bytes(env.body)
            if ann.height == self._observed_height + 1:
                self._observed_height = ann.height
                for user in self.users:
                    user.committed_nonce = user.next_nonce - 1
        return progressed
    def next_wakeup(self) -> float | None:
        return None
