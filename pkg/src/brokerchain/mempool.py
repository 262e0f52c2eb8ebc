"""Per-node transaction pool with verification, reservations, and drain/abort flow.

Verification order is fixed: signature, then nonce, then balance. Balance
checks run against the applied ledger minus amounts already reserved by
queued or in-flight transactions, so one account cannot promise the same
funds twice within a node's pool.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .core import LedgerState, Transaction, verify_signature

VALID = "Valid"
INVALID_SIGNATURE = "InvalidSignature"
BAD_NONCE = "BadNonce"
INSUFFICIENT_BALANCE = "InsufficientBalance"
REJECT_REASONS = (INVALID_SIGNATURE, BAD_NONCE, INSUFFICIENT_BALANCE)


@dataclass
class IngestResult:
    accepted: int = 0
    rejected: dict[str, int] = field(default_factory=dict)

    @property
    def rejected_total(self) -> int:
        return sum(self.rejected.values())

    @property
    def processed(self) -> int:
        return self.accepted + self.rejected_total


class Mempool:
    def __init__(self) -> None:
        self.queue: deque[Transaction] = deque()
        self.in_flight: list[Transaction] = []
        self._reserved: dict[bytes, int] = {}
        self._pending_nonce: dict[bytes, int] = {}
        self._verified_ids: set[bytes] = set()
        self.accepted_total = 0
        self.rejected_total = 0
        self._round_accepted = 0
        self._round_rejected: dict[str, int] = {}

    # -- verification -------------------------------------------------------

    def verify_transaction(self, tx: Transaction, ledger: LedgerState) -> str:
        """Classify one transaction against ledger plus pool reservations."""
        if not verify_signature(tx.sender, tx.signature, tx.signing_bytes()):
            return INVALID_SIGNATURE
        last_nonce = max(ledger.nonce(tx.sender), self._pending_nonce.get(tx.sender, 0))
        if tx.nonce <= last_nonce:
            return BAD_NONCE
        available = ledger.balance(tx.sender) - self._reserved.get(tx.sender, 0)
        if tx.amount > available:
            return INSUFFICIENT_BALANCE
        return VALID

    def ingest_batch(self, txs: list[Transaction], ledger: LedgerState) -> IngestResult:
        """Verify a delivered batch; queue the valid ones, count the rest."""
        result = IngestResult()
        for tx in txs:
            verdict = self.verify_transaction(tx, ledger)
            if verdict == VALID:
                self.queue.append(tx)
                self._reserved[tx.sender] = self._reserved.get(tx.sender, 0) + tx.amount
                self._pending_nonce[tx.sender] = tx.nonce
                self._verified_ids.add(tx.tx_id)
                result.accepted += 1
            else:
                result.rejected[verdict] = result.rejected.get(verdict, 0) + 1
        self.accepted_total += result.accepted
        self.rejected_total += result.rejected_total
        self._round_accepted += result.accepted
        for reason, count in result.rejected.items():
            self._round_rejected[reason] = self._round_rejected.get(reason, 0) + count
        return result

    # -- block candidate flow -------------------------------------------------

    def ready(self, block_size: int) -> bool:
        return not self.in_flight and len(self.queue) >= block_size

    def drain_block_candidates(self, block_size: int) -> list[Transaction] | None:
        """Move the oldest block_size valid txs into the in-flight set.

        Returns None while the pool cannot fill a block, so the caller keeps
        pooling.
        """
        if self.in_flight:
            raise RuntimeError("previous candidate batch still unresolved")
        if len(self.queue) < block_size:
            return None
        self.in_flight = [self.queue.popleft() for _ in range(block_size)]
        return list(self.in_flight)

    def on_commit(self, committed: list[Transaction], ledger_after: LedgerState) -> None:
        """Drop committed txs wherever they sit and release their reservations."""
        committed_ids = {tx.tx_id for tx in committed}
        for tx in self.in_flight:
            if tx.tx_id in committed_ids:
                self._release(tx)
        self.in_flight = [tx for tx in self.in_flight if tx.tx_id not in committed_ids]
        if self.in_flight:
            # A block from another builder: keep leftovers spendable again.
            self.on_abort()
        survivors = [tx for tx in self.queue if tx.tx_id not in committed_ids]
        if len(survivors) != len(self.queue):
            for tx in self.queue:
                if tx.tx_id in committed_ids:
                    self._release(tx)
            self.queue = deque(survivors)
        for sender in [s for s, n in self._pending_nonce.items() if n <= ledger_after.nonce(s)]:
            del self._pending_nonce[sender]

    def on_abort(self) -> None:
        """Round failed: in-flight candidates go back to the queue front, in order."""
        for tx in reversed(self.in_flight):
            self.queue.appendleft(tx)
        self.in_flight = []

    def _release(self, tx: Transaction) -> None:
        remaining = self._reserved.get(tx.sender, 0) - tx.amount
        if remaining > 0:
            self._reserved[tx.sender] = remaining
        else:
            self._reserved.pop(tx.sender, None)

    # -- accounting -----------------------------------------------------------

    def knows_valid(self, tx_id: bytes) -> bool:
        return tx_id in self._verified_ids

    def size(self) -> int:
        return len(self.queue)

    def failed_count(self) -> int:
        """Cumulative rejected transactions since pool creation."""
        return self.rejected_total

    def take_round_counts(self) -> tuple[int, dict[str, int]]:
        """Return and reset the per-round accepted/rejected counters."""
        counts = (self._round_accepted, dict(self._round_rejected))
        self._round_accepted = 0
        self._round_rejected = {}
        return counts
