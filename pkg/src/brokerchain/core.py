"""Core chain types: transactions, blocks, the account ledger, and hashing rules.

Byte layout used everywhere (documented in README):
- a record is its fields concatenated in declared order
- every field is length-prefixed with a u32 little-endian byte count
- integer fields are encoded as 8-byte little-endian unsigned values
- hashes are SHA-256; identifiers are the full 32-byte digest
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature as _CryptoBadSig
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

HASH_ZERO = b"\x00" * 32
PUBKEY_LEN = 32
SIGNATURE_LEN = 64
U64_MAX = 2**64 - 1


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def write_field(buf: bytearray, payload: bytes) -> None:
    buf += struct.pack("<I", len(payload))
    buf += payload


def write_u64(buf: bytearray, value: int) -> None:
    if not 0 <= value <= U64_MAX:
        raise ValueError(f"u64 out of range: {value}")
    write_field(buf, struct.pack("<Q", value))


def encode_fields(*fields: bytes | int) -> bytes:
    """Canonical encoding: each field length-prefixed, ints as 8-byte LE."""
    buf = bytearray()
    for item in fields:
        if isinstance(item, bool):
            raise TypeError("bool is not a codec type")
        if isinstance(item, int):
            write_u64(buf, item)
        elif isinstance(item, (bytes, bytearray)):
            write_field(buf, bytes(item))
        else:
            raise TypeError(f"cannot encode {type(item).__name__}")
    return bytes(buf)


class FieldReader:
    """Sequential reader for the canonical field encoding."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def read_bytes(self) -> bytes:
        if self._pos + 4 > len(self._data):
            raise ValueError("truncated field length")
        (length,) = struct.unpack_from("<I", self._data, self._pos)
        self._pos += 4
        if self._pos + length > len(self._data):
            raise ValueError("truncated field payload")
        payload = self._data[self._pos : self._pos + length]
        self._pos += length
        return payload

    def read_u64(self) -> int:
        payload = self.read_bytes()
        if len(payload) != 8:
            raise ValueError(f"u64 field must be 8 bytes, got {len(payload)}")
        return struct.unpack("<Q", payload)[0]

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise ValueError(f"{len(self._data) - self._pos} trailing bytes")


class KeyPair:
    """Ed25519 signing pair; public keys double as account addresses."""

    def __init__(self, private: Ed25519PrivateKey) -> None:
        self._private = private
        self.public_bytes = private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    @classmethod
    def generate(cls, seed32: bytes) -> KeyPair:
        if len(seed32) != 32:
            raise ValueError("key seed must be 32 bytes")
        return cls(Ed25519PrivateKey.from_private_bytes(seed32))

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)


def verify_signature(public_bytes: bytes, signature: bytes, message: bytes) -> bool:
    if len(public_bytes) != PUBKEY_LEN or len(signature) != SIGNATURE_LEN:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, message)
        return True
    except (_CryptoBadSig, ValueError):
        return False


@dataclass(frozen=True)
class Transaction:
    """Account-model transfer. Field order here is the serialization order."""

    sender: bytes
    receiver: bytes
    amount: int
    nonce: int
    created_at_ms: int
    signature: bytes = b""
    tx_id: bytes = field(default=b"", compare=False)

    def __post_init__(self) -> None:
        if self.signature and not self.tx_id:
            object.__setattr__(self, "tx_id", sha256(self.to_bytes()))

    def signing_bytes(self) -> bytes:
        return encode_fields(
            self.sender, self.receiver, self.amount, self.nonce, self.created_at_ms
        )

    def to_bytes(self) -> bytes:
        return self.signing_bytes() + encode_fields(self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> Transaction:
        r = FieldReader(data)
        tx = cls(
            sender=r.read_bytes(),
            receiver=r.read_bytes(),
            amount=r.read_u64(),
            nonce=r.read_u64(),
            created_at_ms=r.read_u64(),
            signature=r.read_bytes(),
        )
        r.expect_end()
        return tx


def sign_transaction(keypair: KeyPair, tx: Transaction) -> Transaction:
    """Return a signed copy; the id hashes the full serialization, signature included."""
    if tx.sender != keypair.public_bytes:
        raise ValueError("signing key does not match tx sender")
    signature = keypair.sign(tx.signing_bytes())
    return Transaction(
        sender=tx.sender,
        receiver=tx.receiver,
        amount=tx.amount,
        nonce=tx.nonce,
        created_at_ms=tx.created_at_ms,
        signature=signature,
    )


def compute_merkle_root(leaves: list[bytes]) -> bytes:
    """Pairwise SHA-256 tree; odd levels duplicate their last node.

    A single leaf is its own root. Empty input is an error.
    """
    if not leaves:
        raise ValueError("merkle tree needs at least one leaf")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def quantize_timestamp(t_ms: float, granularity_s: int) -> int:
    """Floor a millisecond timestamp onto a multiple of granularity_s seconds.

    Nodes that build the same block within one window agree on this value,
    which keeps independently assembled blocks byte-identical.
    """
    if granularity_s <= 0:
        raise ValueError("granularity must be positive")
    return int(t_ms // 1000 // granularity_s) * granularity_s


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp_q: int
    tx_count: int

    def to_bytes(self) -> bytes:
        return encode_fields(
            self.height, self.prev_hash, self.merkle_root, self.timestamp_q, self.tx_count
        )


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    txs: tuple[Transaction, ...]
    block_hash: bytes = field(default=b"", compare=False)

    def __post_init__(self) -> None:
        if not self.block_hash:
            object.__setattr__(self, "block_hash", sha256(self.header.to_bytes()))

    @property
    def height(self) -> int:
        return self.header.height

    def to_bytes(self) -> bytes:
        buf = bytearray(self.header.to_bytes())
        for tx in self.txs:
            write_field(buf, tx.to_bytes())
        return bytes(buf)

    @classmethod
    def from_bytes(cls, data: bytes) -> Block:
        r = FieldReader(data)
        header = BlockHeader(
            height=r.read_u64(),
            prev_hash=r.read_bytes(),
            merkle_root=r.read_bytes(),
            timestamp_q=r.read_u64(),
            tx_count=r.read_u64(),
        )
        txs = tuple(Transaction.from_bytes(r.read_bytes()) for _ in range(header.tx_count))
        r.expect_end()
        return cls(header=header, txs=txs)


def make_genesis() -> Block:
    header = BlockHeader(
        height=0, prev_hash=HASH_ZERO, merkle_root=HASH_ZERO, timestamp_q=0, tx_count=0
    )
    return Block(header=header, txs=())


@dataclass
class LedgerState:
    """Account balances plus the last applied nonce per sender."""

    balances: dict[bytes, int]
    nonces: dict[bytes, int]

    @classmethod
    def from_balances(cls, balances: dict[bytes, int]) -> LedgerState:
        return cls(balances=dict(balances), nonces={})

    def balance(self, account: bytes) -> int:
        return self.balances.get(account, 0)

    def nonce(self, account: bytes) -> int:
        return self.nonces.get(account, 0)

    def total_supply(self) -> int:
        return sum(self.balances.values())

    def copy(self) -> LedgerState:
        return LedgerState(balances=dict(self.balances), nonces=dict(self.nonces))


@dataclass(frozen=True)
class Violation:
    kind: str  # BadPrevHash | BadMerkle | BadTimestamp | InvalidTx
    index: int | None = None
    reason: str | None = None


def build_block(
    valid_txs: list[Transaction],
    prev_block: Block,
    now_ms: float,
    granularity_s: int,
) -> Block:
    """Assemble the next block deterministically from a verified tx set.

    Transactions are ordered by ascending tx_id bytes, so any two nodes
    holding the same set and the same quantization window build the same
    bytes.
    """
    if not valid_txs:
        raise ValueError("cannot build an empty block")
    ordered = tuple(sorted(valid_txs, key=lambda tx: tx.tx_id))
    header = BlockHeader(
        height=prev_block.height + 1,
        prev_hash=prev_block.block_hash,
        merkle_root=compute_merkle_root([tx.tx_id for tx in ordered]),
        timestamp_q=quantize_timestamp(now_ms, granularity_s),
        tx_count=len(ordered),
    )
    return Block(header=header, txs=ordered)


def validate_block(
    block: Block,
    prev_block: Block,
    ledger: LedgerState,
    granularity_s: int,
    skip_signatures: bool = False,
) -> list[Violation]:
    """Full structural and stateful check; empty result means the block is good.

    skip_signatures is for the node that verified every signature at ingest
    and built the identical bytes itself.
    """
    violations: list[Violation] = []
    header = block.header
    if header.prev_hash != prev_block.block_hash or header.height != prev_block.height + 1:
        violations.append(Violation("BadPrevHash"))
    if header.timestamp_q % granularity_s != 0 or header.timestamp_q < prev_block.header.timestamp_q:
        violations.append(Violation("BadTimestamp"))
    if header.tx_count != len(block.txs) or not block.txs:
        violations.append(Violation("BadMerkle", reason="tx count mismatch"))
        return violations
    if compute_merkle_root([tx.tx_id for tx in block.txs]) != header.merkle_root:
        violations.append(Violation("BadMerkle"))
    tx_flags: list[tuple[int, str]] = []
    prev_id = b""
    by_sender: dict[bytes, list[int]] = {}
    for i, tx in enumerate(block.txs):
        if tx.tx_id <= prev_id:
            tx_flags.append((i, "BadOrder"))
        prev_id = tx.tx_id
        if not skip_signatures and not verify_signature(
            tx.sender, tx.signature, tx.signing_bytes()
        ):
            tx_flags.append((i, "InvalidSignature"))
            continue
        by_sender.setdefault(tx.sender, []).append(i)
    # Blocks order transactions by tx_id, so a sender's transfers may appear
    # in any relative order. State checks are therefore per sender and order
    # independent: nonces must form a contiguous run above the committed
    # level, and the summed spend must fit the committed balance (transfers
    # received within the same block do not fund it).
    for sender, indices in by_sender.items():
        indices.sort(key=lambda i: block.txs[i].nonce)
        expected = ledger.nonce(sender) + 1
        funds = ledger.balance(sender)
        for i in indices:
            tx = block.txs[i]
            if tx.nonce != expected:
                tx_flags.append((i, "BadNonce"))
                continue
            expected += 1
            if tx.amount > funds:
                tx_flags.append((i, "InsufficientBalance"))
                continue
            funds -= tx.amount
    for i, reason in sorted(tx_flags):
        violations.append(Violation("InvalidTx", index=i, reason=reason))
    return violations


def apply_block(ledger: LedgerState, block: Block) -> LedgerState:
    """Return the ledger after the block; raises if any transfer is unapplicable.

    Transfers are applied per sender in nonce order, matching the order
    independence of validate_block, so any block that validates cleanly also
    applies cleanly.
    """
    new = ledger.copy()
    for tx in sorted(block.txs, key=lambda t: (t.sender, t.nonce)):
        if tx.nonce != new.nonces.get(tx.sender, 0) + 1:
            raise ValueError(f"nonce {tx.nonce} does not extend the sender's sequence")
        if tx.amount > new.balances.get(tx.sender, 0):
            raise ValueError(f"amount {tx.amount} exceeds the sender's balance")
        new.balances[tx.sender] -= tx.amount
        new.balances[tx.receiver] = new.balances.get(tx.receiver, 0) + tx.amount
        new.nonces[tx.sender] = tx.nonce
    return new
