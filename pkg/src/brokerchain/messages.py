"""Signed wire envelopes and the message bodies exchanged over the broker.

Every coordination message travels as an Envelope: sender id, round, phase
tag, opaque body, and an Ed25519 signature over the first four fields. The
body encoding reuses the canonical field codec from core, so all payloads
have one documented byte layout.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import FieldReader, KeyPair, encode_fields, verify_signature


@dataclass(frozen=True)
class Envelope:
    sender: str
    round: int
    phase: str
    body: bytes
    signature: bytes

    def signing_bytes(self) -> bytes:
        return encode_fields(self.sender.encode(), self.round, self.phase.encode(), self.body)

    def to_bytes(self) -> bytes:
        return self.signing_bytes() + encode_fields(self.signature)


def make_envelope(keypair: KeyPair, sender: str, round_num: int, phase: str, body: bytes) -> Envelope:
    unsigned = Envelope(sender=sender, round=round_num, phase=phase, body=body, signature=b"")
    return Envelope(
        sender=sender,
        round=round_num,
        phase=phase,
        body=body,
        signature=keypair.sign(unsigned.signing_bytes()),
    )


def parse_envelope(data: bytes) -> Envelope:
    r = FieldReader(data)
    env = Envelope(
        sender=r.read_bytes().decode(),
        round=r.read_u64(),
        phase=r.read_bytes().decode(),
        body=r.read_bytes(),
        signature=r.read_bytes(),
    )
    r.expect_end()
    return env


def verify_envelope(env: Envelope, public_bytes: bytes) -> bool:
    return verify_signature(public_bytes, env.signature, env.signing_bytes())


# -- bodies -------------------------------------------------------------------


@dataclass(frozen=True)
class StakeProposal:
    node_id: str
    stake: int

    def to_bytes(self) -> bytes:
        return encode_fields(self.node_id.encode(), self.stake)

    @classmethod
    def from_bytes(cls, data: bytes) -> StakeProposal:
        r = FieldReader(data)
        out = cls(node_id=r.read_bytes().decode(), stake=r.read_u64())
        r.expect_end()
        return out


@dataclass(frozen=True)
class Selection:
    round: int
    seed: bytes
    selected: tuple[str, ...]

    def to_bytes(self) -> bytes:
        return encode_fields(
            self.round, self.seed, len(self.selected), *[s.encode() for s in self.selected]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> Selection:
        r = FieldReader(data)
        round_num = r.read_u64()
        seed = r.read_bytes()
        count = r.read_u64()
        selected = tuple(r.read_bytes().decode() for _ in range(count))
        r.expect_end()
        return cls(round=round_num, seed=seed, selected=selected)


@dataclass(frozen=True)
class Ready:
    node_id: str
    barrier: str

    def to_bytes(self) -> bytes:
        return encode_fields(self.node_id.encode(), self.barrier.encode())

    @classmethod
    def from_bytes(cls, data: bytes) -> Ready:
        r = FieldReader(data)
        out = cls(node_id=r.read_bytes().decode(), barrier=r.read_bytes().decode())
        r.expect_end()
        return out


@dataclass(frozen=True)
class Proceed:
    barrier: str
    ok: bool
    reason: str = ""
    missing: tuple[str, ...] = ()

    def to_bytes(self) -> bytes:
        return encode_fields(
            self.barrier.encode(),
            1 if self.ok else 0,
            self.reason.encode(),
            len(self.missing),
            *[m.encode() for m in self.missing],
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> Proceed:
        r = FieldReader(data)
        barrier = r.read_bytes().decode()
        ok = r.read_u64() == 1
        reason = r.read_bytes().decode()
        count = r.read_u64()
        missing = tuple(r.read_bytes().decode() for _ in range(count))
        r.expect_end()
        return cls(barrier=barrier, ok=ok, reason=reason, missing=missing)


@dataclass(frozen=True)
class Vote:
    """Pre-prepare announcement or prepare/commit vote; all carry a block hash."""

    node_id: str
    block_hash: bytes

    def to_bytes(self) -> bytes:
        return encode_fields(self.node_id.encode(), self.block_hash)

    @classmethod
    def from_bytes(cls, data: bytes) -> Vote:
        r = FieldReader(data)
        out = cls(node_id=r.read_bytes().decode(), block_hash=r.read_bytes())
        r.expect_end()
        return out


@dataclass(frozen=True)
class AbortNotice:
    node_id: str
    reason: str

    def to_bytes(self) -> bytes:
        return encode_fields(self.node_id.encode(), self.reason.encode())

    @classmethod
    def from_bytes(cls, data: bytes) -> AbortNotice:
        r = FieldReader(data)
        out = cls(node_id=r.read_bytes().decode(), reason=r.read_bytes().decode())
        r.expect_end()
        return out


@dataclass(frozen=True)
class BlockAnnounce:
    height: int
    block_bytes: bytes

    def to_bytes(self) -> bytes:
        return encode_fields(self.height, self.block_bytes)

    @classmethod
    def from_bytes(cls, data: bytes) -> BlockAnnounce:
        r = FieldReader(data)
        out = cls(height=r.read_u64(), block_bytes=r.read_bytes())
        r.expect_end()
        return out
