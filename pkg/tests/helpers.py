"""Shared builders and brute-force statistical oracles for the test suite."""

from __future__ import annotations

import math

from brokerchain.core import KeyPair, Transaction, sha256, sign_transaction


def make_keypair(tag: str) -> KeyPair:
    return KeyPair.generate(sha256(f"test-key|{tag}".encode()))


def make_tx(
    sender: KeyPair,
    receiver: bytes,
    amount: int,
    nonce: int,
    created_at_ms: int = 1_000,
) -> Transaction:
    tx = Transaction(
        sender=sender.public_bytes,
        receiver=receiver,
        amount=amount,
        nonce=nonce,
        created_at_ms=created_at_ms,
    )
    return sign_transaction(sender, tx)


def reference_quantile(data: list[float], q: float) -> float:
    """Linear interpolation between closest ranks over the sorted sample."""
    pos = (len(data) - 1) * q
    lo = math.floor(pos)
    hi = math.ceil(pos)
    return data[lo] + (data[hi] - data[lo]) * (pos - lo)


def reference_five_number(values) -> tuple[float, float, float, float, float]:
    data = sorted(float(v) for v in values)
    return tuple(reference_quantile(data, q) for q in (0.0, 0.25, 0.5, 0.75, 1.0))


def reference_pearson(xs, ys) -> float | None:
    """Textbook Pearson r; None when either side has zero variance."""
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    dx = [x - mean_x for x in xs]
    dy = [y - mean_y for y in ys]
    sx = math.sqrt(sum(d * d for d in dx))
    sy = math.sqrt(sum(d * d for d in dy))
    if sx == 0.0 or sy == 0.0:
        return None
    return sum(a * b for a, b in zip(dx, dy)) / (sx * sy)
