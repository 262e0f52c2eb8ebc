"""Chain primitives: codec, signatures, merkle trees, blocks, and the ledger."""

import hashlib
import random

import pytest

from brokerchain.core import (
    FieldReader,
    HASH_ZERO,
    LedgerState,
    Transaction,
    Violation,
    apply_block,
    build_block,
    compute_merkle_root,
    encode_fields,
    make_genesis,
    quantize_timestamp,
    sha256,
    sign_transaction,
    validate_block,
    verify_signature,
)
from helpers import make_keypair, make_tx


# -- independent oracles, written before looking at outputs -----------------


def reference_merkle_root(leaves):
    """Recursive reference tree with duplicate-last padding."""
    assert leaves
    if len(leaves) == 1:
        return leaves[0]
    if len(leaves) % 2:
        leaves = leaves + [leaves[-1]]
    pairs = [
        hashlib.sha256(leaves[i] + leaves[i + 1]).digest()
        for i in range(0, len(leaves), 2)
    ]
    return reference_merkle_root(pairs)


def reference_apply_tx(balances, nonces, tx):
    """Single-transfer fold step for the fold-equivalence check."""
    assert tx.nonce == nonces.get(tx.sender, 0) + 1
    assert tx.amount <= balances.get(tx.sender, 0)
    balances[tx.sender] -= tx.amount
    balances[tx.receiver] = balances.get(tx.receiver, 0) + tx.amount
    nonces[tx.sender] = tx.nonce


# -- codec -------------------------------------------------------------------


def test_encode_fields_roundtrip():
    data = encode_fields(b"abc", 7, b"", 2**64 - 1)
    r = FieldReader(data)
    assert r.read_bytes() == b"abc"
    assert r.read_u64() == 7
    assert r.read_bytes() == b""
    assert r.read_u64() == 2**64 - 1
    r.expect_end()


def test_encode_rejects_bool_and_negative():
    with pytest.raises(TypeError):
        encode_fields(True)
    with pytest.raises(ValueError):
        encode_fields(-1)


def test_reader_rejects_truncation_and_trailing():
    data = encode_fields(b"abcd")
    with pytest.raises(ValueError):
        FieldReader(data[:-1]).read_bytes()
    r = FieldReader(data + b"\x00")
    r.read_bytes()
    with pytest.raises(ValueError):
        r.expect_end()


# -- signatures ---------------------------------------------------------------


def test_sign_verify_roundtrip():
    kp = make_keypair("signer")
    sig = kp.sign(b"payload")
    assert verify_signature(kp.public_bytes, sig, b"payload")


def test_tampered_payload_fails():
    kp = make_keypair("signer")
    sig = kp.sign(b"payload")
    assert not verify_signature(kp.public_bytes, sig, b"payloae")


def test_wrong_key_fails():
    a, b = make_keypair("a"), make_keypair("b")
    sig = a.sign(b"payload")
    assert not verify_signature(b.public_bytes, sig, b"payload")


def test_malformed_key_or_signature_fails_closed():
    kp = make_keypair("signer")
    sig = kp.sign(b"m")
    assert not verify_signature(kp.public_bytes[:-1], sig, b"m")
    assert not verify_signature(kp.public_bytes, sig[:-1], b"m")


# -- transactions ---------------------------------------------------------------


def test_transaction_roundtrip_and_id():
    kp = make_keypair("sender")
    tx = make_tx(kp, make_keypair("rcv").public_bytes, amount=5, nonce=1)
    parsed = Transaction.from_bytes(tx.to_bytes())
    assert parsed == tx
    assert parsed.tx_id == tx.tx_id == sha256(tx.to_bytes())
    assert verify_signature(tx.sender, tx.signature, tx.signing_bytes())


def test_sign_transaction_requires_matching_sender():
    kp, other = make_keypair("s"), make_keypair("o")
    tx = Transaction(
        sender=other.public_bytes,
        receiver=kp.public_bytes,
        amount=1,
        nonce=1,
        created_at_ms=0,
    )
    with pytest.raises(ValueError):
        sign_transaction(kp, tx)


# -- merkle -------------------------------------------------------------------


def test_merkle_single_leaf_is_root():
    h = sha256(b"only")
    assert compute_merkle_root([h]) == h


def test_merkle_two_leaves():
    h1, h2 = sha256(b"a"), sha256(b"b")
    assert compute_merkle_root([h1, h2]) == sha256(h1 + h2)
    assert (
        compute_merkle_root([h1, h2]).hex()
        == "e5a01fee14e0ed5c48714f22180f25ad8365b53f9779f79dc4a3d7e93963f94a"
    )


def test_merkle_five_leaves_frozen_reference():
    leaves = [sha256(f"leaf-{i}".encode()) for i in range(5)]
    root = compute_merkle_root(leaves)
    assert root == reference_merkle_root(leaves)
    assert root.hex() == "3ad4abec5d43ae09f5275cf7ce77d8615e1e87164b255aa7661e237b1982a5bf"


def test_merkle_matches_reference_across_sizes():
    rng = random.Random(42)
    for size in range(1, 34):
        leaves = [sha256(rng.randbytes(16)) for _ in range(size)]
        assert compute_merkle_root(leaves) == reference_merkle_root(leaves)


def test_merkle_mutation_changes_root():
    leaves = [sha256(f"leaf-{i}".encode()) for i in range(8)]
    root = compute_merkle_root(leaves)
    mutated = list(leaves)
    mutated[3] = sha256(b"other")
    assert compute_merkle_root(mutated) != root


def test_merkle_empty_is_error():
    with pytest.raises(ValueError):
        compute_merkle_root([])


# -- timestamp quantization -------------------------------------------------------


def test_quantize_basic():
    assert quantize_timestamp(1736900003000, 5) == 1736900000


def test_quantize_exact_multiple_unchanged():
    assert quantize_timestamp(1736900000000, 5) == 1736900000


def test_quantize_floor_semantics():
    assert quantize_timestamp(4999, 5) == 0


def test_quantize_properties():
    rng = random.Random(7)
    for _ in range(500):
        t = rng.uniform(0, 2**41)
        g = rng.choice([1, 2, 5, 10, 60])
        q = quantize_timestamp(t, g)
        assert q % g == 0
        assert q <= t / 1000.0
        assert t / 1000.0 - q < g


def test_quantize_rejects_bad_granularity():
    with pytest.raises(ValueError):
        quantize_timestamp(1000, 0)


# -- blocks ------------------------------------------------------------------


def funded_ledger(keypairs, balance=1_000):
    return LedgerState.from_balances({kp.public_bytes: balance for kp in keypairs})


def make_valid_txs(count, tag="blk"):
    senders = [make_keypair(f"{tag}-{i}") for i in range(count)]
    receiver = make_keypair(f"{tag}-rcv").public_bytes
    txs = [make_tx(kp, receiver, amount=10, nonce=1) for kp in senders]
    return senders, txs


def test_build_block_is_order_canonical():
    senders, txs = make_valid_txs(6)
    prev = make_genesis()
    a = build_block(txs, prev, now_ms=12_000_000, granularity_s=5)
    rng = random.Random(3)
    shuffled = list(txs)
    rng.shuffle(shuffled)
    b = build_block(shuffled, prev, now_ms=12_000_000, granularity_s=5)
    assert a.to_bytes() == b.to_bytes()
    assert [t.tx_id for t in a.txs] == sorted(t.tx_id for t in txs)


def test_same_window_same_hash_different_window_differs():
    _, txs = make_valid_txs(4)
    prev = make_genesis()
    a = build_block(txs, prev, now_ms=10_000_000, granularity_s=5)
    b = build_block(txs, prev, now_ms=10_003_999, granularity_s=5)
    c = build_block(txs, prev, now_ms=10_005_000, granularity_s=5)
    assert a.block_hash == b.block_hash
    assert a.block_hash != c.block_hash


def test_one_tx_differs_changes_merkle_and_hash():
    senders, txs = make_valid_txs(4)
    prev = make_genesis()
    a = build_block(txs, prev, now_ms=10_000_000, granularity_s=5)
    other = make_tx(senders[0], make_keypair("elsewhere").public_bytes, amount=11, nonce=1)
    b = build_block([other] + txs[1:], prev, now_ms=10_000_000, granularity_s=5)
    assert a.header.merkle_root != b.header.merkle_root
    assert a.block_hash != b.block_hash


def test_block_bytes_roundtrip():
    from brokerchain.core import Block

    _, txs = make_valid_txs(3)
    block = build_block(txs, make_genesis(), now_ms=10_000_000, granularity_s=5)
    parsed = Block.from_bytes(block.to_bytes())
    assert parsed == block
    assert parsed.block_hash == block.block_hash


def test_genesis_shape():
    g = make_genesis()
    assert g.height == 0
    assert g.header.prev_hash == HASH_ZERO
    assert g.header.tx_count == 0


# -- validation ---------------------------------------------------------------


def test_validate_built_block_is_clean():
    senders, txs = make_valid_txs(5)
    ledger = funded_ledger(senders)
    block = build_block(txs, make_genesis(), now_ms=10_000_000, granularity_s=5)
    assert validate_block(block, make_genesis(), ledger, 5) == []


def test_validate_overspend():
    senders, txs = make_valid_txs(3)
    ledger = funded_ledger(senders)
    over = make_tx(senders[0], make_keypair("x").public_bytes, amount=2_000, nonce=1)
    block = build_block([over] + txs[1:], make_genesis(), now_ms=10_000_000, granularity_s=5)
    flagged = validate_block(block, make_genesis(), ledger, 5)
    idx = list(block.txs).index(over)
    assert flagged == [Violation("InvalidTx", index=idx, reason="InsufficientBalance")]


def test_validate_altered_merkle():
    from brokerchain.core import Block, BlockHeader

    senders, txs = make_valid_txs(3)
    ledger = funded_ledger(senders)
    good = build_block(txs, make_genesis(), now_ms=10_000_000, granularity_s=5)
    header = BlockHeader(
        height=good.header.height,
        prev_hash=good.header.prev_hash,
        merkle_root=sha256(b"not the root"),
        timestamp_q=good.header.timestamp_q,
        tx_count=good.header.tx_count,
    )
    bad = Block(header=header, txs=good.txs)
    kinds = {v.kind for v in validate_block(bad, make_genesis(), ledger, 5)}
    assert "BadMerkle" in kinds


def test_validate_bad_prev_and_timestamp():
    senders, txs = make_valid_txs(2)
    ledger = funded_ledger(senders)
    genesis = make_genesis()
    block = build_block(txs, genesis, now_ms=10_000_000, granularity_s=5)
    wrong_parent = build_block(txs, block, now_ms=10_000_000, granularity_s=5)
    kinds = {v.kind for v in validate_block(wrong_parent, genesis, ledger, 5)}
    assert "BadPrevHash" in kinds

    from brokerchain.core import Block, BlockHeader

    header = BlockHeader(
        height=block.header.height,
        prev_hash=block.header.prev_hash,
        merkle_root=block.header.merkle_root,
        timestamp_q=block.header.timestamp_q + 1,  # off the granularity grid
        tx_count=block.header.tx_count,
    )
    off_grid = Block(header=header, txs=block.txs)
    kinds = {v.kind for v in validate_block(off_grid, genesis, ledger, 5)}
    assert "BadTimestamp" in kinds


def test_validate_flags_unsorted_txs():
    from brokerchain.core import Block, BlockHeader

    senders, txs = make_valid_txs(3)
    ledger = funded_ledger(senders)
    ordered = sorted(txs, key=lambda t: t.tx_id)
    reversed_txs = tuple(reversed(ordered))
    header = BlockHeader(
        height=1,
        prev_hash=make_genesis().block_hash,
        merkle_root=compute_merkle_root([t.tx_id for t in reversed_txs]),
        timestamp_q=10_000,
        tx_count=3,
    )
    block = Block(header=header, txs=reversed_txs)
    reasons = [v.reason for v in validate_block(block, make_genesis(), ledger, 5)]
    assert "BadOrder" in reasons


def test_validate_stale_and_gapped_nonce():
    kp = make_keypair("nonce-test")
    rcv = make_keypair("rcv").public_bytes
    ledger = LedgerState.from_balances({kp.public_bytes: 1_000})
    ledger.nonces[kp.public_bytes] = 2
    stale = make_tx(kp, rcv, amount=1, nonce=2)
    block = build_block([stale], make_genesis(), now_ms=10_000_000, granularity_s=5)
    assert validate_block(block, make_genesis(), ledger, 5) == [
        Violation("InvalidTx", index=0, reason="BadNonce")
    ]
    gapped = make_tx(kp, rcv, amount=1, nonce=5)
    block = build_block([gapped], make_genesis(), now_ms=10_000_000, granularity_s=5)
    assert validate_block(block, make_genesis(), ledger, 5) == [
        Violation("InvalidTx", index=0, reason="BadNonce")
    ]


def test_validate_accepts_id_order_not_nonce_order():
    # Blocks sort by tx_id, so one sender's nonce-2 transfer may precede its
    # nonce-1 transfer inside the block; this must validate and apply.
    kp = make_keypair("two-in-block")
    rcv = make_keypair("rcv").public_bytes
    ledger = LedgerState.from_balances({kp.public_bytes: 1_000})
    tx1 = make_tx(kp, rcv, amount=10, nonce=1)
    tx2 = make_tx(kp, rcv, amount=20, nonce=2)
    block = build_block([tx1, tx2], make_genesis(), now_ms=10_000_000, granularity_s=5)
    assert validate_block(block, make_genesis(), ledger, 5) == []
    after = apply_block(ledger, block)
    assert after.balance(kp.public_bytes) == 970
    assert after.nonce(kp.public_bytes) == 2


def test_validate_bad_signature_and_skip():
    senders, txs = make_valid_txs(2)
    ledger = funded_ledger(senders)
    forged = Transaction(
        sender=txs[0].sender,
        receiver=txs[0].receiver,
        amount=txs[0].amount,
        nonce=txs[0].nonce,
        created_at_ms=txs[0].created_at_ms,
        signature=b"\x07" * 64,
    )
    block = build_block([forged, txs[1]], make_genesis(), now_ms=10_000_000, granularity_s=5)
    reasons = [v.reason for v in validate_block(block, make_genesis(), ledger, 5)]
    assert reasons == ["InvalidSignature"]
    assert validate_block(block, make_genesis(), ledger, 5, skip_signatures=True) == []


def test_validate_overspend_across_two_transfers():
    kp = make_keypair("split-spend")
    rcv = make_keypair("rcv").public_bytes
    ledger = LedgerState.from_balances({kp.public_bytes: 100})
    tx1 = make_tx(kp, rcv, amount=60, nonce=1)
    tx2 = make_tx(kp, rcv, amount=60, nonce=2)
    block = build_block([tx1, tx2], make_genesis(), now_ms=10_000_000, granularity_s=5)
    flagged = validate_block(block, make_genesis(), ledger, 5)
    assert len(flagged) == 1
    assert flagged[0].reason == "InsufficientBalance"
    # the nonce-2 transfer is the overspender regardless of block position
    assert block.txs[flagged[0].index].nonce == 2


# -- application ----------------------------------------------------------------


def test_apply_simple_transfer():
    a, b = make_keypair("A"), make_keypair("B")
    ledger = LedgerState.from_balances({a.public_bytes: 100, b.public_bytes: 0})
    tx = make_tx(a, b.public_bytes, amount=40, nonce=1)
    block = build_block([tx], make_genesis(), now_ms=10_000_000, granularity_s=5)
    after = apply_block(ledger, block)
    assert after.balance(a.public_bytes) == 60
    assert after.balance(b.public_bytes) == 40
    assert after.nonce(a.public_bytes) == 1


def test_apply_conserves_total_supply():
    senders, txs = make_valid_txs(8)
    ledger = funded_ledger(senders)
    block = build_block(txs, make_genesis(), now_ms=10_000_000, granularity_s=5)
    after = apply_block(ledger, block)
    assert after.total_supply() == ledger.total_supply()


def test_apply_block_matches_single_tx_fold():
    # fold-equivalence: the block application equals applying each transfer
    # alone, in per-sender nonce order
    count = 512
    senders = [make_keypair(f"fold-{i}") for i in range(count)]
    receiver = make_keypair("fold-rcv").public_bytes
    rng = random.Random(11)
    txs = [
        make_tx(kp, receiver, amount=rng.randint(1, 50), nonce=1) for kp in senders
    ]
    ledger = funded_ledger(senders)
    block = build_block(txs, make_genesis(), now_ms=10_000_000, granularity_s=5)
    after = apply_block(ledger, block)

    balances = dict(ledger.balances)
    nonces = {}
    for tx in sorted(block.txs, key=lambda t: (t.sender, t.nonce)):
        reference_apply_tx(balances, nonces, tx)
    assert after.balances == balances
    assert after.nonces == nonces


def test_apply_rejects_bad_blocks():
    kp = make_keypair("bad-apply")
    rcv = make_keypair("rcv").public_bytes
    ledger = LedgerState.from_balances({kp.public_bytes: 10})
    over = make_tx(kp, rcv, amount=11, nonce=1)
    block = build_block([over], make_genesis(), now_ms=10_000_000, granularity_s=5)
    with pytest.raises(ValueError):
        apply_block(ledger, block)
    stale = make_tx(kp, rcv, amount=1, nonce=0)
    with pytest.raises(ValueError):
        apply_block(
            ledger, build_block([stale], make_genesis(), now_ms=10_000_000, granularity_s=5)
        )
