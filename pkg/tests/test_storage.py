import struct

import pytest

from dhp.core import EncodingError, Role
from dhp.ledger import chain_bytes
from dhp.protocol import bm_verify
from dhp.storage import (
    BlockLog,
    CorruptLog,
    ReceiptLog,
    format_manifest,
    load_keypair,
    load_registry,
    parse_manifest,
    parse_registry,
    format_registry,
    replay_block_log,
    save_keypair,
    save_registry,
)

from conftest import Consortium, make_doc, seeded_key
from test_protocol import POLICY, issue_and_register
from test_ledger import grow_chain

T0 = 1_700_000_000
NOW = T0 + 1_000_000


def write_chain(tmp_path, blocks=6, per_block=2):
    c = Consortium()
    state = grow_chain(c, blocks, per_block)
    log = BlockLog(tmp_path / "blocks.log")
    for block in state.blocks[1:]:
        log.append(block)
    return c, state, log


def test_block_log_round_trip(tmp_path):
    c, state, log = write_chain(tmp_path)
    replayed, torn = replay_block_log(log.path, c.registry, NOW, genesis_time=c.genesis_time)
    assert torn is None
    assert chain_bytes(replayed) == chain_bytes(state)


def test_block_log_recover_discards_torn_tail(tmp_path):
    c, state, log = write_chain(tmp_path, blocks=4, per_block=1)
    data = log.path.read_bytes()
    log.path.write_bytes(data[:-7])  # tear the final frame mid-payload
    recovered = BlockLog(log.path).recover(c.registry, NOW, genesis_time=c.genesis_time)
    assert len(recovered.blocks) == len(state.blocks) - 1
    # the torn bytes are gone; appending the block again restores the chain
    log2 = BlockLog(log.path)
    log2.append(state.blocks[-1])
    replayed, torn = replay_block_log(log.path, c.registry, NOW, strict=True, genesis_time=c.genesis_time)
    assert torn is None
    assert chain_bytes(replayed) == chain_bytes(state)


def test_block_log_truncation_at_any_frame_boundary_recovers_prefix(tmp_path):
    c, state, log = write_chain(tmp_path, blocks=5, per_block=1)
    pristine = log.path.read_bytes()
    boundaries = [5] + [off + 4 + struct.unpack_from(">I", pristine, off)[0]
                        for off in frame_offsets(pristine)]
    for k, boundary in enumerate(boundaries):
        log.path.write_bytes(pristine[:boundary])
        recovered = BlockLog(log.path).recover(c.registry, NOW, genesis_time=c.genesis_time)
        assert len(recovered.blocks) == 1 + k  # genesis + k surviving frames
        assert chain_bytes(recovered) == chain_bytes(
            type(state)(
                blocks=state.blocks[:1 + k],
                authority_set=state.authority_set,
                issuer_registry=state.issuer_registry,
                index={},
                header_index={},
            )
        )
    log.path.write_bytes(pristine)


def test_block_log_strict_rejects_torn_tail(tmp_path):
    c, _, log = write_chain(tmp_path, blocks=3, per_block=1)
    data = log.path.read_bytes()
    log.path.write_bytes(data[:-2])
    with pytest.raises(CorruptLog):
        replay_block_log(log.path, c.registry, NOW, strict=True, genesis_time=c.genesis_time)


def frame_offsets(data):
    offsets = []
    pos = 5
    while pos < len(data):
        offsets.append(pos)
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4 + n
    return offsets


def test_block_log_single_byte_corruption_is_frame_accurate(tmp_path):
    c, _, log = write_chain(tmp_path, blocks=5, per_block=2)
    pristine = log.path.read_bytes()
    offsets = frame_offsets(pristine)
    target = 2  # corrupt a byte in the middle of the third frame's payload
    mutated = bytearray(pristine)
    mutated[offsets[target] + 40] ^= 0x01
    log.path.write_bytes(bytes(mutated))
    with pytest.raises(CorruptLog) as err:
        replay_block_log(log.path, c.registry, NOW, strict=True, genesis_time=c.genesis_time)
    assert err.value.offset == offsets[target]


def test_block_log_corrupt_length_prefix_detected(tmp_path):
    c, _, log = write_chain(tmp_path, blocks=3, per_block=1)
    pristine = log.path.read_bytes()
    offsets = frame_offsets(pristine)
    mutated = bytearray(pristine)
    mutated[offsets[1]] ^= 0x20  # frame now claims a giant length
    log.path.write_bytes(bytes(mutated))
    with pytest.raises(CorruptLog) as err:
        replay_block_log(log.path, c.registry, NOW, strict=True, genesis_time=c.genesis_time)
    assert err.value.offset == offsets[1]


def test_block_log_bad_magic(tmp_path):
    path = tmp_path / "blocks.log"
    path.write_bytes(b"NOPE\x01")
    c = Consortium()
    with pytest.raises(CorruptLog) as err:
        replay_block_log(path, c.registry, NOW)
    assert err.value.offset == 0


def test_block_log_restart_append_cycles(tmp_path):
    c = Consortium()
    state = c.state
    path = tmp_path / "blocks.log"
    serial = 0
    for cycle in range(10):
        log = BlockLog(path)
        recovered = log.recover(c.registry, NOW, genesis_time=c.genesis_time)
        assert chain_bytes(recovered) == chain_bytes(state)
        grown = grow_chain_from(c, recovered, serial)
        serial += 1
        log.append(grown.blocks[-1])
        state = grown
    replayed, _ = replay_block_log(path, c.registry, NOW, strict=True, genesis_time=c.genesis_time)
    assert chain_bytes(replayed) == chain_bytes(state)


def grow_chain_from(c, state, serial):
    from dhp.ledger import append_block, propose_block
    from dhp.protocol import thf_issue
    from random import Random

    hsa = c.hsa_keys[len(state.blocks) % len(c.hsa_keys)]
    now = T0 + 60 * (serial + 2)
    pending = thf_issue(
        c.thf_keys[0], make_doc(5000 + serial), True, c.method, now, now=now, rng=Random(serial)
    )
    block = propose_block(state, [pending.record], hsa, now)
    return append_block(state, block, now)


def test_receipt_log_round_trip(tmp_path, consortium):
    state, tokens, _ = issue_and_register(consortium, [make_doc(0), make_doc(1)])
    log = ReceiptLog(tmp_path / "receipts.log")
    receipts = []
    for token, doc in zip(tokens, [make_doc(0), make_doc(1)]):
        _, receipt = bm_verify(consortium.bm_keys[0], state, token, doc, POLICY, T0 + 3600)
        log.append(receipt)
        receipts.append(receipt)
    assert log.read_all(consortium.registry) == receipts


def test_registry_text_round_trip(consortium):
    text = format_registry(consortium.registry)
    assert parse_registry(text) == consortium.registry


def test_registry_file_round_trip(tmp_path, consortium):
    path = tmp_path / "registry.txt"
    save_registry(path, consortium.registry)
    assert load_registry(path) == consortium.registry


@pytest.mark.parametrize(
    "text",
    [
        "THF deadbeef\n",                      # missing field
        "WIZARD aa11 bb22\n",                  # unknown role
        "THF zz bb22\n",                       # bad hex
        "THF aabb ccdd\n",                     # id not 16 bytes
    ],
)
def test_registry_parse_errors(text):
    with pytest.raises(EncodingError):
        parse_registry(text)


def test_keypair_file_round_trip(tmp_path):
    key = seeded_key(Role.HSA, "persisted")
    path = tmp_path / "hsa.key"
    save_keypair(path, key)
    assert load_keypair(path) == key


def test_keypair_file_tamper_detected(tmp_path):
    key = seeded_key(Role.HSA, "persisted")
    path = tmp_path / "hsa.key"
    save_keypair(path, key)
    role, actor_id, seed = path.read_text().split()
    other = seeded_key(Role.HSA, "other")
    path.write_text(f"{role} {actor_id} {other.secret.hex()}\n")
    with pytest.raises(EncodingError):
        load_keypair(path)


def test_manifest_round_trip():
    entries = [(b"\x01" * 32, 0), (b"\x02" * 32, 7)]
    assert parse_manifest(format_manifest(entries)) == entries
    with pytest.raises(EncodingError):
        parse_manifest("onlyonefield\n")
    with pytest.raises(EncodingError):
        parse_manifest("zz 0\n")
