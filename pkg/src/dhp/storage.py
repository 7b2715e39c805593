"""Append-only persistence and consortium file formats.

Block log: magic "DHPB" + u8 version, then length-prefixed canonical block
frames (u32-BE length + block bytes). Recovery replays every frame through
full validation; a torn final frame (truncated write) is discarded and the
file trimmed back to the last good boundary, while anything else corrupt
raises with the exact byte offset of the offending frame.

Receipt log: magic "DHPR" + u8 version + length-prefixed receipt frames.
Registry file: one member per line, `ROLE hex_id hex_pubkey`.
Key file: a single `ROLE hex_id hex_seed` line; public key and id re-derive
from the seed on load, so tampering is detected.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

from .core import ActorId, DhpError, EncodingError, Registry, Role
from .crypto import KeyPair, actor_id_for, derive_public
from .ledger import Block, ChainState, InvalidBlock, append_block, block_bytes, parse_block
from .protocol import VerificationReceipt, parse_receipt_frame, receipt_frame_bytes

BLOCK_LOG_MAGIC = b"DHPB"
RECEIPT_LOG_MAGIC = b"DHPR"
LOG_VERSION = 1
_HEADER_LEN = 5  # magic + version byte


class CorruptLog(DhpError):
    """A log frame failed validation; offset is the frame's byte position."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt frame at offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


def _init_log(path: Path, magic: bytes) -> None:
    if not path.exists() or path.stat().st_size == 0:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(magic + bytes((LOG_VERSION,)))


def _check_header(data: bytes, magic: bytes) -> None:
    if len(data) < _HEADER_LEN or data[:4] != magic:
        raise CorruptLog(0, f"bad magic, expected {magic!r}")
    if data[4] != LOG_VERSION:
        raise CorruptLog(4, f"unsupported log version {data[4]}")


def read_frames(data: bytes, magic: bytes, strict: bool) -> tuple[list[tuple[int, bytes]], int | None]:
    """Split a log into (offset, payload) frames.

    Returns (frames, torn_offset). A torn tail (incomplete length prefix or
    short payload at end of file) is tolerated unless strict, in which case it
    raises CorruptLog.
    """
    _check_header(data, magic)
    frames: list[tuple[int, bytes]] = []
    pos = _HEADER_LEN
    while pos < len(data):
        if pos + 4 > len(data):
            if strict:
                raise CorruptLog(pos, "incomplete frame length")
            return frames, pos
        (n,) = struct.unpack_from(">I", data, pos)
        if pos + 4 + n > len(data):
            if strict:
                raise CorruptLog(pos, f"frame claims {n} bytes past end of file")
            return frames, pos
        frames.append((pos, data[pos + 4:pos + 4 + n]))
        pos += 4 + n
    return frames, None


def replay_block_log(
    path: Path | str,
    registry: Registry,
    now: int,
    strict: bool = False,
    genesis_time: int = 0,
) -> tuple[ChainState, int | None]:
    """Rebuild chain state by replaying every block frame through validation.

    Raises CorruptLog (with the frame's byte offset) for any frame that fails
    to parse or validate. Returns (state, torn_offset): torn_offset is the
    position of a truncated final frame in recovery mode, None otherwise.
    """
    data = Path(path).read_bytes()
    frames, torn = read_frames(data, BLOCK_LOG_MAGIC, strict)
    state = ChainState.genesis(registry, genesis_time=genesis_time)
    for offset, payload in frames:
        try:
            block = parse_block(payload, registry)
        except EncodingError as exc:
            raise CorruptLog(offset, f"unparseable block: {exc}") from exc
        try:
            state = append_block(state, block, now)
        except InvalidBlock as exc:
            raise CorruptLog(offset, f"invalid block: {exc.error.value}") from exc
    return state, torn


class BlockLog:
    """Writer side of the block log: recover-on-open, append-with-sync."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        _init_log(self.path, BLOCK_LOG_MAGIC)

    def recover(self, registry: Registry, now: int, genesis_time: int = 0) -> ChainState:
        """Replay the log, discarding a torn tail (the file is trimmed)."""
        state, torn = replay_block_log(self.path, registry, now, strict=False, genesis_time=genesis_time)
        if torn is not None:
            with open(self.path, "r+b") as fh:
                fh.truncate(torn)
        return state

    def append(self, block: Block) -> None:
        payload = block_bytes(block)
        with open(self.path, "ab") as fh:
            fh.write(struct.pack(">I", len(payload)) + payload)
            fh.flush()
            os.fsync(fh.fileno())


class ReceiptLog:
    def __init__(self, path: Path | str):
        self.path = Path(path)
        _init_log(self.path, RECEIPT_LOG_MAGIC)

    def append(self, receipt: VerificationReceipt) -> None:
        payload = receipt_frame_bytes(receipt)
        with open(self.path, "ab") as fh:
            fh.write(struct.pack(">I", len(payload)) + payload)
            fh.flush()
            os.fsync(fh.fileno())

    def read_all(self, registry: Registry | None = None) -> list[VerificationReceipt]:
        data = self.path.read_bytes()
        frames, torn = read_frames(data, RECEIPT_LOG_MAGIC, strict=False)
        if torn is not None:
            with open(self.path, "r+b") as fh:
                fh.truncate(torn)
        receipts = []
        for offset, payload in frames:
            try:
                receipts.append(parse_receipt_frame(payload, registry))
            except EncodingError as exc:
                raise CorruptLog(offset, f"unparseable receipt: {exc}") from exc
        return receipts


def read_genesis_time(data_dir: Path | str) -> int:
    """Genesis time persisted in a node's data dir (0 when absent)."""
    path = Path(data_dir) / "genesis.txt"
    if not path.exists():
        return 0
    try:
        return int(path.read_text().strip())
    except ValueError:
        raise EncodingError("genesis.txt must hold an integer timestamp") from None


def write_genesis_time(data_dir: Path | str, genesis_time: int) -> None:
    (Path(data_dir) / "genesis.txt").write_text(f"{genesis_time}\n")


# --- registry and key files --------------------------------------------------


def format_registry(registry: Registry) -> str:
    return "".join(
        f"{m.role.name} {m.id.hex()} {m.public_key.hex()}\n" for m in registry.members
    )


def parse_registry(text: str) -> Registry:
    members: list[ActorId] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise EncodingError(f"registry line {lineno}: expected `role hex_id hex_pubkey`")
        role_name, id_hex, pub_hex = parts
        try:
            role = Role[role_name.upper()]
            actor_id = bytes.fromhex(id_hex)
            public = bytes.fromhex(pub_hex)
        except (KeyError, ValueError):
            raise EncodingError(f"registry line {lineno}: bad field") from None
        if len(actor_id) != 16:
            raise EncodingError(f"registry line {lineno}: id must be 16 bytes")
        members.append(ActorId(role=role, id=actor_id, public_key=public))
    return Registry(members=tuple(members))


def load_registry(path: Path | str) -> Registry:
    return parse_registry(Path(path).read_text())


def save_registry(path: Path | str, registry: Registry) -> None:
    Path(path).write_text(format_registry(registry))


def save_keypair(path: Path | str, key: KeyPair) -> None:
    Path(path).write_text(f"{key.owner.role.name} {key.owner.id.hex()} {key.secret.hex()}\n")


def load_keypair(path: Path | str) -> KeyPair:
    line = Path(path).read_text().strip()
    parts = line.split()
    if len(parts) != 3:
        raise EncodingError("key file must be a single `role hex_id hex_seed` line")
    role_name, id_hex, seed_hex = parts
    try:
        role = Role[role_name.upper()]
        claimed_id = bytes.fromhex(id_hex)
        seed = bytes.fromhex(seed_hex)
    except (KeyError, ValueError):
        raise EncodingError("key file has a bad field") from None
    public = derive_public(seed)
    if actor_id_for(public) != claimed_id:
        raise EncodingError("key file id does not match its seed")
    owner = ActorId(role=role, id=claimed_id, public_key=public)
    return KeyPair(secret=seed, public=public, owner=owner)


# --- manifest files ----------------------------------------------------------


def parse_manifest(text: str) -> list[tuple[bytes, int]]:
    """Manifest lines: `hex_header_hash record_index`."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise EncodingError(f"manifest line {lineno}: expected `hex_hash index`")
        try:
            entries.append((bytes.fromhex(parts[0]), int(parts[1])))
        except ValueError:
            raise EncodingError(f"manifest line {lineno}: bad field") from None
    return entries


def format_manifest(entries: list[tuple[bytes, int]]) -> str:
    return "".join(f"{h.hex()} {i}\n" for h, i in entries)
