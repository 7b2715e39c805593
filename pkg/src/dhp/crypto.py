"""Key management, Ed25519 signatures, and salted document commitments.

Signing is deterministic (RFC 8032), so golden vectors are stable across runs
and platforms. The commitment is a domain-tagged SHA-256 over a fresh 16-byte
salt and the canonical document bytes: hiding without the salt, binding to
(salt, document). The salt travels only inside the traveller's token, which is
what keeps on-chain records unlinkable and unexplorable.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass
from functools import lru_cache
from random import Random

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from .core import ActorId, DhpError, EncodingError, Role, TravelDocument, canonical_doc_bytes

COMMIT_TAG = b"DHPC1|"
ACTOR_ID_TAG = b"DHPID|"
SALT_LEN = 16
SEED_LEN = 32
SIGNATURE_LEN = 64

#: A commitment is a raw 32-byte digest.
Commitment = bytes


class MalformedKey(DhpError):
    """Secret key bytes are not a valid signing key."""


@dataclass(frozen=True)
class KeyPair:
    """An actor's signing seed and verification key. secret stays local."""

    secret: bytes
    public: bytes
    owner: ActorId


@dataclass(frozen=True)
class Salt:
    """Per-credential 16-byte randomness; disclosed only inside the token."""

    value: bytes


def new_salt(rng: Random | None = None) -> Salt:
    """Draw a fresh salt; pass a seeded Random only in simulations/tests."""
    if rng is None:
        return Salt(secrets.token_bytes(SALT_LEN))
    return Salt(rng.randbytes(SALT_LEN))


def _private_key(secret: bytes) -> ed25519.Ed25519PrivateKey:
    if not isinstance(secret, bytes) or len(secret) != SEED_LEN:
        raise MalformedKey(f"signing key must be {SEED_LEN} bytes")
    try:
        return ed25519.Ed25519PrivateKey.from_private_bytes(secret)
    except Exception as exc:  # pragma: no cover - library rejects nothing else
        raise MalformedKey(str(exc)) from exc


def derive_public(secret: bytes) -> bytes:
    return _private_key(secret).public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def actor_id_for(public: bytes) -> bytes:
    """16-byte actor id derived from the verification key."""
    return hashlib.sha256(ACTOR_ID_TAG + public).digest()[:16]


def keygen(role: Role, seed: bytes | None = None) -> KeyPair:
    """Create a key pair for a consortium role.

    With a 32-byte seed the output is fully deterministic (tests and
    simulations only); without one, fresh randomness is used.
    """
    secret = secrets.token_bytes(SEED_LEN) if seed is None else seed
    public = derive_public(secret)
    owner = ActorId(role=role, id=actor_id_for(public), public_key=public)
    return KeyPair(secret=secret, public=public, owner=owner)


def sign(secret: bytes, message: bytes) -> bytes:
    """Sign a message; deterministic for a fixed (secret, message)."""
    return _private_key(secret).sign(message)


def verify_sig(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff signature is valid for message under public.

    Total: malformed keys, empty or garbage signatures all return False.
    """
    return _verify_cached(public, message, signature)


# Every replica revalidates the same record signatures on append; memoising
# the (pure) verification cuts most of that cost in simulations.
@lru_cache(maxsize=1 << 16)
def _verify_cached(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        key = ed25519.Ed25519PublicKey.from_public_bytes(public)
        key.verify(signature, message)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def commit(doc: TravelDocument, salt: Salt) -> Commitment:
    """Salted, domain-tagged digest binding a credential to a document."""
    if not isinstance(salt.value, bytes) or len(salt.value) != SALT_LEN:
        raise EncodingError(f"salt must be {SALT_LEN} bytes")
    return hashlib.sha256(COMMIT_TAG + salt.value + canonical_doc_bytes(doc)).digest()


def format_commit_vectors(rows: list[tuple[bytes, Salt, Commitment]]) -> str:
    """Test-vector lines: `doc_hex salt_hex commitment_hex`, one per row."""
    return "".join(f"{doc.hex()} {salt.value.hex()} {digest.hex()}\n" for doc, salt, digest in rows)


def parse_commit_vectors(text: str) -> list[tuple[bytes, Salt, Commitment]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 3:
            raise EncodingError(f"vector line {lineno}: expected 3 hex fields")
        try:
            doc_hex, salt_hex, digest_hex = (bytes.fromhex(p) for p in parts)
        except ValueError:
            raise EncodingError(f"vector line {lineno}: bad hex") from None
        rows.append((doc_hex, Salt(salt_hex), digest_hex))
    return rows
