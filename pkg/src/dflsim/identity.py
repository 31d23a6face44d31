"""Node identities, Ed25519 signatures and the simulation-wide digest.

A node's id is the digest of its Ed25519 public key, so ids are 32 bytes and
compare lexicographically; every "ties by NodeId ascending" rule in the
package relies on plain ``bytes`` ordering.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

NodeId = bytes
Digest = bytes
Signature = bytes

DIGEST_SIZE = 32
_SUPPORTED_HASHES = ("sha256", "sha3_256", "blake2s")
_hash_name = "sha256"


def configure_hash(name: str) -> None:
    """Select the 256-bit hash used by :func:`digest` for the whole process."""
    global _hash_name
    if name not in _SUPPORTED_HASHES:
        raise ValueError(f"unsupported hash {name!r}; choose one of {_SUPPORTED_HASHES}")
    _hash_name = name


def hash_name() -> str:
    return _hash_name


def digest(data: bytes) -> Digest:
    return hashlib.new(_hash_name, data).digest()


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes = field(repr=False)


@lru_cache(maxsize=4096)
def _private_key(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


@lru_cache(maxsize=4096)
def _public_key(public: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public)


def generate_identity(seed: int) -> tuple[NodeId, KeyPair]:
    """Derive a keypair and node id deterministically from an integer seed."""
    material = b"dflsim/identity/" + int(seed).to_bytes(16, "big", signed=True)
    secret = hashlib.sha256(material).digest()
    public = _private_key(secret).public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return digest(public), KeyPair(public=public, secret=secret)


def sign(kp: KeyPair, data: bytes) -> Signature:
    return _private_key(kp.secret).sign(data)


@lru_cache(maxsize=1 << 17)
def verify(public: bytes, data: bytes, sig: bytes) -> bool:
    """Check an Ed25519 signature; malformed keys or signatures yield False.

    Memoized: broadcast fan-out makes every replica check the same
    signature, and verification is a pure function of its arguments.
    """
    if len(sig) != 64 or len(public) != 32:
        return False
    try:
        _public_key(public).verify(sig, data)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class Identity:
    node_id: NodeId
    keys: KeyPair

    @classmethod
    def from_seed(cls, seed: int) -> "Identity":
        node_id, keys = generate_identity(seed)
        return cls(node_id, keys)

    def sign(self, data: bytes) -> Signature:
        return sign(self.keys, data)


class KeyDirectory:
    """Public keys of known nodes, as published at registration."""

    def __init__(self) -> None:
        self._keys: dict[NodeId, bytes] = {}

    def add(self, node: NodeId, public: bytes) -> None:
        if digest(public) != node:
            raise ValueError("node id does not match public key")
        self._keys[node] = public

    def __contains__(self, node: object) -> bool:
        return node in self._keys

    def public_key(self, node: NodeId) -> bytes | None:
        return self._keys.get(node)

    def verify(self, node: NodeId, data: bytes, sig: bytes) -> bool:
        public = self._keys.get(node)
        return public is not None and verify(public, data, sig)


def short(node: NodeId) -> str:
    """Compact printable form of an id for logs and CSVs."""
    return node.hex()[:12]
