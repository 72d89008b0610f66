"""Simulated trust authority and signature scheme.

Real deployments would use elliptic-curve signatures issued through a trust
authority. Here the authority is an in-process registry and signatures are
HMAC-SHA256 tags under a per-entity secret derived from the federation seed.
Verification goes through the authority, which holds the key material; the
:class:`SignatureScheme` protocol is the swap point for a real scheme.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .errors import ConfigurationError, ProtocolViolation

ROLES = ("worker", "miner", "publisher", "buyer", "recorder")


class SignatureScheme(Protocol):
    def keygen(self, entity_id: str, seed: int) -> tuple[bytes, bytes]: ...
    def sign(self, secret: bytes, message: bytes) -> bytes: ...
    def verify(self, secret: bytes, public: bytes, message: bytes, signature: bytes) -> bool: ...


class KeyedHashScheme:
    """Deterministic keyed-hash signatures (32-byte tags)."""

    def keygen(self, entity_id: str, seed: int) -> tuple[bytes, bytes]:
        secret = hashlib.sha256(f"bfel-key|{seed}|{entity_id}".encode()).digest()
        public = hashlib.sha256(b"pk|" + secret).digest()
        return secret, public

    def sign(self, secret: bytes, message: bytes) -> bytes:
        return hmac.new(secret, message, hashlib.sha256).digest()

    def verify(self, secret: bytes, public: bytes, message: bytes, signature: bytes) -> bool:
        if hashlib.sha256(b"pk|" + secret).digest() != public:
            return False
        return hmac.compare_digest(self.sign(secret, message), signature)


@dataclass(frozen=True)
class Identity:
    entity_id: str
    public_key: bytes
    role: str


@dataclass(frozen=True)
class Signer:
    """An entity's private signing capability."""

    identity: Identity
    _secret: bytes
    _scheme: SignatureScheme

    @property
    def entity_id(self) -> str:
        return self.identity.entity_id

    def sign(self, message: bytes) -> bytes:
        return self._scheme.sign(self._secret, message)


class Authority:
    """Registry of identities; verifies signatures on behalf of any reader."""

    def __init__(self, seed: int = 0, scheme: SignatureScheme | None = None):
        self.seed = seed
        self.scheme = scheme or KeyedHashScheme()
        self._identities: dict[str, Identity] = {}
        self._secrets: dict[str, bytes] = {}

    def register(self, entity_id: str, role: str) -> Identity:
        if role not in ROLES:
            raise ConfigurationError(f"unknown role {role!r}")
        if entity_id in self._identities:
            raise ProtocolViolation(f"identity {entity_id!r} already registered")
        secret, public = self.scheme.keygen(entity_id, self.seed)
        ident = Identity(entity_id, public, role)
        self._identities[entity_id] = ident
        self._secrets[entity_id] = secret
        return ident

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._identities

    def identity(self, entity_id: str) -> Identity:
        try:
            return self._identities[entity_id]
        except KeyError:
            raise ProtocolViolation(f"unregistered entity {entity_id!r}") from None

    def signer(self, entity_id: str) -> Signer:
        return Signer(self.identity(entity_id), self._secrets[entity_id], self.scheme)

    def verify(self, entity_id: str, message: bytes, signature: bytes) -> bool:
        if entity_id not in self._identities:
            return False
        return self.scheme.verify(self._secrets[entity_id],
                                  self._identities[entity_id].public_key, message, signature)

    @property
    def identities(self) -> list[Identity]:
        return sorted(self._identities.values(), key=lambda i: i.entity_id)

    # The registry is persisted next to run outputs so chains can be re-verified
    # offline. Secrets are re-derived from the seed rather than written out.
    def save(self, path) -> None:
        doc = {"seed": self.seed,
               "identities": [{"id": i.entity_id, "role": i.role, "public_key": i.public_key.hex()}
                              for i in self.identities]}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Authority":
        doc = json.loads(Path(path).read_text())
        auth = cls(doc["seed"])
        for entry in doc["identities"]:
            ident = auth.register(entry["id"], entry["role"])
            if ident.public_key.hex() != entry["public_key"]:
                raise ConfigurationError(f"public key mismatch for {entry['id']!r}")
        return auth
