"""AEAD sealing and digests.

Keys are derived from the scenario seed so that runs are reproducible.
Nonces come from a per-key counter; a key is never used with two sealers.
"""
from __future__ import annotations

import copy
import hashlib
import itertools

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

AEAD_ALGORITHM = "AES-256-GCM"
NONCE_LEN = 12


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def derive_key(seed: int | bytes, label: str, length: int = 32) -> bytes:
    ikm = seed if isinstance(seed, bytes) else int(seed).to_bytes(16, "little", signed=True)
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=b"flexsim",
                info=label.encode()).derive(ikm)


class OpenFailure(Exception):
    """Authentication failed while opening a sealed blob."""


class Sealer:
    def __init__(self, key: bytes, nonce_prefix: bytes = b"\0\0\0\0"):
        if len(key) != 32:
            raise ValueError("AES-256-GCM needs a 32-byte key")
        self._key = key
        self._aead = AESGCM(key)
        self._prefix = nonce_prefix[:4].ljust(4, b"\0")
        self._counter = itertools.count(1)

    def __deepcopy__(self, memo):
        # the AEAD context is not copyable; the nonce counter must carry over
        clone = Sealer(self._key, self._prefix)
        clone._counter = copy.copy(self._counter)
        return clone

    def seal(self, plaintext: bytes, aad: bytes = b"") -> bytes:
        nonce = self._prefix + next(self._counter).to_bytes(8, "big")
        return nonce + self._aead.encrypt(nonce, plaintext, aad)

    def open(self, blob: bytes, aad: bytes = b"") -> bytes:
        if len(blob) < NONCE_LEN + 16:
            raise OpenFailure("blob too short")
        try:
            return self._aead.decrypt(blob[:NONCE_LEN], blob[NONCE_LEN:], aad)
        except InvalidTag as exc:
            raise OpenFailure("authentication tag mismatch") from exc
