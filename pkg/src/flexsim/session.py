"""Trusted-application lifecycle: secure boot, attested sessions, sealed requests, response proofs.

Primitives: Ed25519 signatures, X25519 key agreement with HKDF-SHA256, AES-256-GCM
and SHA-256.  Key generation is derived from a seed so that scenario runs are
reproducible; nothing else about the protocol depends on that.

Response proof wire format (all integers big-endian)::

    b"FXPF" | version:u8 | len:u8 digest-alg | len:u8 signature-alg
            | len:u16 model_id (utf-8)
            | request_hash:32 | output_hash:32 | len:u16 signature

The signature covers ``request_hash || output_hash || model_id``.  Parsing is
strict: truncated records, trailing bytes and unknown algorithms are rejected.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (AttestationFailure, BadSignature, CapacityError, ReplayDetected,
                     SealFailure)
from .physmem import Actor, PageState, PhysicalMemory
from .sealing import OpenFailure, Sealer, derive_key, sha256
from .timing import PAGE_SIZE

DIGEST_ALGORITHM = "SHA-256"
SIGNATURE_ALGORITHM = "Ed25519"
KEX_ALGORITHM = "X25519-HKDF-SHA256"
PROOF_MAGIC = b"FXPF"
PROOF_VERSION = 1
SECURE_WORLD = "secure"
# first TZ frame holds the key vault, the binary image follows
VAULT_FRAMES = 1

_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)
_RAW_PRIV = dict(encoding=serialization.Encoding.Raw, format=serialization.PrivateFormat.Raw,
                 encryption_algorithm=serialization.NoEncryption())


def _ed25519(seed: int, label: str) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(derive_key(seed, label))


def _x25519(seed: int, label: str) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(derive_key(seed, label))


def public_bytes(key) -> bytes:
    """Raw public key bytes of a private or public key."""
    if hasattr(key, "public_key"):
        key = key.public_key()
    return key.public_bytes(**_RAW)


def _verify(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# --------------------------------------------------------------------------
# vendor side
# --------------------------------------------------------------------------

@dataclass
class Vendor:
    """Device vendor: signs framework binaries and provisions the device keys."""

    seed: int = 0
    signing_key: Ed25519PrivateKey = field(init=False)
    device_key: Ed25519PrivateKey = field(init=False)
    boot_key: bytes = field(init=False)

    def __post_init__(self):
        self.signing_key = _ed25519(self.seed, "vendor-signing")
        self.device_key = _ed25519(self.seed, "device-attestation")
        self.boot_key = derive_key(self.seed, "binary-encryption")

    @property
    def verification_key(self) -> bytes:
        return public_bytes(self.signing_key)

    @property
    def device_public_key(self) -> bytes:
        return public_bytes(self.device_key)

    def package(self, image: bytes) -> tuple[bytes, bytes]:
        """Encrypt a framework image and sign the ciphertext digest."""
        binary = Sealer(self.boot_key, nonce_prefix=b"boot").seal(image, aad=b"framework-binary")
        return binary, self.signing_key.sign(sha256(binary))

    def provision(self) -> "DeviceKeys":
        return DeviceKeys(self.verification_key, self.boot_key,
                          self.device_key.private_bytes(**_RAW_PRIV))


@dataclass(frozen=True)
class DeviceKeys:
    """What the secure world holds before boot (fused or pre-provisioned)."""

    vendor_verification_key: bytes
    boot_key: bytes
    device_attestation_key: bytes


# --------------------------------------------------------------------------
# framework
# --------------------------------------------------------------------------

@dataclass
class FrameworkIdentity:
    signing_key: Ed25519PrivateKey
    binary_digest: bytes
    vendor_verification_key: bytes

    @property
    def public_key(self) -> bytes:
        return public_bytes(self.signing_key)


@dataclass(frozen=True)
class AttestationEvidence:
    binary_digest: bytes
    framework_public_key: bytes
    world: str
    transcript_hash: bytes
    signature: bytes

    def signed_message(self) -> bytes:
        return _attestation_message(self.binary_digest, self.framework_public_key,
                                    self.world, self.transcript_hash)


def _attestation_message(digest, framework_pub, world, transcript) -> bytes:
    return b"|".join([b"attest", digest, framework_pub, world.encode(), transcript])


@dataclass(frozen=True)
class ServerHello:
    session_id: int
    server_public: bytes
    evidence: AttestationEvidence


@dataclass(frozen=True)
class RequestEnvelope:
    session_id: int
    counter: int
    sealed: bytes


@dataclass(frozen=True)
class ResponseProof:
    request_hash: bytes
    output_hash: bytes
    model_id: str
    signature: bytes
    digest_algorithm: str = DIGEST_ALGORITHM
    signature_algorithm: str = SIGNATURE_ALGORITHM

    def signed_message(self) -> bytes:
        return self.request_hash + self.output_hash + self.model_id.encode()

    def to_bytes(self) -> bytes:
        d, s = self.digest_algorithm.encode(), self.signature_algorithm.encode()
        m = self.model_id.encode()
        return b"".join([
            PROOF_MAGIC, bytes([PROOF_VERSION]),
            bytes([len(d)]), d, bytes([len(s)]), s,
            struct.pack(">H", len(m)), m,
            self.request_hash, self.output_hash,
            struct.pack(">H", len(self.signature)), self.signature,
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "ResponseProof":
        """Strict parse; raises ``ValueError`` on any malformed record."""
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise ValueError("truncated proof")
            chunk = bytes(view[pos:pos + n])
            pos += n
            return chunk

        if take(4) != PROOF_MAGIC or take(1)[0] != PROOF_VERSION:
            raise ValueError("not a response proof")
        d = take(take(1)[0]).decode()
        s = take(take(1)[0]).decode()
        model = take(struct.unpack(">H", take(2))[0]).decode()
        req, out = take(32), take(32)
        sig = take(struct.unpack(">H", take(2))[0])
        if pos != len(view):
            raise ValueError("trailing bytes after proof")
        return cls(req, out, model, sig, d, s)


def request_hash(session_id: int, counter: int, model_index: int, prompt: bytes) -> bytes:
    return sha256(b"request", struct.pack(">QQI", session_id, counter, model_index), prompt)


def _encode_request(model_index: int, prompt: bytes) -> bytes:
    return struct.pack(">I", model_index) + prompt


def _decode_request(data: bytes) -> tuple[int, bytes]:
    if len(data) < 4:
        raise SealFailure("request too short")
    return struct.unpack(">I", data[:4])[0], data[4:]


def _envelope_aad(session_id: int, counter: int) -> bytes:
    return b"req|" + struct.pack(">QQ", session_id, counter)


def _response_aad(session_id: int, counter: int) -> bytes:
    return b"resp|" + struct.pack(">QQ", session_id, counter)


def _session_keys(shared: bytes, transcript: bytes) -> tuple[bytes, bytes]:
    okm = HKDF(algorithm=hashes.SHA256(), length=64, salt=b"flexsim-session",
               info=transcript).derive(shared)
    return okm[:32], okm[32:]


def _transcript(session_id: int, client_pub: bytes, server_pub: bytes) -> bytes:
    return sha256(b"transcript", struct.pack(">Q", session_id), client_pub, server_pub)


def default_backend(model_id: str, prompt: bytes) -> bytes:
    """Stand-in generator: deterministic output bytes for a prompt."""
    return b"out:" + sha256(model_id.encode(), b"|", prompt).hex().encode()


@dataclass
class _ServerSession:
    session_id: int
    transport: str
    c2s: bytes
    s2c: bytes
    sealer: Sealer
    last_counter: int = 0


@dataclass
class InvocationRecord:
    """What the secure world actually computed (for cross-checking proofs)."""

    session_id: int
    counter: int
    model_id: str
    request_hash: bytes
    output_hash: bytes


class SecureFramework:
    """The booted serving framework inside the secure world."""

    def __init__(self, identity: FrameworkIdentity, keys: DeviceKeys, mem: PhysicalMemory | None,
                 models: list[str], *, seed: int = 0,
                 backend: Callable[[str, bytes], bytes] | None = None):
        self.identity = identity
        self._device_key = Ed25519PrivateKey.from_private_bytes(keys.device_attestation_key)
        self.mem = mem
        self.models = list(models)
        self.seed = seed
        self.backend = backend or default_backend
        self.sessions: dict[int, _ServerSession] = {}
        self.records: list[InvocationRecord] = []
        self._ids = itertools.count(1)
        self._vault: list[bytes] = [keys.boot_key, keys.device_attestation_key,
                                    identity.signing_key.private_bytes(**_RAW_PRIV)]
        self._sync_vault()

    def _sync_vault(self):
        """Keep every key in the TZ vault frame(s), never in normal memory."""
        if self.mem is None:
            return
        blob = b"".join(self._vault)
        need = -(-len(blob) // PAGE_SIZE)
        if need > VAULT_FRAMES:
            raise CapacityError("key vault full")
        tz = self.mem.tz_range
        self.mem.secure_write(np.arange(tz.start, tz.start + VAULT_FRAMES), blob)

    def secrets(self) -> dict[str, bytes]:
        """Every key byte string held by the framework, by label."""
        out = {"boot_key": self._vault[0], "device_key": self._vault[1],
               "signing_key": self._vault[2]}
        for sid, s in self.sessions.items():
            out[f"session{sid}:c2s"] = s.c2s
            out[f"session{sid}:s2c"] = s.s2c
        return out

    # -- sessions -------------------------------------------------------------
    def open_session(self, client_public: bytes, *, transport: str = "remote") -> ServerHello:
        sid = next(self._ids)
        eph = _x25519(self.seed, f"server-eph|{sid}")
        server_pub = public_bytes(eph)
        shared = eph.exchange(X25519PublicKey.from_public_bytes(client_public))
        transcript = _transcript(sid, client_public, server_pub)
        c2s, s2c = _session_keys(shared, transcript)
        self.sessions[sid] = _ServerSession(sid, transport, c2s, s2c,
                                            Sealer(s2c, nonce_prefix=b"resp"))
        if self.mem is not None and len(self._vault) * 32 + 64 <= VAULT_FRAMES * PAGE_SIZE:
            self._vault.extend([c2s, s2c])
            self._sync_vault()
        msg = _attestation_message(self.identity.binary_digest, self.identity.public_key,
                                   SECURE_WORLD, transcript)
        evidence = AttestationEvidence(self.identity.binary_digest, self.identity.public_key,
                                       SECURE_WORLD, transcript, self._device_key.sign(msg))
        return ServerHello(sid, server_pub, evidence)

    # -- requests --------------------------------------------------------------
    def invoke(self, request: RequestEnvelope) -> tuple[bytes, ResponseProof]:
        session = self.sessions.get(request.session_id)
        if session is None:
            raise SealFailure(f"unknown session {request.session_id}")
        try:
            plain = Sealer(session.c2s).open(request.sealed,
                                             aad=_envelope_aad(request.session_id, request.counter))
        except OpenFailure as exc:
            raise SealFailure("request failed authentication") from exc
        if request.counter <= session.last_counter:
            raise ReplayDetected(f"counter {request.counter} <= {session.last_counter}")
        session.last_counter = request.counter
        model_index, prompt = _decode_request(plain)
        if not 0 <= model_index < len(self.models):
            raise SealFailure(f"model index {model_index} out of range")
        model_id = self.models[model_index]
        output = self.backend(model_id, prompt)

        req_h = request_hash(request.session_id, request.counter, model_index, prompt)
        out_h = sha256(output)
        unsigned = ResponseProof(req_h, out_h, model_id, b"")
        proof = ResponseProof(req_h, out_h, model_id,
                              self.identity.signing_key.sign(unsigned.signed_message()))
        self.records.append(InvocationRecord(request.session_id, request.counter, model_id,
                                             req_h, out_h))
        sealed = session.sealer.seal(output, aad=_response_aad(request.session_id, request.counter))
        return sealed, proof


def secure_boot_load(binary: bytes, signature: bytes, keys: DeviceKeys, mem: PhysicalMemory | None = None,
                     *, models=("model0",), seed: int = 0, backend=None) -> SecureFramework:
    """Verify and instantiate the framework binary into TZ-secure frames."""
    if keys.vendor_verification_key is None:
        raise BadSignature("no vendor verification key provisioned")
    digest = sha256(binary)
    if not _verify(keys.vendor_verification_key, signature, digest):
        raise BadSignature("framework binary signature does not verify")
    try:
        image = Sealer(keys.boot_key).open(binary, aad=b"framework-binary")
    except OpenFailure as exc:
        raise BadSignature("framework binary does not decrypt") from exc
    if mem is not None:
        tz = mem.tz_range
        room = (len(tz) - VAULT_FRAMES) * PAGE_SIZE
        if len(image) > room:
            raise CapacityError(f"binary of {len(image)} B exceeds the {room} B secure region")
        frames = np.arange(tz.start + VAULT_FRAMES, tz.start + VAULT_FRAMES + -(-len(image) // PAGE_SIZE))
        mem.secure_write(frames, image)
        mem._log(Actor.SECURE_WORLD, "secure_boot", {"digest": digest.hex(), "frames": int(frames.size)})
    identity = FrameworkIdentity(_ed25519(seed, f"framework|{digest.hex()}"), digest,
                                 keys.vendor_verification_key)
    return SecureFramework(identity, keys, mem, list(models), seed=seed, backend=backend)


# --------------------------------------------------------------------------
# client side
# --------------------------------------------------------------------------

class Verdict(str, Enum):
    OK = "Ok"
    TAMPERED = "Tampered"


def verify_response(output: bytes, proof, public_key: bytes, *,
                    expected_request_hash: bytes | None = None) -> Verdict:
    """Check a proof (object or wire bytes) against an output; never raises."""
    try:
        if isinstance(proof, (bytes, bytearray, memoryview)):
            proof = ResponseProof.from_bytes(bytes(proof))
    except (ValueError, UnicodeDecodeError, struct.error):
        return Verdict.TAMPERED
    if (proof.digest_algorithm != DIGEST_ALGORITHM
            or proof.signature_algorithm != SIGNATURE_ALGORITHM):
        return Verdict.TAMPERED
    if sha256(output) != proof.output_hash:
        return Verdict.TAMPERED
    if expected_request_hash is not None and proof.request_hash != expected_request_hash:
        return Verdict.TAMPERED
    if not _verify(public_key, proof.signature, proof.signed_message()):
        return Verdict.TAMPERED
    return Verdict.OK


class ClientSession:
    """A client's half of a session: attests the framework, seals requests, checks responses."""

    def __init__(self, device_public_key: bytes, expected_digest: bytes, *,
                 seed: int = 0, label: str = "client", transport: str = "remote"):
        self.device_public_key = device_public_key
        self.expected_digest = expected_digest
        self.transport = transport
        self._eph = _x25519(seed, f"client-eph|{label}")
        self.public = public_bytes(self._eph)
        self.session_id: int | None = None
        self.framework_key: bytes | None = None
        self._c2s: bytes | None = None
        self._s2c: bytes | None = None
        self._sealer: Sealer | None = None
        self.counter = 0
        # counter -> request hash, for binding responses to requests
        self.pending: dict[int, bytes] = {}

    def finish(self, hello: ServerHello) -> None:
        ev = hello.evidence
        transcript = _transcript(hello.session_id, self.public, hello.server_public)
        if not _verify(self.device_public_key, ev.signature, ev.signed_message()):
            raise AttestationFailure("evidence signature does not verify")
        if ev.binary_digest != self.expected_digest:
            raise AttestationFailure("framework digest differs from the expected build")
        if ev.world != SECURE_WORLD:
            raise AttestationFailure(f"framework reports world {ev.world!r}")
        if ev.transcript_hash != transcript:
            raise AttestationFailure("evidence is not bound to this key exchange")
        shared = self._eph.exchange(X25519PublicKey.from_public_bytes(hello.server_public))
        self._c2s, self._s2c = _session_keys(shared, transcript)
        self._sealer = Sealer(self._c2s, nonce_prefix=b"reqs")
        self.session_id = hello.session_id
        self.framework_key = ev.framework_public_key

    @property
    def session_key(self) -> bytes:
        return self._c2s

    def seal_request(self, prompt: bytes, model_index: int = 0) -> RequestEnvelope:
        if self._sealer is None:
            raise SealFailure("session not established")
        self.counter += 1
        c = self.counter
        sealed = self._sealer.seal(_encode_request(model_index, prompt),
                                   aad=_envelope_aad(self.session_id, c))
        self.pending[c] = request_hash(self.session_id, c, model_index, prompt)
        return RequestEnvelope(self.session_id, c, sealed)

    def open_response(self, counter: int, sealed_output: bytes, proof) -> tuple[Verdict, bytes | None]:
        """Decrypt and verify a response to request ``counter``."""
        try:
            output = Sealer(self._s2c).open(sealed_output, aad=_response_aad(self.session_id, counter))
        except OpenFailure:
            return Verdict.TAMPERED, None
        verdict = verify_response(output, proof, self.framework_key,
                                  expected_request_hash=self.pending.get(counter))
        return verdict, output if verdict is Verdict.OK else None


def open_session(framework: SecureFramework, client: ClientSession) -> ClientSession:
    """Run the handshake; raises ``AttestationFailure`` if the client rejects the evidence."""
    hello = framework.open_session(client.public, transport=client.transport)
    client.finish(hello)
    return client


def key_confinement_scan(mem: PhysicalMemory, secrets: dict[str, bytes]) -> list[tuple[int, str]]:
    """Frames readable by the normal world (or awaiting lazy zeroing) that contain key bytes."""
    exposed = (PageState.UNPROTECTED, PageState.LAZY_RECLAIM)
    findings = []
    pages = sorted(p for p in mem.content if mem.state[p] in exposed)
    for p in pages:
        data = mem.content[p]
        # a key may straddle into the next frame
        nxt = mem.content.get(p + 1) if (p + 1) < mem.total_frames and mem.state[p + 1] in exposed else None
        window = data + (nxt[:63] if nxt else b"")
        for label, secret in secrets.items():
            if secret and secret in window:
                findings.append((p, label))
    return findings
