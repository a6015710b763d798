import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from flexsim.errors import AttestationFailure, BadSignature, CapacityError, ReplayDetected, SealFailure
from flexsim.physmem import PageState
from flexsim.session import (ClientSession, ResponseProof, Vendor, Verdict, key_confinement_scan,
                             open_session, secure_boot_load, sha256, verify_response)
from flexsim.timing import PAGE_SIZE

from helpers import small_system

IMAGE = b"serving-framework\0" * 100


def _boot(seed=0, mem=None, models=("m0", "m1")):
    vendor = Vendor(seed)
    binary, sig = vendor.package(IMAGE)
    fw = secure_boot_load(binary, sig, vendor.provision(), mem, models=models, seed=seed)
    return vendor, binary, fw


def _client(vendor, binary, label="c"):
    return ClientSession(vendor.device_public_key, sha256(binary), label=label)


def test_round_trip():
    vendor, binary, fw = _boot()
    c = open_session(fw, _client(vendor, binary))
    env = c.seal_request(b"hello", 1)
    sealed, proof = fw.invoke(env)
    verdict, out = c.open_response(env.counter, sealed, proof)
    assert verdict is Verdict.OK
    assert out == fw.backend("m1", b"hello")
    assert fw.records[-1].model_id == "m1"
    assert verify_response(out, proof.to_bytes(), c.framework_key) is Verdict.OK


@settings(max_examples=40)
@given(st.data())
def test_any_proof_bit_flip_is_tampered(data):
    vendor, binary, fw = _boot()
    c = open_session(fw, _client(vendor, binary))
    env = c.seal_request(b"prompt")
    sealed, proof = fw.invoke(env)
    wire = bytearray(proof.to_bytes())
    bit = data.draw(st.integers(0, len(wire) * 8 - 1))
    wire[bit // 8] ^= 1 << (bit % 8)
    assert c.open_response(env.counter, sealed, bytes(wire))[0] is Verdict.TAMPERED


@settings(max_examples=40)
@given(st.data())
def test_any_sealed_output_bit_flip_is_tampered(data):
    vendor, binary, fw = _boot()
    c = open_session(fw, _client(vendor, binary))
    env = c.seal_request(b"prompt")
    sealed, proof = fw.invoke(env)
    buf = bytearray(sealed)
    bit = data.draw(st.integers(0, len(buf) * 8 - 1))
    buf[bit // 8] ^= 1 << (bit % 8)
    assert c.open_response(env.counter, bytes(buf), proof) == (Verdict.TAMPERED, None)


def test_proof_for_other_request_is_rejected():
    vendor, binary, fw = _boot()
    c = open_session(fw, _client(vendor, binary))
    e1, e2 = c.seal_request(b"a"), c.seal_request(b"a")
    s1, p1 = fw.invoke(e1)
    s2, p2 = fw.invoke(e2)
    assert c.open_response(e2.counter, s2, p2)[0] is Verdict.OK
    # same output bytes, but the proof names request 1
    out2 = c.open_response(e2.counter, s2, p2)[1]
    assert verify_response(out2, p1, c.framework_key,
                           expected_request_hash=c.pending[e2.counter]) is Verdict.TAMPERED


def test_replay_rejected():
    vendor, binary, fw = _boot()
    c = open_session(fw, _client(vendor, binary))
    env = c.seal_request(b"x")
    fw.invoke(env)
    with pytest.raises(ReplayDetected):
        fw.invoke(env)
    later = c.seal_request(b"y")
    fw.invoke(later)
    with pytest.raises(ReplayDetected):
        fw.invoke(env)


def test_forged_envelope_and_unknown_session():
    vendor, binary, fw = _boot()
    c = open_session(fw, _client(vendor, binary))
    env = c.seal_request(b"x")
    bad = dataclasses.replace(env, sealed=env.sealed[:-1] + bytes([env.sealed[-1] ^ 1]))
    with pytest.raises(SealFailure):
        fw.invoke(bad)
    with pytest.raises(SealFailure):
        fw.invoke(dataclasses.replace(env, session_id=99))
    # counter is authenticated, so bumping it does not dodge replay checks
    fw.invoke(env)
    with pytest.raises(SealFailure):
        fw.invoke(dataclasses.replace(env, counter=env.counter + 1))


def test_attestation_rejects_wrong_build():
    vendor, binary, fw = _boot()
    c = ClientSession(vendor.device_public_key, sha256(b"other build"))
    with pytest.raises(AttestationFailure, match="digest"):
        open_session(fw, c)


def test_attestation_rejects_foreign_device_key():
    vendor, binary, fw = _boot()
    c = ClientSession(Vendor(7).device_public_key, sha256(binary))
    with pytest.raises(AttestationFailure, match="signature"):
        open_session(fw, c)


def test_attestation_rejects_wrong_world_and_transcript():
    vendor, binary, fw = _boot()
    c = _client(vendor, binary)
    hello = fw.open_session(c.public)
    with pytest.raises(AttestationFailure):
        c.finish(dataclasses.replace(hello, evidence=dataclasses.replace(hello.evidence, world="normal")))
    # evidence from another handshake is not bound to this key exchange
    other = _client(vendor, binary, label="other")
    hello2 = fw.open_session(other.public)
    with pytest.raises(AttestationFailure):
        c.finish(dataclasses.replace(hello, evidence=hello2.evidence))


def test_boot_rejects_bad_signature_and_wrong_vendor():
    vendor = Vendor(0)
    binary, sig = vendor.package(IMAGE)
    with pytest.raises(BadSignature):
        secure_boot_load(binary, bytes(64), vendor.provision())
    with pytest.raises(BadSignature):
        secure_boot_load(binary, sig, Vendor(1).provision())
    flipped = binary[:-1] + bytes([binary[-1] ^ 1])
    with pytest.raises(BadSignature):
        secure_boot_load(flipped, sig, vendor.provision())


def test_boot_rejects_oversized_binary():
    s = small_system(128)
    vendor = Vendor(0)
    big = b"\0" * (len(s.mem.tz_range) * PAGE_SIZE + 1)
    binary, sig = vendor.package(big)
    with pytest.raises(CapacityError):
        secure_boot_load(binary, sig, vendor.provision(), s.mem)


def test_keys_stay_in_tz_frames():
    s = small_system(128)
    vendor, binary, fw = _boot(mem=s.mem)
    for i in range(3):
        c = open_session(fw, _client(vendor, binary, label=f"c{i}"))
        fw.invoke(c.seal_request(b"q"))
    secrets = fw.secrets()
    assert len(secrets) >= 3 + 6
    assert key_confinement_scan(s.mem, secrets) == []


def test_scan_finds_a_leaked_key():
    s = small_system(128)
    vendor, binary, fw = _boot(mem=s.mem)
    page = next(p for p in range(s.mem.total_frames) if s.mem.state[p] == PageState.UNPROTECTED
                and s.mem.mmio_region(p) is None)
    s.mem.content[page] = b"\0" * 10 + fw.secrets()["signing_key"] + b"\0" * 10
    assert (page, "signing_key") in key_confinement_scan(s.mem, fw.secrets())


def test_session_keys_distinct_per_session():
    vendor, binary, fw = _boot()
    keys = {open_session(fw, _client(vendor, binary, label=f"c{i}")).session_key for i in range(5)}
    assert len(keys) == 5


def test_proof_wire_roundtrip_and_strict_parse():
    vendor, binary, fw = _boot()
    c = open_session(fw, _client(vendor, binary))
    _, proof = fw.invoke(c.seal_request(b"z"))
    wire = proof.to_bytes()
    assert ResponseProof.from_bytes(wire) == proof
    for bad in (wire + b"\0", wire[:-1], b"XXXX" + wire[4:]):
        with pytest.raises(ValueError):
            ResponseProof.from_bytes(bad)
