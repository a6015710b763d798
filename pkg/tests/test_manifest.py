import pytest

from flexsim.errors import ConfigError
from flexsim.manifest import (CATALOG, LayerDescriptor, ModelConfig, ModelManifest, ModelStore,
                              build_sealed_model, synthetic_manifest)
from flexsim.sealing import OpenFailure, Sealer, derive_key, sha256
from flexsim.timing import GIB, PAGE_SIZE


@pytest.mark.parametrize("mid", sorted(CATALOG))
def test_catalog_manifests(mid):
    m = synthetic_manifest(mid)
    assert m.n_layers == CATALOG[mid].config.n_layers
    assert abs(m.total_bytes - CATALOG[mid].params) <= m.n_layers * PAGE_SIZE
    assert all(f >= 1 for f in m.layer_frames)


def test_calibration_model_is_exactly_8gib():
    assert synthetic_manifest("Calib-8GiB").total_bytes == 8 * GIB


def test_unknown_model_needs_sizes():
    with pytest.raises(ConfigError):
        synthetic_manifest("nope")
    m = synthetic_manifest("nope", total_bytes=10 * PAGE_SIZE, n_layers=5)
    assert m.n_layers == 5


def test_manifest_roundtrip(tmp_path):
    m = synthetic_manifest("Qwen3-0.6B")
    m.save(tmp_path / "m.json")
    assert ModelManifest.load(tmp_path / "m.json") == m


def test_manifest_validation():
    d = LayerDescriptor(1, 10, "x", 10, "00")
    with pytest.raises(ConfigError):
        ModelManifest("bad", (d,), "", ModelConfig(1))


def test_sealed_layers_open_and_verify():
    store = ModelStore()
    m = build_sealed_model("t", [100, 5000], store, seed=1)
    for layer in m.layers:
        plain = store.open_layer("t", layer, store.blobs[layer.ciphertext])
        assert sha256(plain).hex() == layer.plaintext_digest
        assert layer.ciphertext_size == layer.byte_size + 28


def test_sealer_rejects_any_bit_flip():
    s = Sealer(derive_key(0, "k"))
    blob = s.seal(b"hello world", b"aad")
    for bit in range(len(blob) * 8):
        b = bytearray(blob)
        b[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(OpenFailure):
            s.open(bytes(b), b"aad")
    with pytest.raises(OpenFailure):
        s.open(blob, b"other")
    assert s.open(blob, b"aad") == b"hello world"


def test_nonces_never_repeat():
    s = Sealer(derive_key(0, "k"))
    nonces = {s.seal(b"x")[:12] for _ in range(100)}
    assert len(nonces) == 100
