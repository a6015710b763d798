"""Layered model manifests and the encrypted model store.

A manifest lists a model's layers in execution order.  Large catalog models
are *synthetic*: their layers carry sizes and digests but no payload, and are
simulated for timing and page state only.  Small models built with
:func:`build_sealed_model` carry real AES-GCM ciphertext in a
:class:`ModelStore`, so secure loading and decryption are exercised on bytes.

Manifest file format (JSON, one object)::

    {"format": "flexsim-manifest", "version": 1,
     "model_id": str, "params_label": str, "total_bytes": int,
     "config": {"n_layers": int, "n_kv_heads": int, "head_dim": int,
                "hidden_size": int, "kv_dtype_bytes": int},
     "layers": [{"layer_index": int, "byte_size": int,
                 "ciphertext": str, "ciphertext_size": int,
                 "plaintext_digest": hex str}, ...]}
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .sealing import Sealer, derive_key, sha256
from .timing import GIB, PAGE_SIZE

MANIFEST_FORMAT = "flexsim-manifest"
MANIFEST_VERSION = 1
AEAD_OVERHEAD = 12 + 16


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_kv_heads: int = 8
    head_dim: int = 128
    hidden_size: int = 4096
    # KV stays 16-bit even for INT8 weights
    kv_dtype_bytes: int = 2

    @property
    def kv_bytes_per_token(self) -> int:
        return self.n_layers * self.n_kv_heads * self.head_dim * 2 * self.kv_dtype_bytes

    def activation_bytes(self, tokens: int) -> int:
        # a handful of live hidden-state tensors in fp16
        return 4 * 2 * self.hidden_size * int(tokens)


@dataclass(frozen=True)
class LayerDescriptor:
    layer_index: int
    byte_size: int
    ciphertext: str
    ciphertext_size: int
    plaintext_digest: str

    @property
    def frames(self) -> int:
        return -(-max(self.byte_size, self.ciphertext_size) // PAGE_SIZE)


@dataclass(frozen=True)
class ModelManifest:
    model_id: str
    layers: tuple[LayerDescriptor, ...]
    params_label: str
    config: ModelConfig

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.layer_index != i:
                raise ConfigError(f"layer {i} has index {layer.layer_index}", field="layers")
        if len(self.layers) != self.config.n_layers:
            raise ConfigError("config.n_layers does not match the layer list", field="layers")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def total_bytes(self) -> int:
        return sum(layer.byte_size for layer in self.layers)

    @property
    def layer_bytes(self) -> np.ndarray:
        return np.array([layer.byte_size for layer in self.layers], dtype=np.int64)

    @property
    def layer_frames(self) -> np.ndarray:
        return np.array([layer.frames for layer in self.layers], dtype=np.int64)

    # -- file format ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "model_id": self.model_id,
            "params_label": self.params_label,
            "total_bytes": self.total_bytes,
            "config": asdict(self.config),
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelManifest":
        if data.get("format") != MANIFEST_FORMAT or data.get("version") != MANIFEST_VERSION:
            raise ConfigError("not a flexsim manifest (format/version)", field="format")
        try:
            config = ModelConfig(**data["config"])
            layers = tuple(LayerDescriptor(**layer) for layer in data["layers"])
            m = cls(data["model_id"], layers, data["params_label"], config)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed manifest: {exc}") from exc
        if m.total_bytes != data.get("total_bytes"):
            raise ConfigError("total_bytes does not equal the sum of layer sizes", field="total_bytes")
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# synthetic catalog (INT8 weights)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CatalogEntry:
    params: float          # parameter count == INT8 bytes
    config: ModelConfig
    label: str


CATALOG: dict[str, CatalogEntry] = {
    "Llama3.2-3B": CatalogEntry(3.21e9, ModelConfig(28, 8, 128, 3072), "3B-int8"),
    "Llama3.1-8B": CatalogEntry(8.03e9, ModelConfig(32, 8, 128, 4096), "8B-int8"),
    "Qwen3-0.6B": CatalogEntry(0.60e9, ModelConfig(28, 8, 128, 1024), "0.6B-int8"),
    "Qwen3-1.7B": CatalogEntry(1.72e9, ModelConfig(28, 8, 128, 2048), "1.7B-int8"),
    "Qwen3-8B": CatalogEntry(8.19e9, ModelConfig(36, 8, 128, 4096), "8B-int8"),
    # exactly 8 GiB: the calibration point for the latency model
    "Calib-8GiB": CatalogEntry(8 * GIB, ModelConfig(32, 8, 128, 4096), "8GiB-int8"),
}


def synthetic_manifest(model_id: str, *, total_bytes: int | None = None,
                       n_layers: int | None = None, config: ModelConfig | None = None) -> ModelManifest:
    """Uniform-layer manifest; catalog entries fill in what is not given."""
    entry = CATALOG.get(model_id)
    if entry is None and (total_bytes is None or (n_layers is None and config is None)):
        raise ConfigError(f"unknown model {model_id!r}; give total_bytes and n_layers", field="model")
    if config is None:
        config = entry.config if entry is not None else ModelConfig(int(n_layers))
    if n_layers is not None and n_layers != config.n_layers:
        config = ModelConfig(int(n_layers), config.n_kv_heads, config.head_dim,
                             config.hidden_size, config.kv_dtype_bytes)
    if total_bytes is None:
        total_bytes = int(entry.params)
    n = config.n_layers
    per_layer = max(PAGE_SIZE, int(total_bytes) // n // PAGE_SIZE * PAGE_SIZE)
    layers = tuple(
        LayerDescriptor(i, per_layer, f"synthetic://{model_id}/{i}", per_layer,
                        sha256(f"synthetic|{model_id}|{i}".encode()).hex())
        for i in range(n))
    label = entry.label if entry is not None else f"{total_bytes / GIB:.2f}GiB"
    return ModelManifest(model_id, layers, label, config)


# --------------------------------------------------------------------------
# sealed models with real payloads
# --------------------------------------------------------------------------

@dataclass
class ModelStore:
    """Flash: ciphertext blobs by reference, plus the secure-world model keys."""

    blobs: dict[str, bytes] = field(default_factory=dict)
    keys: dict[str, bytes] = field(default_factory=dict)

    def has_payload(self, layer: LayerDescriptor) -> bool:
        return layer.ciphertext in self.blobs

    def open_layer(self, model_id: str, layer: LayerDescriptor, blob: bytes) -> bytes:
        return Sealer(self.keys[model_id]).open(blob, aad=_layer_aad(model_id, layer.layer_index))


def _layer_aad(model_id: str, index: int) -> bytes:
    return f"{model_id}|layer|{index}".encode()


def build_sealed_model(model_id: str, layer_sizes, store: ModelStore, *, seed: int = 0,
                       config: ModelConfig | None = None) -> ModelManifest:
    """Fabricate a small model with pseudorandom weights sealed into ``store``."""
    key = derive_key(seed, f"model-key|{model_id}")
    store.keys[model_id] = key
    sealer = Sealer(key, nonce_prefix=b"mdl\0")
    rng = np.random.default_rng([seed, len(model_id)])
    layers = []
    for i, size in enumerate(layer_sizes):
        plain = rng.integers(0, 256, int(size), dtype=np.uint8).tobytes()
        blob = sealer.seal(plain, aad=_layer_aad(model_id, i))
        ref = f"flash://{model_id}/{i}"
        store.blobs[ref] = blob
        layers.append(LayerDescriptor(i, int(size), ref, len(blob), sha256(plain).hex()))
    config = config or ModelConfig(len(layers), 1, 8, 64, 1)
    return ModelManifest(model_id, tuple(layers), f"{sum(layer_sizes)}B-sealed", config)
