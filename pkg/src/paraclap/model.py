"""Trainable projection heads over frozen precomputed features.

The retrieval model is a pair of small heads (audio side, text side) mapping
fixed encoder features into a shared embedding space, plus one learnable
log-temperature. Heads are one linear layer, or tanh-hidden + linear when a
hidden width is configured; the final activation is always identity.

Checkpoints are a directory holding ``model.json`` (layer spec, log_tau,
metadata, and the length + SHA-256 of the weight blob) and ``model.bin``
(magic ``PCK1`` followed by every parameter as little-endian float64, per
layer weights row-major then bias, audio head first).
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimMismatch, FormatError, InvalidDim, IoError, VersionMismatch
from .vecmath import as_feature_matrix

CHECKPOINT_MAGIC = b"PCK1"
CHECKPOINT_FORMAT = "pck_v1"
LOG_TAU_MIN = math.log(0.01)
LOG_TAU_MAX = math.log(100.0)
ACTIVATIONS = ("identity", "tanh")


@dataclass
class Layer:
    weights: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise InvalidDim("layer weights must be 2-D and bias 1-D")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise InvalidDim("bias length must match weight rows")
        if self.activation not in ACTIVATIONS:
            raise InvalidDim(f"activation must be one of {ACTIVATIONS}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise InvalidDim("layer parameters must be finite")


@dataclass
class ProjectionHead:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise InvalidDim("head needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weights.shape[1] != prev.weights.shape[0]:
                raise InvalidDim(
                    f"layer dims do not chain: {prev.weights.shape} -> {nxt.weights.shape}"
                )
        if self.layers[-1].activation != "identity":
            raise InvalidDim("final layer activation must be identity")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]


@dataclass
class ModelCheckpoint:
    audio_head: ProjectionHead
    text_head: ProjectionHead
    log_tau: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (LOG_TAU_MIN <= self.log_tau <= LOG_TAU_MAX):
            raise InvalidDim(
                f"log_tau {self.log_tau!r} outside [{LOG_TAU_MIN:.6f}, {LOG_TAU_MAX:.6f}]"
            )

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    def digest(self) -> str:
        """SHA-256 of the parameter blob; stable id for reports."""
        return hashlib.sha256(_parameter_blob(self)).hexdigest()


def _glorot_layer(rng: np.random.Generator, d_out: int, d_in: int, activation: str) -> Layer:
    s = math.sqrt(6.0 / (d_in + d_out))
    return Layer(
        weights=rng.uniform(-s, s, size=(d_out, d_in)),
        bias=np.zeros(d_out),
        activation=activation,
    )


def _make_head(rng: np.random.Generator, d_in: int, d_embed: int, hidden: int | None) -> ProjectionHead:
    if hidden is None:
        return ProjectionHead([_glorot_layer(rng, d_embed, d_in, "identity")])
    return ProjectionHead(
        [
            _glorot_layer(rng, hidden, d_in, "tanh"),
            _glorot_layer(rng, d_embed, hidden, "identity"),
        ]
    )


def config_digest(d_audio_in: int, d_text_in: int, d_embed: int, hidden: int | None, seed: int) -> str:
    key = f"a{d_audio_in}:t{d_text_in}:e{d_embed}:h{hidden}:s{seed}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def init_model(
    d_audio_in: int,
    d_text_in: int,
    d_embed: int = 32,
    hidden: int | None = None,
    seed: int = 0,
) -> ModelCheckpoint:
    """Glorot-uniform heads, zero biases, log_tau = ln(0.07). Audio head is
    drawn before the text head, so parameter streams are seed-reproducible."""
    for name, dim in (("d_audio_in", d_audio_in), ("d_text_in", d_text_in), ("d_embed", d_embed)):
        if not isinstance(dim, int) or dim < 1:
            raise InvalidDim(f"{name} must be a positive integer, got {dim!r}")
    if hidden is not None and (not isinstance(hidden, int) or hidden < 1):
        raise InvalidDim(f"hidden must be a positive integer or None, got {hidden!r}")
    rng = np.random.default_rng(seed)
    return ModelCheckpoint(
        audio_head=_make_head(rng, d_audio_in, d_embed, hidden),
        text_head=_make_head(rng, d_text_in, d_embed, hidden),
        log_tau=math.log(0.07),
        metadata={
            "seed": seed,
            "created_step": 0,
            "config_digest": config_digest(d_audio_in, d_text_in, d_embed, hidden, seed),
        },
    )


def forward(head: ProjectionHead, features) -> np.ndarray:
    x = as_feature_matrix(features, "features")
    if x.shape[1] != head.input_dim:
        raise DimMismatch(f"features dim {x.shape[1]} != head input dim {head.input_dim}")
    for layer in head.layers:
        x = x @ layer.weights.T + layer.bias
        if layer.activation == "tanh":
            x = np.tanh(x)
    return x


def backward(head: ProjectionHead, features, grad_out):
    """Gradients of a scalar loss w.r.t. head parameters and input features.

    ``grad_out`` is d loss / d forward(head, features). Returns
    (per-layer [(grad_weights, grad_bias)], grad_features).
    """
    x = as_feature_matrix(features, "features")
    if x.shape[1] != head.input_dim:
        raise DimMismatch(f"features dim {x.shape[1]} != head input dim {head.input_dim}")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (x.shape[0], head.output_dim):
        raise DimMismatch(
            f"grad_out shape {g.shape} != expected {(x.shape[0], head.output_dim)}"
        )

    inputs = []
    outputs = []
    h = x
    for layer in head.layers:
        inputs.append(h)
        h = h @ layer.weights.T + layer.bias
        if layer.activation == "tanh":
            h = np.tanh(h)
        outputs.append(h)

    grad_params = [None] * len(head.layers)
    for i in range(len(head.layers) - 1, -1, -1):
        layer = head.layers[i]
        if layer.activation == "tanh":
            g = g * (1.0 - outputs[i] ** 2)
        grad_params[i] = (g.T @ inputs[i], g.sum(axis=0))
        g = g @ layer.weights
    return grad_params, g


# --- checkpoint serialization --------------------------------------------------


def _parameter_blob(ckpt: ModelCheckpoint) -> bytes:
    parts = [CHECKPOINT_MAGIC]
    for head in (ckpt.audio_head, ckpt.text_head):
        for layer in head.layers:
            parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def _head_spec(head: ProjectionHead) -> list[dict]:
    return [
        {
            "out": layer.weights.shape[0],
            "in": layer.weights.shape[1],
            "activation": layer.activation,
        }
        for layer in head.layers
    ]


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Write model.json + model.bin into the directory ``path``."""
    target = Path(path)
    try:
        target.mkdir(parents=True, exist_ok=True)
        blob = _parameter_blob(ckpt)
        doc = {
            "format": CHECKPOINT_FORMAT,
            "audio_head": _head_spec(ckpt.audio_head),
            "text_head": _head_spec(ckpt.text_head),
            "log_tau": ckpt.log_tau,
            "metadata": ckpt.metadata,
            "blob_bytes": len(blob),
            "blob_sha256": hashlib.sha256(blob).hexdigest(),
        }
        (target / "model.bin").write_bytes(blob)
        (target / "model.json").write_text(
            json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise IoError(f"cannot write checkpoint to {target}: {exc}") from exc


def _read_head(spec: list, blob: bytes, offset: int, name: str):
    layers = []
    for entry in spec:
        try:
            d_out, d_in, act = int(entry["out"]), int(entry["in"]), entry["activation"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad layer spec in {name}: {entry!r}") from exc
        need = 8 * (d_out * d_in + d_out)
        if offset + need > len(blob):
            raise FormatError(f"weight blob truncated reading {name}", offset=offset)
        w = np.frombuffer(blob, dtype="<f8", count=d_out * d_in, offset=offset).reshape(d_out, d_in)
        offset += 8 * d_out * d_in
        b = np.frombuffer(blob, dtype="<f8", count=d_out, offset=offset)
        offset += 8 * d_out
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise FormatError(f"non-finite parameters in {name}", offset=offset)
        layers.append(Layer(weights=w.copy(), bias=b.copy(), activation=act))
    return ProjectionHead(layers), offset


def load_checkpoint(path, expected_config_digest: str | None = None) -> ModelCheckpoint:
    """Read a checkpoint directory; verifies magic, length and SHA-256.

    A config-digest mismatch (resuming against a different run config) is
    surfaced as a warning, not an error.
    """
    target = Path(path)
    try:
        doc_text = (target / "model.json").read_text(encoding="utf-8")
        blob = (target / "model.bin").read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint from {target}: {exc}") from exc

    try:
        doc = json.loads(doc_text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model.json is not valid JSON: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise VersionMismatch(
            f"checkpoint format {doc.get('format')!r}, expected {CHECKPOINT_FORMAT!r}"
        )
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    if len(blob) != doc.get("blob_bytes"):
        raise FormatError(
            f"blob is {len(blob)} bytes, manifest says {doc.get('blob_bytes')}", offset=len(blob)
        )
    if hashlib.sha256(blob).hexdigest() != doc.get("blob_sha256"):
        raise FormatError("blob SHA-256 does not match model.json")

    offset = len(CHECKPOINT_MAGIC)
    audio_head, offset = _read_head(doc.get("audio_head", []), blob, offset, "audio_head")
    text_head, offset = _read_head(doc.get("text_head", []), blob, offset, "text_head")
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes in weight blob", offset=offset)

    metadata = doc.get("metadata", {})
    if expected_config_digest is not None and metadata.get("config_digest") != expected_config_digest:
        warnings.warn(
            f"checkpoint config digest {metadata.get('config_digest')!r} does not match "
            f"expected {expected_config_digest!r}; loading anyway",
            stacklevel=2,
        )
    try:
        log_tau = float(doc["log_tau"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("missing or invalid log_tau") from exc
    try:
        return ModelCheckpoint(
            audio_head=audio_head, text_head=text_head, log_tau=log_tau, metadata=metadata
        )
    except InvalidDim as exc:
        raise FormatError(str(exc)) from exc
