"""Dataset model and on-disk formats.

A manifest is UTF-8 newline-delimited JSON, one item per line, with exactly
these fields:

    {"id": ..., "split": "train"|"test",
     "audio_ref": {"file": ..., "row": ...},
     "caption": ...,
     "variants": {name: {"text": ..., "feature_ref": {"file":..., "row":...}?}},
     "tags": [...]}

Variant names come from a declared registry. The original caption doubles as
the variant named "test" (the unmodified evaluation condition); paraphrase
views are "p1"/"p2", the paraphrased test set is "test_p", and the ablation
rewrites are "attr_mod"/"event_mod".

Embedding files are binary: magic ``PCE1``, uint32-LE count, uint32-LE dim,
then count*dim little-endian float32 values row-major. Files are float32 on
disk and float64 in memory.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DanglingRef,
    DuplicateId,
    FormatError,
    InvalidConfig,
    IoError,
    MissingVariant,
    ParseError,
    ShapeMismatch,
)
from .losses import TrainBatch
from .vecmath import as_feature_matrix

EMBEDDING_MAGIC = b"PCE1"
VARIANT_REGISTRY = ("test", "p1", "p2", "test_p", "attr_mod", "event_mod")
SPLITS = ("train", "test")

_ITEM_FIELDS = ("id", "split", "audio_ref", "caption", "variants", "tags")


@dataclass(frozen=True)
class FeatureRef:
    file: str
    row: int


@dataclass(frozen=True)
class Variant:
    text: str
    feature_ref: FeatureRef | None = None


@dataclass(frozen=True)
class ItemRecord:
    id: str
    split: str
    audio_ref: FeatureRef
    caption: str
    variants: dict[str, Variant] = field(default_factory=dict)
    tags: frozenset[str] = frozenset()


# --- embedding files ------------------------------------------------------------


def write_embeddings(matrix, path) -> None:
    arr = as_feature_matrix(matrix, "embeddings")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise ValueError("embeddings overflow float32 range")
    try:
        with open(path, "wb") as f:
            f.write(EMBEDDING_MAGIC)
            f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            f.write(payload.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write embeddings to {path}: {exc}") from exc


def read_embeddings(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read embeddings from {path}: {exc}") from exc
    if len(raw) < 12:
        raise FormatError("file shorter than the 12-byte header", offset=len(raw))
    if raw[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", offset=0)
    count, dim = struct.unpack("<II", raw[4:12])
    if count == 0 or dim == 0:
        raise FormatError(f"empty embedding file (count={count}, dim={dim})", offset=4)
    expected = 12 + 4 * count * dim
    if len(raw) != expected:
        raise FormatError(
            f"payload is {len(raw) - 12} bytes, header implies {expected - 12}", offset=12
        )
    values = np.frombuffer(raw, dtype="<f4", offset=12).reshape(count, dim)
    if not np.all(np.isfinite(values)):
        raise FormatError("payload contains NaN or Inf", offset=12)
    return values.astype(np.float64)


# --- manifests ------------------------------------------------------------------


def _parse_feature_ref(obj, line: int, what: str) -> FeatureRef:
    if not isinstance(obj, dict) or set(obj) != {"file", "row"}:
        raise ParseError(line, f"{what} must be an object with exactly file/row")
    if not isinstance(obj["file"], str) or not obj["file"]:
        raise ParseError(line, f"{what}.file must be a non-empty string")
    if not isinstance(obj["row"], int) or isinstance(obj["row"], bool) or obj["row"] < 0:
        raise ParseError(line, f"{what}.row must be a non-negative integer")
    return FeatureRef(file=obj["file"], row=obj["row"])


def _parse_item(obj: dict, line: int, registry, strict: bool) -> ItemRecord:
    if not isinstance(obj, dict):
        raise ParseError(line, "record is not a JSON object")
    unknown = set(obj) - set(_ITEM_FIELDS)
    if unknown:
        if strict:
            raise ParseError(line, f"unknown fields {sorted(unknown)}")
        warnings.warn(f"manifest line {line}: ignoring unknown fields {sorted(unknown)}")
    missing = [f for f in _ITEM_FIELDS if f not in obj]
    if missing:
        raise ParseError(line, f"missing fields {missing}")
    if not isinstance(obj["id"], str) or not obj["id"]:
        raise ParseError(line, "id must be a non-empty string")
    if obj["split"] not in SPLITS:
        raise ParseError(line, f"split must be one of {SPLITS}, got {obj['split']!r}")
    if not isinstance(obj["caption"], str):
        raise ParseError(line, "caption must be a string")
    audio_ref = _parse_feature_ref(obj["audio_ref"], line, "audio_ref")

    if not isinstance(obj["variants"], dict):
        raise ParseError(line, "variants must be an object")
    variants = {}
    for name, v in obj["variants"].items():
        if name not in registry:
            if strict:
                raise ParseError(line, f"variant {name!r} not in registry {sorted(registry)}")
            warnings.warn(f"manifest line {line}: unregistered variant {name!r}")
        if not isinstance(v, dict) or "text" not in v or not isinstance(v["text"], str):
            raise ParseError(line, f"variant {name!r} needs a text field")
        extra = set(v) - {"text", "feature_ref"}
        if extra:
            raise ParseError(line, f"variant {name!r} has unknown fields {sorted(extra)}")
        ref = None
        if "feature_ref" in v:
            ref = _parse_feature_ref(v["feature_ref"], line, f"variants[{name!r}].feature_ref")
        variants[name] = Variant(text=v["text"], feature_ref=ref)

    if not isinstance(obj["tags"], list) or not all(isinstance(t, str) for t in obj["tags"]):
        raise ParseError(line, "tags must be a list of strings")
    return ItemRecord(
        id=obj["id"],
        split=obj["split"],
        audio_ref=audio_ref,
        caption=obj["caption"],
        variants=variants,
        tags=frozenset(obj["tags"]),
    )


def _item_to_json(item: ItemRecord) -> str:
    doc = {
        "id": item.id,
        "split": item.split,
        "audio_ref": {"file": item.audio_ref.file, "row": item.audio_ref.row},
        "caption": item.caption,
        "variants": {
            name: (
                {"text": v.text}
                if v.feature_ref is None
                else {
                    "text": v.text,
                    "feature_ref": {"file": v.feature_ref.file, "row": v.feature_ref.row},
                }
            )
            for name, v in sorted(item.variants.items())
        },
        "tags": sorted(item.tags),
    }
    return json.dumps(doc, ensure_ascii=False, separators=(", ", ": "))


def save_manifest(items, path) -> None:
    """Canonical serialization: fixed field order, sorted variants and tags."""
    try:
        with open(path, "w", encoding="utf-8") as f:
            for item in items:
                f.write(_item_to_json(item) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest to {path}: {exc}") from exc


class Dataset:
    """Items plus eagerly loaded, shape-checked embedding files."""

    def __init__(self, items: list[ItemRecord], base_dir: Path, matrices: dict[str, np.ndarray]):
        self.items = items
        self.base_dir = Path(base_dir)
        self._matrices = matrices
        self._by_id = {item.id: item for item in items}

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, item_id: str) -> ItemRecord:
        return self._by_id[item_id]

    @property
    def train_items(self) -> list[ItemRecord]:
        return [i for i in self.items if i.split == "train"]

    @property
    def test_items(self) -> list[ItemRecord]:
        return [i for i in self.items if i.split == "test"]

    def matrix(self, file: str) -> np.ndarray:
        return self._matrices[file]

    def audio_features(self, item: ItemRecord) -> np.ndarray:
        return self._matrices[item.audio_ref.file][item.audio_ref.row]

    def variant_features(self, item: ItemRecord, name: str) -> np.ndarray:
        variant = item.variants.get(name)
        if variant is None or variant.feature_ref is None:
            raise MissingVariant(item.id, name)
        return self._matrices[variant.feature_ref.file][variant.feature_ref.row]

    @property
    def audio_dim(self) -> int:
        return self._matrices[self.items[0].audio_ref.file].shape[1]

    @property
    def text_dim(self) -> int:
        for item in self.items:
            for v in item.variants.values():
                if v.feature_ref is not None:
                    return self._matrices[v.feature_ref.file].shape[1]
        raise MissingVariant(self.items[0].id, "test")

    def digest(self) -> str:
        """SHA-256 over the canonical manifest plus every referenced file."""
        import hashlib

        h = hashlib.sha256()
        for item in self.items:
            h.update(_item_to_json(item).encode())
            h.update(b"\n")
        for name in sorted(self._matrices):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._matrices[name], dtype="<f8").tobytes())
        return h.hexdigest()


def load_manifest(path, strict: bool = True, registry=VARIANT_REGISTRY) -> Dataset:
    """Parse and validate a manifest, opening every referenced embedding file.

    Validation is eager: duplicate ids, unresolvable references, out-of-range
    rows and inconsistent dims all fail the load.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc

    items: list[ItemRecord] = []
    seen = set()
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON: {exc}") from exc
        item = _parse_item(obj, line_no, registry, strict)
        if item.id in seen:
            raise DuplicateId(item.id)
        seen.add(item.id)
        items.append(item)
    if not items:
        raise ParseError(0, "manifest has no items")

    base_dir = path.parent
    matrices: dict[str, np.ndarray] = {}

    def resolve(ref: FeatureRef, item_id: str) -> None:
        if ref.file not in matrices:
            file_path = base_dir / ref.file
            if not file_path.is_file():
                raise DanglingRef(item_id, f"feature file {ref.file!r} not found")
            matrices[ref.file] = read_embeddings(file_path)
        if ref.row >= matrices[ref.file].shape[0]:
            raise DanglingRef(
                item_id, f"row {ref.row} >= count {matrices[ref.file].shape[0]} in {ref.file!r}"
            )

    audio_dim = None
    text_dim = None
    for item in items:
        resolve(item.audio_ref, item.id)
        d = matrices[item.audio_ref.file].shape[1]
        if audio_dim is None:
            audio_dim = d
        elif d != audio_dim:
            raise ShapeMismatch(item.audio_ref.file, f"audio dim {d} != {audio_dim}")
        for name, variant in item.variants.items():
            if variant.feature_ref is None:
                continue
            resolve(variant.feature_ref, item.id)
            d = matrices[variant.feature_ref.file].shape[1]
            if text_dim is None:
                text_dim = d
            elif d != text_dim:
                raise ShapeMismatch(
                    variant.feature_ref.file, f"text dim {d} != {text_dim} (variant {name!r})"
                )
    return Dataset(items, base_dir, matrices)


# --- batching -------------------------------------------------------------------


def make_batches(dataset: Dataset, batch_size: int, seed, variant_pair=("p1", "p2")):
    """Deterministically shuffled train batches; the last partial batch kept.

    ``variant_pair=None`` builds anchor-only batches (para views degenerate to
    the original text), for runs that never touch the paraphrase terms.
    """
    if batch_size < 1:
        raise InvalidConfig(f"batch_size must be >= 1, got {batch_size}")
    items = dataset.train_items
    if not items:
        raise InvalidConfig("dataset has no train items")
    needed = ("test",) if variant_pair is None else ("test",) + tuple(variant_pair)
    for item in items:
        for name in needed:
            v = item.variants.get(name)
            if v is None or v.feature_ref is None:
                raise MissingVariant(item.id, name)

    order = np.random.default_rng(seed).permutation(len(items))
    batches = []
    for start in range(0, len(items), batch_size):
        chunk = [items[i] for i in order[start : start + batch_size]]
        audio = np.stack([dataset.audio_features(i) for i in chunk])
        text = np.stack([dataset.variant_features(i, "test") for i in chunk])
        if variant_pair is None:
            para1 = text
            para2 = text
        else:
            para1 = np.stack([dataset.variant_features(i, variant_pair[0]) for i in chunk])
            para2 = np.stack([dataset.variant_features(i, variant_pair[1]) for i in chunk])
        batches.append(
            TrainBatch(
                audio=audio,
                text=text,
                para1=para1,
                para2=para2,
                ids=tuple(i.id for i in chunk),
            )
        )
    return batches
