"""Feature vectors, the text classifier, and the ".vcre" store format.

Every vector that enters or leaves this package is L2-normalized float32,
so cosine similarity is a plain dot product everywhere downstream.

Binary layout (little-endian)::

    bytes 0..3    magic "VCRE"
    bytes 4..7    u32 version (currently 1)
    bytes 8..11   u32 dim
    bytes 12..19  u64 row_count
    bytes 20..    row_count * dim IEEE-754 f32, row-major

A sidecar manifest shares the basename with a ".json" suffix.  Embedding
stores carry ``{"images": [...], "rows": [...]}``; classifier files carry
``{"classes": [...], "tau": ...}``; cache stores add ``"labels"`` and
``"adapter"``.  Manifests are written in canonical form (sorted keys, no
whitespace) so write -> load -> write is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidArgumentError, MissingEmbeddingError, NotFoundError, ValidationError
from .geometry import GLOBAL, CropRect

MAGIC = b"VCRE"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

UNIT_TOL = 1e-4


def normalize(v: np.ndarray) -> np.ndarray:
    """L2-normalize to float32; rejects non-finite and near-zero vectors."""
    v64 = np.asarray(v, dtype=np.float64)
    if v64.ndim != 1 or v64.size < 2:
        raise InvalidArgumentError("feature vectors must be 1-D with dim >= 2")
    if not np.all(np.isfinite(v64)):
        raise InvalidArgumentError("feature vector contains NaN or Inf")
    norm = float(np.linalg.norm(v64))
    if norm < 1e-12:
        raise InvalidArgumentError("cannot normalize a near-zero vector")
    return (v64 / norm).astype(np.float32)


def is_unit(v: np.ndarray, tol: float = UNIT_TOL) -> bool:
    return bool(abs(float(np.linalg.norm(np.asarray(v, dtype=np.float64))) - 1.0) <= tol)


def crop_key(crop) -> str:
    """Canonical manifest key: 'global', 'refined', or 'x,y,w,h[,hflip]'."""
    if isinstance(crop, str):
        return crop
    if isinstance(crop, CropRect):
        return crop.key()
    raise InvalidArgumentError(f"not a crop: {crop!r}")


def crop_to_json(crop):
    if crop is GLOBAL or crop == GLOBAL:
        return GLOBAL
    return crop.as_json()


def crop_from_json(value):
    if value == GLOBAL:
        return GLOBAL
    return CropRect.from_json(value)


@dataclass
class TextClassifier:
    """Class text embeddings (unit rows) with the softmax temperature."""

    class_names: list[str]
    weights: np.ndarray  # (C, d) float32, unit rows
    tau: float

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])


def build_text_classifier(class_names, weights, tau: float) -> TextClassifier:
    """Validate and re-normalize rows; cosine outputs are scale-invariant."""
    names = list(class_names)
    if len(names) < 2:
        raise InvalidArgumentError("a classifier needs at least 2 classes")
    if len(set(names)) != len(names):
        raise ValidationError("duplicate class names in classifier")
    if tau <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {tau}")
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != len(names):
        raise InvalidArgumentError("weights must be a (num_classes, dim) matrix")
    rows = np.stack([normalize(row) for row in w])
    return TextClassifier(class_names=names, weights=rows, tau=float(tau))


@dataclass
class EmbeddingStore:
    """A row matrix plus the manifest mapping (image, crop) -> row index."""

    dim: int
    rows: np.ndarray  # (count, dim) float32
    images: list[dict]  # [{"id", "width", "height"}] in manifest order
    row_meta: list[dict]  # [{"image", "crop", "row", ...}] in manifest order
    extra: dict = field(default_factory=dict)  # labels / adapter / meta passthrough

    def __post_init__(self):
        self._index = {}
        self._dims = {}
        for entry in self.images:
            self._dims[entry["id"]] = (int(entry["width"]), int(entry["height"]))
        for meta in self.row_meta:
            key = (meta["image"], _meta_crop_key(meta["crop"]))
            if key in self._index:
                raise ValidationError(f"duplicate (image, crop) key {key}")
            idx = int(meta["row"])
            if not (0 <= idx < self.rows.shape[0]):
                raise ValidationError(f"row index {idx} out of range for {key}")
            self._index[key] = idx

    @property
    def count(self) -> int:
        return int(self.rows.shape[0])

    def image_dims(self, image_id: str) -> tuple[int, int]:
        try:
            return self._dims[image_id]
        except KeyError:
            raise NotFoundError(f"unknown image id {image_id!r}") from None

    def has_row(self, image_id: str, crop) -> bool:
        return (image_id, crop_key(crop)) in self._index

    def row_index(self, image_id: str, crop) -> int:
        key = (image_id, crop_key(crop))
        if key not in self._index:
            if image_id not in self._dims:
                raise NotFoundError(f"unknown image id {image_id!r}")
            raise MissingEmbeddingError(image_id, key[1])
        return self._index[key]

    def lookup(self, image_id: str, crop) -> np.ndarray:
        return self.rows[self.row_index(image_id, crop)]


def _meta_crop_key(value) -> str:
    if isinstance(value, str):
        return value  # "global" or "refined"
    return CropRect.from_json(value).key()


def make_store(dim: int, rows: np.ndarray, images, row_meta, extra=None) -> EmbeddingStore:
    rows = np.ascontiguousarray(np.asarray(rows, dtype=np.float32))
    if rows.ndim != 2 or rows.shape[1] != dim:
        raise InvalidArgumentError(f"rows must be (count, {dim})")
    bad = _non_unit_rows(rows)
    if bad:
        raise ValidationError(f"non-unit rows at indices {bad}")
    return EmbeddingStore(dim=dim, rows=rows, images=list(images), row_meta=list(row_meta), extra=dict(extra or {}))


def _non_unit_rows(rows: np.ndarray) -> list[int]:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    return [int(i) for i in np.nonzero(np.abs(norms - 1.0) > UNIT_TOL)[0]]


def canonical_json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


def write_bytes_atomic(path: str, data: bytes) -> None:
    """Write to a temp file in the target directory, then atomically rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(path: str) -> str:
    stem, _ = os.path.splitext(path)
    return stem + ".json"


def _pack_rows(dim: int, rows: np.ndarray) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, dim, rows.shape[0])
    body = np.ascontiguousarray(rows, dtype="<f4").tobytes()
    return header + body


def _unpack_rows(path: str) -> tuple[int, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file {path} truncated before header end", offset=len(raw))
    magic, version, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=4)
    if dim < 2:
        raise FormatError(f"dim must be >= 2, got {dim}", offset=8)
    if count < 1:
        raise FormatError(f"row count must be >= 1, got {count}", offset=12)
    expected = _HEADER.size + 4 * dim * count
    if len(raw) != expected:
        raise FormatError(
            f"file {path} holds {len(raw)} bytes, header implies {expected}",
            offset=min(len(raw), expected),
        )
    rows = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim).copy()
    return dim, rows


def write_embedding_file(store: EmbeddingStore, path: str) -> None:
    write_bytes_atomic(path, _pack_rows(store.dim, store.rows))
    manifest = {"images": store.images, "rows": store.row_meta, **store.extra}
    write_bytes_atomic(manifest_path(path), canonical_json_bytes(manifest))


def load_embedding_file(path: str) -> EmbeddingStore:
    dim, rows = _unpack_rows(path)
    bad = _non_unit_rows(rows)
    if bad:
        raise ValidationError(f"non-unit rows at indices {bad}")
    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise FormatError(f"missing sidecar manifest {mpath}")
    with open(mpath, "rb") as f:
        manifest = json.load(f)
    if "images" not in manifest or "rows" not in manifest:
        raise FormatError(f"manifest {mpath} lacks 'images'/'rows'")
    extra = {k: v for k, v in manifest.items() if k not in ("images", "rows")}
    return EmbeddingStore(dim=dim, rows=rows, images=manifest["images"], row_meta=manifest["rows"], extra=extra)


def write_text_classifier(clf: TextClassifier, path: str) -> None:
    write_bytes_atomic(path, _pack_rows(clf.dim, clf.weights))
    manifest = {"classes": clf.class_names, "tau": clf.tau}
    write_bytes_atomic(manifest_path(path), canonical_json_bytes(manifest))


def load_text_classifier(path: str) -> TextClassifier:
    dim, rows = _unpack_rows(path)
    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise FormatError(f"missing sidecar manifest {mpath}")
    with open(mpath, "rb") as f:
        manifest = json.load(f)
    if "classes" not in manifest or "tau" not in manifest:
        raise FormatError(f"manifest {mpath} lacks 'classes'/'tau'")
    if len(manifest["classes"]) != rows.shape[0]:
        raise ValidationError(
            f"classifier has {rows.shape[0]} rows but {len(manifest['classes'])} class names"
        )
    return build_text_classifier(manifest["classes"], rows, float(manifest["tau"]))


class FileBackend:
    """Encoder backed by a store: lookups only, never silent substitution."""

    def __init__(self, store: EmbeddingStore):
        self.store = store

    @property
    def dim(self) -> int:
        return self.store.dim

    def image_dims(self, image_id: str) -> tuple[int, int]:
        return self.store.image_dims(image_id)

    def encode_views(self, image_id: str, crops) -> np.ndarray:
        idx = [self.store.row_index(image_id, c) for c in crops]
        return self.store.rows[idx]

    def encode_view(self, image_id: str, crop) -> np.ndarray:
        return self.encode_views(image_id, [crop])[0]
