"""Data model, on-disk formats, corpus splits, and the synthetic bilingual corpus.

Captions travel as JSONL (one object per line, keys caption_id/image_id/lang/
source/text). Embeddings travel either in the binary "EMB1" format (magic
``EMB1``, little-endian u32 dim, u64 count, then per entry u16 id length, the
UTF-8 id, and dim float32 values) or as a JSON object
``{"dim": d, "entries": {id: [floats]}}`` for small fixtures.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._validation import (
    UNIT_NORM_TOL,
    check_language_tag,
    check_nonneg_real,
    check_positive_int,
)
from .errors import CorpusFormatError

EMB1_MAGIC = b"EMB1"

_CAPTION_KEYS = ("caption_id", "image_id", "lang", "source", "text")


class CaptionSource(str, Enum):
    """Provenance of a caption."""

    NATIVE = "native"
    MACHINE_TRANSLATED = "machine_translated"
    REWRITE_PARAPHRASE = "rewrite_paraphrase"
    REWRITE_DIVERSE = "rewrite_diverse"
    REWRITE_TARGETED = "rewrite_targeted"


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    uri: str | None = None

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be non-empty")


@dataclass(frozen=True)
class CaptionRecord:
    caption_id: str
    image_id: str
    lang: str
    source: CaptionSource
    text: str

    def __post_init__(self):
        if not self.caption_id:
            raise ValueError("caption_id must be non-empty")
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        check_language_tag(self.lang)
        if not isinstance(self.source, CaptionSource):
            object.__setattr__(self, "source", CaptionSource(self.source))
        if not self.text.strip():
            raise ValueError(f"caption {self.caption_id!r} has empty text")

    def to_json(self) -> str:
        obj = {
            "caption_id": self.caption_id,
            "image_id": self.image_id,
            "lang": self.lang,
            "source": self.source.value,
            "text": self.text,
        }
        return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


class EmbeddingStore:
    """Immutable map from string id to a unit-norm float vector.

    Vectors are normalized at construction; a vector already within
    ``UNIT_NORM_TOL`` of unit norm is kept bit-exact so that
    ingest -> serialize -> ingest round-trips byte-identically.
    """

    def __init__(self, dim: int, entries: Mapping[str, Iterable[float]]):
        check_positive_int(dim, "dim")
        self._dim = dim
        self._ids: list[str] = []
        self._index: dict[str, int] = {}
        rows = []
        for key, raw in entries.items():
            if not isinstance(key, str) or not key:
                raise CorpusFormatError(f"embedding id must be a non-empty string, got {key!r}")
            if key in self._index:
                raise CorpusFormatError(f"duplicate embedding id {key!r}")
            vec = np.asarray(raw, dtype=np.float64)
            if vec.shape != (dim,):
                raise CorpusFormatError(
                    f"embedding {key!r} has dim {vec.shape}, expected ({dim},)"
                )
            if not np.all(np.isfinite(vec)):
                raise CorpusFormatError(f"embedding {key!r} contains non-finite values")
            norm = float(np.linalg.norm(vec))
            if norm < 1e-12:
                raise CorpusFormatError(f"embedding {key!r} is a zero vector and cannot be normalized")
            if abs(norm - 1.0) > UNIT_NORM_TOL:
                vec = vec / norm
            self._index[key] = len(self._ids)
            self._ids.append(key)
            rows.append(vec)
        self._matrix = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
        self._matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(self._ids)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def vector(self, key: str) -> np.ndarray:
        try:
            return self._matrix[self._index[key]]
        except KeyError:
            raise KeyError(f"id {key!r} not present in embedding store") from None

    def matrix(self, ids: Sequence[str] | None = None) -> np.ndarray:
        """Rows for ``ids`` (store order when omitted), as a read-only view/copy."""
        if ids is None:
            return self._matrix
        missing = [i for i in ids if i not in self._index]
        if missing:
            raise KeyError(f"ids not present in embedding store: {missing[:5]}")
        return self._matrix[[self._index[i] for i in ids]]

    def items(self):
        for key in self._ids:
            yield key, self._matrix[self._index[key]]


# ---------------------------------------------------------------------------
# Captions JSONL
# ---------------------------------------------------------------------------


def ingest_captions(path, expected_lang: str | None = None) -> list[CaptionRecord]:
    """Parse a captions JSONL file.

    Raises :class:`CorpusFormatError` naming the offending line for malformed
    JSON, unknown/missing keys, duplicate caption ids, or (when
    ``expected_lang`` is given) a language mismatch.
    """
    path = Path(path)
    records: list[CaptionRecord] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                raise CorpusFormatError(f"{path}:{lineno}: blank line in captions file")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in _CAPTION_KEYS if k not in obj]
            extra = [k for k in obj if k not in _CAPTION_KEYS]
            if missing or extra:
                raise CorpusFormatError(
                    f"{path}:{lineno}: bad keys (missing={missing}, unknown={extra})"
                )
            try:
                record = CaptionRecord(
                    caption_id=obj["caption_id"],
                    image_id=obj["image_id"],
                    lang=obj["lang"],
                    source=CaptionSource(obj["source"]),
                    text=obj["text"],
                )
            except (ValueError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
            if record.caption_id in seen:
                raise CorpusFormatError(
                    f"{path}: duplicate caption_id {record.caption_id!r} on lines "
                    f"{seen[record.caption_id]} and {lineno}"
                )
            if expected_lang is not None and record.lang != expected_lang:
                raise CorpusFormatError(
                    f"{path}:{lineno}: language {record.lang!r} does not match "
                    f"expected {expected_lang!r}"
                )
            seen[record.caption_id] = lineno
            records.append(record)
    return records


def write_captions(records: Iterable[CaptionRecord], path) -> None:
    """Serialize caption records to canonical JSONL (UTF-8, LF line endings)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(record.to_json())
            fh.write("\n")


def check_caption_images(records: Iterable[CaptionRecord], image_ids: Iterable[str]) -> None:
    """Assert every caption's image_id resolves in the given image set."""
    known = set(image_ids)
    for record in records:
        if record.image_id not in known:
            raise CorpusFormatError(
                f"caption {record.caption_id!r} references unknown image {record.image_id!r}"
            )


def captions_by_image(records: Iterable[CaptionRecord], lang: str | None = None):
    """Group captions by image id, optionally filtered to one language."""
    grouped: dict[str, list[CaptionRecord]] = {}
    for record in records:
        if lang is not None and record.lang != lang:
            continue
        grouped.setdefault(record.image_id, []).append(record)
    return grouped


# ---------------------------------------------------------------------------
# Embedding stores on disk
# ---------------------------------------------------------------------------


def write_embeddings(store: EmbeddingStore, path) -> None:
    """Write a store in the EMB1 binary format (float32 payload)."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(struct.pack("<I", store.dim))
        fh.write(struct.pack("<Q", len(store)))
        for key, vec in store.items():
            encoded = key.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CorpusFormatError(f"embedding id too long to serialize: {key[:40]!r}...")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(vec.astype("<f4").tobytes())


def write_embeddings_json(store: EmbeddingStore, path) -> None:
    """Write a store in the JSON fixture format."""
    path = Path(path)
    obj = {"dim": store.dim, "entries": {k: [float(x) for x in v] for k, v in store.items()}}
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")


def _read_exact(fh, n: int, path, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorpusFormatError(f"{path}: truncated file while reading {what}")
    return data


def ingest_embeddings(path) -> EmbeddingStore:
    """Read an embedding store, auto-detecting EMB1 binary vs JSON fallback."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
        if head == EMB1_MAGIC:
            return _ingest_emb1(fh, path)
    # JSON fallback
    try:
        with path.open("r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(
            f"{path}: magic mismatch (not EMB1) and not valid JSON: {exc}"
        ) from exc
    if not isinstance(obj, dict) or "dim" not in obj or "entries" not in obj:
        raise CorpusFormatError(f"{path}: JSON embeddings must have 'dim' and 'entries' keys")
    if not isinstance(obj["dim"], int):
        raise CorpusFormatError(f"{path}: 'dim' must be an integer")
    return EmbeddingStore(obj["dim"], obj["entries"])


def _ingest_emb1(fh, path) -> EmbeddingStore:
    (dim,) = struct.unpack("<I", _read_exact(fh, 4, path, "dim header"))
    (count,) = struct.unpack("<Q", _read_exact(fh, 8, path, "count header"))
    if dim < 1:
        raise CorpusFormatError(f"{path}: invalid dim {dim} in header")
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        (id_len,) = struct.unpack("<H", _read_exact(fh, 2, path, f"id length of entry {i}"))
        key = _read_exact(fh, id_len, path, f"id of entry {i}").decode("utf-8")
        raw = _read_exact(fh, 4 * dim, path, f"vector of entry {i}")
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if key in entries:
            raise CorpusFormatError(f"{path}: duplicate embedding id {key!r}")
        entries[key] = vec
    trailing = fh.read(1)
    if trailing:
        raise CorpusFormatError(f"{path}: trailing data after {count} entries (count mismatch)")
    try:
        return EmbeddingStore(dim, entries)
    except CorpusFormatError as exc:
        raise CorpusFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Corpus splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSplit:
    """Disjoint reference / train / eval image-id sets."""

    reference_ids: tuple[str, ...]
    train_ids: tuple[str, ...]
    eval_ids: tuple[str, ...]

    def __post_init__(self):
        ref, train, ev = set(self.reference_ids), set(self.train_ids), set(self.eval_ids)
        if len(ref) != len(self.reference_ids) or len(train) != len(self.train_ids) or len(ev) != len(self.eval_ids):
            raise ValueError("split sets contain duplicate ids")
        if ref & train or ref & ev or train & ev:
            raise ValueError("split sets must be pairwise disjoint")

    def to_json(self) -> str:
        obj = {
            "reference_ids": list(self.reference_ids),
            "train_ids": list(self.train_ids),
            "eval_ids": list(self.eval_ids),
        }
        return json.dumps(obj, ensure_ascii=False, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "CorpusSplit":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: malformed split manifest: {exc.msg}") from exc
        try:
            return cls(
                reference_ids=tuple(obj["reference_ids"]),
                train_ids=tuple(obj["train_ids"]),
                eval_ids=tuple(obj["eval_ids"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}: invalid split manifest: {exc}") from exc


def make_split(image_ids: Sequence[str], ref_fraction: float, train_fraction: float, seed: int) -> CorpusSplit:
    """Randomly split image ids into reference/train/eval sets.

    Sizes are floor(fraction * total) for reference and train; the remainder
    goes to eval. Deterministic for a fixed seed regardless of input order.
    """
    ids = list(image_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("image_ids contain duplicates")
    if len(ids) < 3:
        raise ValueError(f"need at least 3 images to split, got {len(ids)}")
    if ref_fraction <= 0 or train_fraction <= 0:
        raise ValueError("fractions must be positive")
    if ref_fraction + train_fraction > 1.0 + 1e-12:
        raise ValueError(
            f"fractions sum to {ref_fraction + train_fraction:.6g}, must be <= 1"
        )
    ordered = sorted(ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n = len(shuffled)
    n_ref = math.floor(ref_fraction * n)
    n_train = math.floor(train_fraction * n)
    return CorpusSplit(
        reference_ids=tuple(shuffled[:n_ref]),
        train_ids=tuple(shuffled[n_ref : n_ref + n_train]),
        eval_ids=tuple(shuffled[n_ref + n_train :]),
    )


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the desk-scale synthetic bilingual corpus.

    ``shift_magnitude`` is the norm of a fixed per-concept offset separating
    native-language text vectors from the English/MT ones; ``noise_sigma`` is
    the per-sample Gaussian noise scale.
    """

    num_concepts: int
    images_per_concept: int
    dim: int
    shift_magnitude: float
    noise_sigma: float
    seed: int
    source_lang: str = "en"
    target_lang: str = "xx"

    def __post_init__(self):
        check_positive_int(self.num_concepts, "num_concepts")
        check_positive_int(self.images_per_concept, "images_per_concept")
        check_positive_int(self.dim, "dim")
        if self.dim < 4:
            raise ValueError(f"dim must be >= 4, got {self.dim}")
        check_nonneg_real(self.shift_magnitude, "shift_magnitude")
        check_nonneg_real(self.noise_sigma, "noise_sigma")
        check_language_tag(self.source_lang)
        check_language_tag(self.target_lang)


@dataclass(frozen=True)
class SyntheticCorpus:
    images: tuple[ImageRecord, ...]
    image_store: EmbeddingStore
    text_en: EmbeddingStore
    text_native: EmbeddingStore
    text_rewrite: EmbeddingStore
    captions: tuple[CaptionRecord, ...]
    concept_of: dict = field(repr=False, default_factory=dict)


def _random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-ish random orthogonal matrix with a deterministic sign convention."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Generate a synthetic corpus where native text lives on a shifted distribution.

    Per image: the English/MT text vector is the image vector plus Gaussian
    noise; the native text vector adds a fixed per-concept shift of norm
    ``shift_magnitude``; the rewrite vector adds the same shift with
    independent noise. All text vectors are then carried into a common
    rotated basis (a fixed orthogonal map drawn from the seed), standing in
    for the frozen text encoder whose output space the projection head must
    align to the image space; the rotation preserves every text-to-text
    cosine. Text stores are keyed by image id. Fully reproducible from the
    seed.
    """
    rng = np.random.default_rng(spec.seed)
    images: list[ImageRecord] = []
    concept_of: dict[str, int] = {}
    img_entries: dict[str, np.ndarray] = {}
    en_entries: dict[str, np.ndarray] = {}
    native_entries: dict[str, np.ndarray] = {}
    rewrite_entries: dict[str, np.ndarray] = {}
    captions: list[CaptionRecord] = []

    def unit(v: np.ndarray) -> np.ndarray:
        return v / np.linalg.norm(v)

    rotation = _random_rotation(spec.dim, rng)

    for concept in range(spec.num_concepts):
        center = unit(rng.standard_normal(spec.dim))
        if spec.shift_magnitude > 0:
            shift = unit(rng.standard_normal(spec.dim)) * spec.shift_magnitude
        else:
            rng.standard_normal(spec.dim)  # keep the stream layout stable
            shift = np.zeros(spec.dim)
        for j in range(spec.images_per_concept):
            image_id = f"img{concept:02d}x{j:03d}"
            base = unit(center + spec.noise_sigma * rng.standard_normal(spec.dim))
            img_entries[image_id] = base
            en_entries[image_id] = rotation @ (base + spec.noise_sigma * rng.standard_normal(spec.dim))
            native_entries[image_id] = rotation @ (
                base + shift + spec.noise_sigma * rng.standard_normal(spec.dim)
            )
            rewrite_entries[image_id] = rotation @ (
                base + shift + spec.noise_sigma * rng.standard_normal(spec.dim)
            )
            images.append(ImageRecord(image_id=image_id))
            concept_of[image_id] = concept
            captions.append(
                CaptionRecord(
                    caption_id=f"{image_id}-en",
                    image_id=image_id,
                    lang=spec.source_lang,
                    source=CaptionSource.NATIVE,
                    text=f"concept {concept} scene {j} described in {spec.source_lang}",
                )
            )
            captions.append(
                CaptionRecord(
                    caption_id=f"{image_id}-nat",
                    image_id=image_id,
                    lang=spec.target_lang,
                    source=CaptionSource.NATIVE,
                    text=f"concept {concept} scene {j} described in {spec.target_lang}",
                )
            )

    return SyntheticCorpus(
        images=tuple(images),
        image_store=EmbeddingStore(spec.dim, img_entries),
        text_en=EmbeddingStore(spec.dim, en_entries),
        text_native=EmbeddingStore(spec.dim, native_entries),
        text_rewrite=EmbeddingStore(spec.dim, rewrite_entries),
        captions=tuple(captions),
        concept_of=concept_of,
    )
