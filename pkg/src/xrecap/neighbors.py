"""Exact cosine nearest-neighbor index and guidance-example selection.

Reference sets are small (~10k), so the index is a plain matrix scanned
exactly; ties break by ascending insertion order for reproducible runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._validation import as_float_vector, check_positive_int, check_unit_rows
from .corpus import CaptionRecord, EmbeddingStore
from .errors import CorpusFormatError


@dataclass(frozen=True)
class RefSelConfig:
    """Which neighbor rank to use (1 = nearest) and the caption-sampling seed."""

    k: int = 1
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.k, "k")


@dataclass(frozen=True)
class GuidanceExample:
    """An input/output caption pair attached to the reference image nearest a query."""

    reference_image_id: str
    input_caption: CaptionRecord
    output_caption: CaptionRecord
    similarity: float

    def __post_init__(self):
        if self.input_caption.image_id != self.reference_image_id:
            raise ValueError("input caption does not belong to the reference image")
        if self.output_caption.image_id != self.reference_image_id:
            raise ValueError("output caption does not belong to the reference image")
        if not np.isfinite(self.similarity) or not -1.0 - 1e-6 <= self.similarity <= 1.0 + 1e-6:
            raise ValueError(f"similarity must be a cosine in [-1, 1], got {self.similarity!r}")


class NnIndex:
    """Immutable exact-cosine index over a fixed ordered id list."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        ids = list(ids)
        if len(set(ids)) != len(ids):
            raise ValueError("index ids must be unique")
        if matrix.shape[0] != len(ids):
            raise ValueError("matrix row count does not match ids")
        check_unit_rows(matrix, "index matrix")
        self._ids = tuple(ids)
        self._pos = {key: i for i, key in enumerate(ids)}
        self._matrix = np.array(matrix, dtype=np.float64)
        self._matrix.setflags(write=False)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._pos

    def query(self, vector, k: int) -> list[tuple[str, float]]:
        """Exact top-k ids by cosine similarity, descending, ties by insertion order."""
        v = as_float_vector(vector, "query vector", dim=self.dim)
        check_unit_rows(v[None, :], "query vector")
        check_positive_int(k, "k")
        if k > len(self._ids):
            raise ValueError(f"k={k} exceeds index size {len(self._ids)}")
        sims = self._matrix @ v
        order = np.argsort(-sims, kind="stable")[:k]
        return [(self._ids[i], float(sims[i])) for i in order]


def build_index(store: EmbeddingStore, ids: Sequence[str]) -> NnIndex:
    """Build an index over exactly the given ids, in the given order."""
    missing = [i for i in ids if i not in store]
    if missing:
        raise ValueError(f"ids missing from embedding store: {missing[:5]}")
    return NnIndex(ids, store.matrix(list(ids)))


def query(index: NnIndex, vector, k: int) -> list[tuple[str, float]]:
    return index.query(vector, k)


def _per_image_rng(seed: int, image_id: str) -> np.random.Generator:
    # Stable across processes (Python's hash() is salted; sha256 is not).
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "big")
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, key])


def select_guidance(
    train_image_id: str,
    query_vector,
    index: NnIndex,
    captions_src: Mapping[str, Sequence[CaptionRecord]],
    captions_tgt: Mapping[str, Sequence[CaptionRecord]],
    config: RefSelConfig,
) -> GuidanceExample:
    """Select the guidance example for one training image.

    Returns the ``config.k``-th neighbor from the reference index, with one
    source-language and one target-language caption of that image chosen
    uniformly under ``config.seed`` combined with the train image id
    (deterministic per image). The train image must not be in the index.
    """
    if train_image_id in index:
        raise ValueError(
            f"train image {train_image_id!r} is present in the reference index; "
            "reference and train sets must be disjoint"
        )
    (reference_id, similarity) = index.query(query_vector, config.k)[-1]
    src_pool = list(captions_src.get(reference_id, ()))
    tgt_pool = list(captions_tgt.get(reference_id, ()))
    if not src_pool:
        raise ValueError(f"reference image {reference_id!r} has no source-language captions")
    if not tgt_pool:
        raise ValueError(f"reference image {reference_id!r} has no target-language captions")
    rng = _per_image_rng(config.seed, train_image_id)
    input_caption = src_pool[int(rng.integers(len(src_pool)))]
    output_caption = tgt_pool[int(rng.integers(len(tgt_pool)))]
    return GuidanceExample(
        reference_image_id=reference_id,
        input_caption=input_caption,
        output_caption=output_caption,
        similarity=similarity,
    )


def assign_guidance(
    train_ids: Sequence[str],
    image_store: EmbeddingStore,
    index: NnIndex,
    captions_src: Mapping[str, Sequence[CaptionRecord]],
    captions_tgt: Mapping[str, Sequence[CaptionRecord]],
    config: RefSelConfig,
) -> dict[str, GuidanceExample]:
    """Select a guidance example for every train image."""
    out: dict[str, GuidanceExample] = {}
    for image_id in train_ids:
        out[image_id] = select_guidance(
            image_id, image_store.vector(image_id), index, captions_src, captions_tgt, config
        )
    return out


def write_assignments(assignments: Mapping[str, GuidanceExample], path) -> None:
    """Export guidance assignments as JSONL."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for train_image_id, guidance in assignments.items():
            obj = {
                "train_image_id": train_image_id,
                "reference_image_id": guidance.reference_image_id,
                "similarity": guidance.similarity,
                "input_caption_id": guidance.input_caption.caption_id,
                "output_caption_id": guidance.output_caption.caption_id,
            }
            fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def read_assignments(path) -> list[dict]:
    """Read guidance assignment rows (caption references, not resolved records)."""
    path = Path(path)
    rows = []
    keys = {"train_image_id", "reference_image_id", "similarity", "input_caption_id", "output_caption_id"}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            if not isinstance(obj, dict) or set(obj) != keys:
                raise CorpusFormatError(f"{path}:{lineno}: bad assignment row")
            rows.append(obj)
    return rows
