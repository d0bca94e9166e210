"""Cross-language object-term distribution analysis over a hypernym taxonomy.

Nouns are mapped to their first-listed synset, walked breadth-first through
the hypernym closure, and attributed to the supercategory whose anchor is
reached at minimum depth (ties break by supercategory declaration order).
Counting is token-level; per-corpus distributions can then be compared as
count ratios per supercategory.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ._text import strip_plural, tokenize
from .corpus import CaptionRecord
from .errors import TaxonomyError

EXTRACT_MODES = ("pretagged", "lexicon")


@dataclass(frozen=True)
class Taxonomy:
    """Hypernym DAG plus a lemma index (sense order significant)."""

    nodes: frozenset
    parents: Mapping[str, tuple]
    lemma_index: Mapping[str, tuple]

    def hypernyms(self, synset_id: str) -> tuple:
        return self.parents.get(synset_id, ())


@dataclass(frozen=True)
class SupercategorySet:
    """Ordered (name, anchor synset id) pairs; order is the tie-breaking priority."""

    members: tuple

    def __post_init__(self):
        names = [name for name, _ in self.members]
        if len(set(names)) != len(names):
            raise ValueError("supercategory names must be unique")

    @property
    def names(self) -> tuple:
        return tuple(name for name, _ in self.members)

    def check_anchors(self, taxonomy: Taxonomy) -> None:
        missing = [anchor for _, anchor in self.members if anchor not in taxonomy.nodes]
        if missing:
            raise TaxonomyError(f"supercategory anchors missing from taxonomy: {missing}")

    @classmethod
    def load(cls, path) -> "SupercategorySet":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(members=tuple((str(n), str(a)) for n, a in obj))


@dataclass
class TermDistribution:
    """Token-level term counts per supercategory plus bookkeeping totals.

    ``counts`` retains every lemma; reports filter to counts strictly greater
    than ``min_count``. Conservation: the sum of all supercategory counts plus
    ``unmapped_count`` (lemma not in the index) plus ``unmatched_count``
    (mapped but no anchor reachable) equals ``total_nouns``.
    """

    supercategories: tuple
    counts: dict = field(default_factory=dict)
    total_nouns: int = 0
    unmapped_count: int = 0
    unmatched_count: int = 0
    min_count: int = 0

    def filtered(self) -> dict:
        return {
            name: {t: c for t, c in self.counts.get(name, {}).items() if c > self.min_count}
            for name in self.supercategories
        }

    def to_dict(self) -> dict:
        return {
            "supercategories": list(self.supercategories),
            "counts": {name: dict(sorted(self.counts.get(name, {}).items())) for name in self.supercategories},
            "total_nouns": self.total_nouns,
            "unmapped_count": self.unmapped_count,
            "unmatched_count": self.unmatched_count,
            "min_count": self.min_count,
        }

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
            newline="\n",
        )

    @classmethod
    def load(cls, path) -> "TermDistribution":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            supercategories=tuple(obj["supercategories"]),
            counts={k: dict(v) for k, v in obj["counts"].items()},
            total_nouns=obj["total_nouns"],
            unmapped_count=obj["unmapped_count"],
            unmatched_count=obj["unmatched_count"],
            min_count=obj["min_count"],
        )


def load_taxonomy(edges_path, lemmas_path) -> Taxonomy:
    """Load a taxonomy from an edge-list file and a lemma-index file.

    Edge lines are ``child_synset<TAB>parent_synset``; lemma lines are
    ``lemma<TAB>synset1,synset2,...`` with sense order significant. The edge
    set must be acyclic and every lemma must reference known synsets.
    """
    edges_path, lemmas_path = Path(edges_path), Path(lemmas_path)
    parents: dict[str, list[str]] = {}
    nodes: set[str] = set()
    for lineno, line in enumerate(edges_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise TaxonomyError(f"{edges_path}:{lineno}: expected 'child<TAB>parent'")
        child, parent = parts
        nodes.add(child)
        nodes.add(parent)
        siblings = parents.setdefault(child, [])
        if parent not in siblings:
            siblings.append(parent)

    _check_acyclic(parents, edges_path)

    lemma_index: dict[str, tuple] = {}
    for lineno, line in enumerate(lemmas_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise TaxonomyError(f"{lemmas_path}:{lineno}: expected 'lemma<TAB>synset,...'")
        lemma, synsets_field = parts
        synsets = tuple(s for s in synsets_field.split(",") if s)
        if not synsets:
            raise TaxonomyError(f"{lemmas_path}:{lineno}: lemma {lemma!r} maps to no synsets")
        dangling = [s for s in synsets if s not in nodes]
        if dangling:
            raise TaxonomyError(
                f"{lemmas_path}:{lineno}: lemma {lemma!r} references unknown synsets {dangling}"
            )
        if lemma in lemma_index:
            raise TaxonomyError(f"{lemmas_path}:{lineno}: duplicate lemma {lemma!r}")
        lemma_index[lemma] = synsets

    return Taxonomy(
        nodes=frozenset(nodes),
        parents={k: tuple(v) for k, v in parents.items()},
        lemma_index=lemma_index,
    )


def _check_acyclic(parents: Mapping[str, Sequence[str]], path) -> None:
    # Iterative three-color DFS; reports one node on the first cycle found.
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict[str, int] = {}
    for start in parents:
        if color.get(start, WHITE) != WHITE:
            continue
        stack = [(start, iter(parents.get(start, ())))]
        color[start] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                state = color.get(nxt, WHITE)
                if state == GRAY:
                    raise TaxonomyError(f"{path}: hypernym cycle detected at node {nxt!r}")
                if state == WHITE:
                    color[nxt] = GRAY
                    stack.append((nxt, iter(parents.get(nxt, ()))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()


def lemma_of(token: str, lemma_index: Mapping[str, Sequence[str]] | None = None) -> str:
    """Lemmatize a lowercase token; an exact lemma-index hit short-circuits stripping."""
    if lemma_index is not None and token in lemma_index:
        return token
    return strip_plural(token)


def extract_nouns(
    caption_text: str,
    mode: str = "lexicon",
    *,
    taxonomy: Taxonomy | None = None,
    tagged_tokens: Sequence[tuple] | None = None,
    aliases: Mapping[str, str] | None = None,
) -> list[str]:
    """Extract lowercase noun lemmas from one caption.

    ``pretagged`` keeps tokens tagged NOUN from ``tagged_tokens`` (pairs of
    token text and POS) and lemmatizes with the plural suffix table.
    ``lexicon`` keeps every token whose lemma appears in the taxonomy's lemma
    index, a noun-lexicon over-approximation. Counts are token-level:
    duplicates are retained.
    """
    if mode not in EXTRACT_MODES:
        raise ValueError(f"mode must be one of {EXTRACT_MODES}, got {mode!r}")
    if mode == "pretagged":
        if tagged_tokens is None:
            raise ValueError("pretagged mode requires tagged_tokens")
        lemmas = [lemma_of(text.lower()) for text, pos in tagged_tokens if pos == "NOUN"]
    else:
        if taxonomy is None:
            raise ValueError("lexicon mode requires the taxonomy's lemma index")
        index = taxonomy.lemma_index
        lemmas = []
        for token in tokenize(caption_text):
            lemma = lemma_of(token, index)
            if lemma in index:
                lemmas.append(lemma)
    if aliases:
        lemmas = [aliases.get(lemma, lemma) for lemma in lemmas]
    return lemmas


def supercategory_of(lemma: str, taxonomy: Taxonomy, supercats: SupercategorySet) -> str | None:
    """Supercategory whose anchor the lemma's first sense reaches at minimum depth.

    The closure is reflexive (an anchor lemma matches at depth 0); ties at
    equal depth break by supercategory order; returns None for lemmas outside
    the index or with no reachable anchor.
    """
    senses = taxonomy.lemma_index.get(lemma)
    if not senses:
        return None
    anchor_to_name: dict[str, str] = {}
    for name, anchor in supercats.members:
        anchor_to_name.setdefault(anchor, name)
    frontier = [senses[0]]
    visited = {senses[0]}
    order = {name: i for i, (name, _) in enumerate(supercats.members)}
    while frontier:
        hits = [anchor_to_name[s] for s in frontier if s in anchor_to_name]
        if hits:
            return min(hits, key=order.__getitem__)
        nxt = []
        for synset in frontier:
            for parent in taxonomy.hypernyms(synset):
                if parent not in visited:
                    visited.add(parent)
                    nxt.append(parent)
        frontier = nxt
    return None


def distribution(
    captions: Iterable,
    taxonomy: Taxonomy,
    supercats: SupercategorySet,
    min_count: int = 0,
    *,
    mode: str = "lexicon",
    tagged: Mapping[str, Sequence[tuple]] | None = None,
    aliases: Mapping[str, str] | None = None,
) -> TermDistribution:
    """Count noun terms per supercategory over a caption corpus.

    ``captions`` holds caption texts or :class:`CaptionRecord` objects; in
    pretagged mode records are required and ``tagged`` must map caption ids to
    (token, POS) pairs.
    """
    if min_count < 0:
        raise ValueError(f"min_count must be >= 0, got {min_count}")
    supercats.check_anchors(taxonomy)
    counts: dict[str, Counter] = {name: Counter() for name in supercats.names}
    total = 0
    unmapped = 0
    unmatched = 0
    cache: dict[str, str | None] = {}
    for caption in captions:
        if isinstance(caption, CaptionRecord):
            text, caption_id = caption.text, caption.caption_id
        else:
            text, caption_id = str(caption), None
        if mode == "pretagged":
            if tagged is None or caption_id is None or caption_id not in tagged:
                raise ValueError(
                    f"pretagged mode: no tagged tokens for caption {caption_id!r}"
                )
            lemmas = extract_nouns(text, "pretagged", tagged_tokens=tagged[caption_id], aliases=aliases)
        else:
            lemmas = extract_nouns(text, "lexicon", taxonomy=taxonomy, aliases=aliases)
        for lemma in lemmas:
            total += 1
            if lemma not in taxonomy.lemma_index:
                unmapped += 1
                continue
            if lemma not in cache:
                cache[lemma] = supercategory_of(lemma, taxonomy, supercats)
            name = cache[lemma]
            if name is None:
                unmatched += 1
            else:
                counts[name][lemma] += 1
    return TermDistribution(
        supercategories=supercats.names,
        counts={name: dict(c) for name, c in counts.items()},
        total_nouns=total,
        unmapped_count=unmapped,
        unmatched_count=unmatched,
        min_count=min_count,
    )


@dataclass(frozen=True)
class ComparisonRow:
    supercategory: str
    term: str
    count_a: int
    count_b: int
    ratio: float
    flagged: bool


def compare(dist_a: TermDistribution, dist_b: TermDistribution, union_threshold: int = 0) -> list[ComparisonRow]:
    """Per supercategory, the union of terms exceeding the threshold in either corpus.

    The ratio is count_a / count_b; a zero count on either side renders as an
    infinite (or zero) ratio and the row is flagged.
    """
    if dist_a.supercategories != dist_b.supercategories:
        raise ValueError(
            f"supercategory sets differ: {dist_a.supercategories} vs {dist_b.supercategories}"
        )
    rows: list[ComparisonRow] = []
    for name in dist_a.supercategories:
        a_counts = dist_a.counts.get(name, {})
        b_counts = dist_b.counts.get(name, {})
        union = {t for t, c in a_counts.items() if c > union_threshold}
        union |= {t for t, c in b_counts.items() if c > union_threshold}
        for term in sorted(union):
            ca = a_counts.get(term, 0)
            cb = b_counts.get(term, 0)
            ratio = math.inf if cb == 0 else ca / cb
            rows.append(
                ComparisonRow(
                    supercategory=name,
                    term=term,
                    count_a=ca,
                    count_b=cb,
                    ratio=ratio,
                    flagged=(ca == 0 or cb == 0),
                )
            )
    return rows


def write_comparison_csv(rows: Sequence[ComparisonRow], path) -> None:
    """CSV report: supercategory, term, count_a, count_b, ratio (flagged rows marked)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["supercategory", "term", "count_a", "count_b", "ratio", "flagged"])
        for row in rows:
            ratio = "inf" if math.isinf(row.ratio) else f"{row.ratio:.6g}"
            writer.writerow(
                [row.supercategory, row.term, row.count_a, row.count_b, ratio, int(row.flagged)]
            )


def load_aliases(path) -> dict[str, str]:
    """Lemma alias file: lines ``alias<TAB>canonical``."""
    aliases: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise TaxonomyError(f"{path}:{lineno}: expected 'alias<TAB>canonical'")
        aliases[parts[0]] = parts[1]
    return aliases


def load_tagged(path) -> dict[str, list[tuple]]:
    """Pretagged captions JSONL: ``{caption_id, tokens: [{text, pos}]}`` per line."""
    path = Path(path)
    tagged: dict[str, list[tuple]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
                tokens = [(t["text"], t["pos"]) for t in obj["tokens"]]
                tagged[obj["caption_id"]] = tokens
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise TaxonomyError(f"{path}:{lineno}: bad pretagged row: {exc}") from exc
    return tagged
