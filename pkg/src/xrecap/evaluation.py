"""Bidirectional retrieval evaluation, error-set construction, and ROUGE.

Recall@k is the percentage of queries whose gold item ranks within the top k
of an exact cosine ordering over the full gallery; mean recall averages the
six scores (recall@1/5/10 in both directions). Error sets collect queries a
native-trained model retrieves within rank 10 but an MT-trained model does
not, isolating failures attributable to translation bias.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._text import tokenize
from ._validation import as_float_matrix, check_unit_rows

RECALL_KS = (1, 5, 10)
ERROR_SET_CUTOFF = 10

ROUGE_VARIANTS = ("r1", "r2", "r3", "r4", "rL")


@dataclass(frozen=True)
class RankingResult:
    """Full gallery ordering for one query plus the 1-based rank of its gold item."""

    query_id: str
    ranked_gallery_ids: tuple[str, ...]
    rank_of_gold: int

    def __post_init__(self):
        if not 1 <= self.rank_of_gold <= len(self.ranked_gallery_ids):
            raise ValueError(
                f"rank_of_gold {self.rank_of_gold} out of range for gallery of "
                f"{len(self.ranked_gallery_ids)}"
            )


@dataclass(frozen=True)
class RetrievalReport:
    """Recall@1/5/10 in both directions (percent) and their arithmetic mean."""

    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float

    def __post_init__(self):
        if not (self.i2t_r1 <= self.i2t_r5 <= self.i2t_r10):
            raise ValueError("i2t recalls must be non-decreasing in k")
        if not (self.t2i_r1 <= self.t2i_r5 <= self.t2i_r10):
            raise ValueError("t2i recalls must be non-decreasing in k")

    @property
    def scores(self) -> tuple[float, ...]:
        return (self.i2t_r1, self.i2t_r5, self.i2t_r10, self.t2i_r1, self.t2i_r5, self.t2i_r10)

    @property
    def mean_recall(self) -> float:
        return float(np.mean(self.scores))

    def to_dict(self) -> dict:
        return {
            "i2t_r1": self.i2t_r1,
            "i2t_r5": self.i2t_r5,
            "i2t_r10": self.i2t_r10,
            "t2i_r1": self.t2i_r1,
            "t2i_r5": self.t2i_r5,
            "t2i_r10": self.t2i_r10,
            "mean_recall": self.mean_recall,
        }

    def rounded_row(self) -> str:
        """One-decimal rendering in table order, mean last."""
        return " ".join(f"{v:.1f}" for v in self.scores + (self.mean_recall,))


@dataclass(frozen=True)
class ErrorSet:
    """Queries correct@10 for the native model but incorrect@10 for the MT model."""

    direction: str
    member_ids: frozenset[str]

    def __post_init__(self):
        if self.direction not in ("i2t", "t2i"):
            raise ValueError(f"direction must be 'i2t' or 't2i', got {self.direction!r}")


def rank_all(
    query_ids: Sequence[str],
    query_vectors,
    gallery_ids: Sequence[str],
    gallery_vectors,
    gold: Mapping[str, str],
) -> list[RankingResult]:
    """Rank the full gallery for every query by cosine similarity.

    ``gold`` maps each query id to its single gold gallery id. Ties break by
    ascending gallery insertion index.
    """
    Q = as_float_matrix(query_vectors, "query vectors")
    G = as_float_matrix(gallery_vectors, "gallery vectors", dim=Q.shape[1])
    check_unit_rows(Q, "query vectors")
    check_unit_rows(G, "gallery vectors")
    if len(query_ids) != Q.shape[0]:
        raise ValueError("query_ids length does not match query_vectors")
    if len(gallery_ids) != G.shape[0]:
        raise ValueError("gallery_ids length does not match gallery_vectors")
    gallery_pos = {g: i for i, g in enumerate(gallery_ids)}
    if len(gallery_pos) != len(gallery_ids):
        raise ValueError("gallery_ids contain duplicates")
    for q in query_ids:
        if q not in gold:
            raise ValueError(f"query {q!r} has no gold gallery item")
        if gold[q] not in gallery_pos:
            raise ValueError(f"gold item {gold[q]!r} for query {q!r} is not in the gallery")

    sims = Q @ G.T
    results = []
    for qi, q in enumerate(query_ids):
        order = np.argsort(-sims[qi], kind="stable")
        ranked = tuple(gallery_ids[i] for i in order)
        rank_of_gold = ranked.index(gold[q]) + 1
        results.append(RankingResult(query_id=q, ranked_gallery_ids=ranked, rank_of_gold=rank_of_gold))
    return results


def _recalls(rankings: Sequence[RankingResult]) -> tuple[float, float, float]:
    if not rankings:
        raise ValueError("cannot compute recall over an empty ranking list")
    ranks = np.array([r.rank_of_gold for r in rankings])
    return tuple(100.0 * float(np.mean(ranks <= k)) for k in RECALL_KS)


def recall_report(
    i2t_rankings: Sequence[RankingResult], t2i_rankings: Sequence[RankingResult]
) -> RetrievalReport:
    """Recall@1/5/10 for both directions."""
    i2t = _recalls(i2t_rankings)
    t2i = _recalls(t2i_rankings)
    return RetrievalReport(
        i2t_r1=i2t[0], i2t_r5=i2t[1], i2t_r10=i2t[2],
        t2i_r1=t2i[0], t2i_r5=t2i[1], t2i_r10=t2i[2],
    )


def build_error_set(
    native_rankings: Sequence[RankingResult],
    mt_rankings: Sequence[RankingResult],
    direction: str,
) -> ErrorSet:
    """Queries with native rank <= 10 and MT rank > 10."""
    native = {r.query_id: r.rank_of_gold for r in native_rankings}
    mt = {r.query_id: r.rank_of_gold for r in mt_rankings}
    if set(native) != set(mt):
        only_native = sorted(set(native) - set(mt))[:5]
        only_mt = sorted(set(mt) - set(native))[:5]
        raise ValueError(
            f"query ids differ between runs (only native: {only_native}, only mt: {only_mt})"
        )
    members = frozenset(
        q for q in native if native[q] <= ERROR_SET_CUTOFF and mt[q] > ERROR_SET_CUTOFF
    )
    return ErrorSet(direction=direction, member_ids=members)


def restricted_report(
    i2t_rankings: Sequence[RankingResult],
    t2i_rankings: Sequence[RankingResult],
    i2t_error_set: ErrorSet,
    t2i_error_set: ErrorSet,
) -> RetrievalReport:
    """Recall over error-set members only; the rankings stay over the full gallery."""

    def restrict(rankings, error_set):
        if not error_set.member_ids:
            raise ValueError(f"{error_set.direction} error set is empty")
        present = {r.query_id for r in rankings}
        missing = sorted(error_set.member_ids - present)
        if missing:
            raise ValueError(f"error-set members missing from rankings: {missing[:5]}")
        return [r for r in rankings if r.query_id in error_set.member_ids]

    return recall_report(restrict(i2t_rankings, i2t_error_set), restrict(t2i_rankings, t2i_error_set))


# ---------------------------------------------------------------------------
# ROUGE
# ---------------------------------------------------------------------------


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: float, candidate_total: float, reference_total: float) -> float:
    precision = overlap / candidate_total if candidate_total else 0.0
    recall = overlap / reference_total if reference_total else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                current.append(prev[j - 1] + 1)
            else:
                current.append(max(prev[j], current[-1]))
        prev = current
    return prev[-1]


def rouge(candidate: str, reference: str, variant: str) -> float:
    """ROUGE F1 in [0, 1]: n-gram overlap for r1-r4, LCS for rL.

    Texts are lowercased and split on whitespace and punctuation. Returns 0
    when either side has no n-grams of the requested order.
    """
    if variant not in ROUGE_VARIANTS:
        raise ValueError(f"variant must be one of {ROUGE_VARIANTS}, got {variant!r}")
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if variant == "rL":
        return _f1(_lcs_length(cand, ref), len(cand), len(ref))
    n = int(variant[1])
    cand_ngrams = _ngrams(cand, n)
    ref_ngrams = _ngrams(ref, n)
    overlap = sum(min(c, ref_ngrams[g]) for g, c in cand_ngrams.items())
    return _f1(overlap, sum(cand_ngrams.values()), sum(ref_ngrams.values()))


def rouge_all(candidate: str, reference: str) -> dict[str, float]:
    """All five ROUGE variants for one pair."""
    return {v: rouge(candidate, reference, v) for v in ROUGE_VARIANTS}


def mean_rouge(pairs: Iterable[tuple[str, str]]) -> dict[str, float]:
    """Average F1 per variant over (candidate, reference) pairs."""
    totals = Counter()
    count = 0
    for candidate, reference in pairs:
        for variant, score in rouge_all(candidate, reference).items():
            totals[variant] += score
        count += 1
    if count == 0:
        raise ValueError("no pairs to score")
    return {v: totals[v] / count for v in ROUGE_VARIANTS}
