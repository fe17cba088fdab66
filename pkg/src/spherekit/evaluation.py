"""Retrieval evaluation: full rankings, recall@K, and mean average precision.

Ranking is by descending cosine similarity with ties broken by ascending
gallery index, so results are reproducible bit-for-bit. Average precision
follows the protocol where each query carries easy/hard/junk gallery index
sets: junk entries are deleted from the ranking (later ranks close up), the
positive set depends on the difficulty split, and
``AP = (1/|P|) * sum_k k / rank_k`` over the positives in ranked order.
Per-query term sums use math.fsum, so equal inputs give equal floats on any
summation path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericalError, ProtocolError, ShapeError
from .geometry import UNIT_ATOL

__all__ = [
    "SPLITS",
    "RetrievalIndex",
    "RankedList",
    "QueryGroundTruth",
    "retrieve",
    "recall_at_k",
    "average_precision",
    "mean_average_precision",
]

SPLITS = ("easy", "medium", "hard")


@dataclass(frozen=True)
class RetrievalIndex:
    """Gallery of unit-norm descriptor rows with unique item identifiers.

    ``ids`` are opaque integers naming the items (defaults to 0..n-1); labels
    for recall computations travel separately, alongside the rankings.
    """

    gallery: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        gallery = np.asarray(self.gallery, dtype=np.float64)
        if gallery.ndim != 2 or gallery.shape[0] < 1:
            raise ShapeError("gallery must be a nonempty 2-D array")
        if not np.all(np.isfinite(gallery)):
            raise NumericalError("gallery contains non-finite values")
        norms = np.linalg.norm(gallery, axis=1)
        off = np.abs(norms - 1.0)
        if float(off.max()) > UNIT_ATOL:
            i = int(np.argmax(off))
            raise ShapeError(f"gallery row {i} has norm {norms[i]!r}, expected unit")
        if self.ids is None:
            ids = np.arange(gallery.shape[0], dtype=np.int64)
        else:
            ids = np.asarray(self.ids)
            if ids.shape != (gallery.shape[0],):
                raise ShapeError("one id per gallery row required")
            if not np.issubdtype(ids.dtype, np.integer):
                raise ShapeError(f"ids must be integers, got dtype {ids.dtype}")
            if np.unique(ids).size != ids.size:
                raise ShapeError("gallery ids must be unique")
            ids = np.ascontiguousarray(ids, dtype=np.int64)
        object.__setattr__(self, "gallery", gallery)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.gallery.shape[0]


@dataclass(frozen=True)
class RankedList:
    """One query's full gallery ordering with nonincreasing scores."""

    indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        if indices.ndim != 1 or scores.shape != indices.shape:
            raise ShapeError("indices and scores must be matching 1-D arrays")
        if indices.size:
            if indices.min() < 0:
                raise ShapeError("ranked gallery indices must be nonnegative")
            if np.unique(indices).size != indices.size:
                raise ShapeError("ranked gallery indices must be distinct")
            if np.any(np.diff(scores) > 0):
                raise ShapeError("ranking scores must be nonincreasing")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class QueryGroundTruth:
    """Easy/hard/junk gallery index sets for one query; pairwise disjoint."""

    easy: np.ndarray
    hard: np.ndarray
    junk: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("easy", "hard", "junk"):
            arr = np.asarray(getattr(self, name))
            if arr.size == 0:
                arr = np.zeros(0, dtype=np.int64)
            if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
                raise ProtocolError(f"{name} must be a 1-D integer array")
            arr = np.ascontiguousarray(arr, dtype=np.int64)
            if arr.size != np.unique(arr).size:
                raise ProtocolError(f"{name} contains duplicate gallery indices")
            arrays[name] = arr
        for a, b in (("easy", "hard"), ("easy", "junk"), ("hard", "junk")):
            if np.intersect1d(arrays[a], arrays[b]).size:
                raise ProtocolError(f"{a} and {b} sets overlap")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    def check_bounds(self, gallery_size: int) -> None:
        for name in ("easy", "hard", "junk"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() >= gallery_size):
                raise ProtocolError(
                    f"{name} indices fall outside gallery of size {gallery_size}"
                )


def retrieve(
    index: RetrievalIndex, queries: np.ndarray, exclude_self: bool = False
) -> list[RankedList]:
    """Rank the whole gallery for each query row.

    ``exclude_self`` supports leave-one-out protocols where the query set IS
    the gallery: entry i is removed from ranking i. Ties in similarity are
    broken by ascending gallery index (stable sort on negated scores).
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ShapeError("queries must be 2-D")
    if queries.shape[1] != index.gallery.shape[1]:
        raise ShapeError(
            f"query dim {queries.shape[1]} != gallery dim {index.gallery.shape[1]}"
        )
    if exclude_self and queries.shape[0] != len(index):
        raise ShapeError(
            "exclude_self requires the query set and gallery to be the same size"
        )
    sims = queries @ index.gallery.T
    order = np.argsort(-sims, axis=1, kind="stable")
    out = []
    for i in range(queries.shape[0]):
        idx = order[i]
        if exclude_self:
            idx = idx[idx != i]
        out.append(RankedList(indices=idx, scores=sims[i, idx]))
    return out


def recall_at_k(
    rankings: Sequence[RankedList],
    labels: np.ndarray,
    ks: Iterable[int],
    gallery_labels: np.ndarray | None = None,
) -> dict[int, float]:
    """Fraction of queries with at least one same-label hit in the top K.

    ``labels`` are the query labels. In the leave-one-out protocol the query
    set is the gallery, so ranked indices resolve against ``labels`` itself;
    pass ``gallery_labels`` only for split query/gallery setups. Every query
    counts in the denominator. Raises ProtocolError when no query has any
    positive in the gallery (the metric would be vacuous) or when K exceeds
    the usable ranking depth.
    """
    query_labels = np.ascontiguousarray(labels, dtype=np.int64)
    if gallery_labels is None:
        gallery_labels = query_labels
    else:
        gallery_labels = np.ascontiguousarray(gallery_labels, dtype=np.int64)
    if len(rankings) != query_labels.shape[0]:
        raise ShapeError("one label per query ranking required")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ProtocolError("recall cutoffs must be positive integers")
    depth = min((len(r) for r in rankings), default=0)
    if ks[-1] > depth:
        raise ProtocolError(f"K={ks[-1]} exceeds usable ranking depth {depth}")
    any_positive = False
    hits = {k: 0 for k in ks}
    for ranking, label in zip(rankings, query_labels):
        if ranking.indices.size and int(ranking.indices.max()) >= gallery_labels.shape[0]:
            raise ShapeError("ranking refers to indices outside the labeled gallery")
        ranked_labels = gallery_labels[ranking.indices]
        if np.any(ranked_labels == label):
            any_positive = True
        match_positions = np.flatnonzero(ranked_labels[: ks[-1]] == label)
        first = int(match_positions[0]) + 1 if match_positions.size else None
        for k in ks:
            if first is not None and first <= k:
                hits[k] += 1
    if not any_positive:
        raise ProtocolError(
            "no query has a same-label gallery item; recall is undefined"
        )
    n = query_labels.shape[0]
    return {k: hits[k] / n for k in ks}


def _effective_sets(gt: QueryGroundTruth, split: str):
    if split == "medium":
        positives = np.concatenate([gt.easy, gt.hard])
        junk = gt.junk
    elif split == "hard":
        positives = gt.hard
        junk = np.concatenate([gt.junk, gt.easy])
    elif split == "easy":
        positives = gt.easy
        junk = np.concatenate([gt.junk, gt.hard])
    else:
        raise ProtocolError(f"unknown difficulty split {split!r}; expected one of {SPLITS}")
    return positives, junk


def average_precision(ranking: RankedList, gt: QueryGroundTruth, split: str) -> float:
    """AP for one query under a difficulty split.

    Junk-for-this-split entries are deleted from the ranking before ranks are
    assigned. Raises ProtocolError when the split leaves no positives.
    """
    positives, junk = _effective_sets(gt, split)
    if positives.size == 0:
        raise ProtocolError(f"query has no positives under the {split!r} split")
    junk_mask = np.zeros(len(ranking), dtype=bool)
    if junk.size:
        junk_mask = np.isin(ranking.indices, junk)
    kept = ranking.indices[~junk_mask]
    is_pos = np.isin(kept, positives)
    found = int(is_pos.sum())
    if found != positives.size:
        raise ProtocolError(
            f"ranking covers {found} of {positives.size} positives; "
            "ground-truth indices must appear in the ranking"
        )
    ranks = np.flatnonzero(is_pos) + 1  # 1-based ranks after junk removal
    terms = [(k + 1) / int(r) for k, r in enumerate(ranks)]
    return math.fsum(terms) / positives.size


def mean_average_precision(
    rankings: Sequence[RankedList],
    ground_truths: Sequence[QueryGroundTruth],
    split: str,
) -> tuple[float, list[int]]:
    """Mean AP over queries that have positives under the split.

    Queries with an empty positive set are skipped, not scored zero; their
    indices are returned alongside the mean so reports can name them. Raises
    ProtocolError when every query is skipped.
    """
    if len(rankings) != len(ground_truths):
        raise ShapeError("one ground-truth record per ranking required")
    values = []
    skipped = []
    for i, (ranking, gt) in enumerate(zip(rankings, ground_truths)):
        positives, _ = _effective_sets(gt, split)
        if positives.size == 0:
            skipped.append(i)
            continue
        values.append(average_precision(ranking, gt, split))
    if not values:
        raise ProtocolError(f"every query is empty under the {split!r} split")
    return math.fsum(values) / len(values), skipped
