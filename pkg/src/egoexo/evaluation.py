"""Cross-view retrieval: gallery ranking, CMC curves and AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import FeatureMatrix

METRICS = ("euclidean", "cosine")


@dataclass(frozen=True)
class RankingResult:
    query_id: str
    rank: int
    gallery_size: int

    def __post_init__(self):
        if not 1 <= self.rank <= self.gallery_size:
            raise ValueError(f"rank {self.rank} outside [1, {self.gallery_size}]")


@dataclass(frozen=True, eq=False)
class CmcCurve:
    values: np.ndarray  # values[k-1] = fraction of queries with rank <= k

    @property
    def gallery_size(self) -> int:
        return len(self.values)

    def at(self, k: int) -> float:
        return float(self.values[k - 1])


def _rows(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.data
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def pessimistic_rank(values, truth: int, descending: bool = False) -> int:
    """1-based rank of ``values[truth]``; ties put the truth last among equals."""
    values = np.asarray(values)
    t = values[truth]
    return int(np.count_nonzero(values >= t if descending else values <= t))


def pessimistic_ranks(matrix, truth_idx, descending: bool = False) -> np.ndarray:
    """Row-wise :func:`pessimistic_rank` for a (queries x gallery) matrix."""
    m = np.asarray(matrix)
    t = m[np.arange(len(m)), np.asarray(truth_idx)][:, None]
    return np.count_nonzero(m >= t if descending else m <= t, axis=1)


def distance_matrix(queries, gallery, metric: str = "euclidean", chunk: int = 256) -> np.ndarray:
    """Squared Euclidean (exact differences, not the expanded form) or cosine distance."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    Q, G = _rows(queries), _rows(gallery)
    if Q.shape[1] != G.shape[1]:
        raise ValueError(f"query dim {Q.shape[1]} != gallery dim {G.shape[1]}")
    if metric == "cosine":
        qn = np.linalg.norm(Q, axis=1, keepdims=True)
        gn = np.linalg.norm(G, axis=1, keepdims=True)
        Qu = np.divide(Q, qn, out=np.zeros_like(Q), where=qn > 0)
        Gu = np.divide(G, gn, out=np.zeros_like(G), where=gn > 0)
        return 1.0 - Qu @ Gu.T
    out = np.empty((len(Q), len(G)))
    for s in range(0, len(Q), chunk):
        diff = Q[s:s + chunk, None, :] - G[None, :, :]
        out[s:s + chunk] = np.einsum("qgd,qgd->qg", diff, diff)
    return out


def _truth_check(truth_idx, n: int):
    t = np.asarray(truth_idx)
    if t.size and (t.min() < 0 or t.max() >= n):
        raise ValueError("ground-truth match is not in the gallery")
    return t


def rank_gallery_mapped(mapper, query, gallery, truth_index: int, metric: str = "euclidean",
                        query_id: str = "") -> RankingResult:
    G = _rows(gallery)
    _truth_check([truth_index], len(G))
    q = mapper.map(_rows(query))
    d = distance_matrix(q, G, metric)[0]
    return RankingResult(query_id, pessimistic_rank(d, truth_index), len(G))


def rank_gallery_scored(scorer, query, gallery, truth_index: int, query_id: str = "") -> RankingResult:
    """Rank by descending match score.

    Ordering uses the pre-sigmoid logit: same order as the probability, but
    without ties manufactured by sigmoid saturation in float64.
    """
    G = _rows(gallery)
    _truth_check([truth_index], len(G))
    logits = scorer.logit_matrix(_rows(query), G)[0]
    return RankingResult(query_id, pessimistic_rank(logits, truth_index, descending=True), len(G))


def rank_all_mapped(mapper, queries, gallery, truth_idx, metric: str = "euclidean",
                    query_ids: Sequence[str] | None = None) -> list[RankingResult]:
    G = _rows(gallery)
    t = _truth_check(truth_idx, len(G))
    d = distance_matrix(mapper.map(_rows(queries)), G, metric)
    ranks = pessimistic_ranks(d, t)
    ids = query_ids if query_ids is not None else [str(i) for i in range(len(ranks))]
    return [RankingResult(q, int(r), len(G)) for q, r in zip(ids, ranks)]


def rank_all_scored(scorer, queries, gallery, truth_idx,
                    query_ids: Sequence[str] | None = None) -> list[RankingResult]:
    G = _rows(gallery)
    t = _truth_check(truth_idx, len(G))
    ranks = pessimistic_ranks(scorer.logit_matrix(_rows(queries), G), t, descending=True)
    ids = query_ids if query_ids is not None else [str(i) for i in range(len(ranks))]
    return [RankingResult(q, int(r), len(G)) for q, r in zip(ids, ranks)]


def cmc(results: Sequence[RankingResult]) -> CmcCurve:
    if not results:
        raise ValueError("cmc needs at least one ranking result")
    sizes = {r.gallery_size for r in results}
    if len(sizes) != 1:
        raise ValueError(f"ranking results mix gallery sizes {sorted(sizes)}")
    n = sizes.pop()
    counts = np.bincount([r.rank for r in results], minlength=n + 1)[1:]
    return CmcCurve(np.cumsum(counts) / len(results))


def auc(curve: CmcCurve) -> float:
    """100 * mean CMC(k) over k = 1..N."""
    return 100.0 * float(np.sum(curve.values)) / curve.gallery_size


def random_auc(n: int) -> float:
    """Expected AUC of uniformly random ranking over a gallery of ``n``."""
    return 100.0 * (n + 1) / (2.0 * n)


def write_cmc_csv(path, curve: CmcCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "cmc_k"])
        for k, v in enumerate(curve.values, start=1):
            w.writerow([k, repr(float(v))])
