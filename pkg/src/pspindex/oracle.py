"""Exact brute-force top-k ground truth and recall."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptyTruth, KTooLarge
from .vecstore import VectorStore, read_ivecs, write_ivecs


@dataclass
class GroundTruth:
    k: int
    metric: str
    ids: np.ndarray      # (count, k) int64
    scores: np.ndarray   # (count, k) float64; L2 distances for "l2", similarities otherwise

    def save(self, path):
        write_ivecs(path, self.ids.astype(np.int32))

    @classmethod
    def load(cls, path, metric: str = "ip") -> "GroundTruth":
        ids = read_ivecs(path).astype(np.int64)
        return cls(ids.shape[1], metric, ids, np.full(ids.shape, np.nan))


def metric_scores(store: VectorStore, queries: np.ndarray, metric: str) -> np.ndarray:
    """(nq, n) larger-is-better scores, float64."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != store.dim:
        raise DimMismatch(f"query dim {q.shape[1]} != store dim {store.dim}")
    ip = q @ store.data.astype(np.float64).T
    if metric == "ip":
        return ip
    if metric == "l2":
        qq = np.einsum("ij,ij->i", q, q)[:, None]
        sq = np.maximum(store.norms[None, :] ** 2 - 2.0 * ip + qq, 0.0)
        return -np.sqrt(sq)
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1)[:, None]
        denom = store.norms[None, :] * qn
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(denom > 0, ip / denom, 0.0)
    raise ValueError(f"unknown metric {metric!r}")


def _topk_row(scores: np.ndarray, k: int) -> np.ndarray:
    n = scores.shape[0]
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        # pull in every tie at the boundary so smaller ids win deterministically
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


def brute_topk_batch(store: VectorStore, queries, k: int, metric: str = "ip",
                     block: int = 256) -> GroundTruth:
    if k > store.count:
        raise KTooLarge(f"k={k} exceeds n={store.count}")
    if k < 1:
        raise KTooLarge(f"k must be positive, got {k}")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    ids = np.empty((q.shape[0], k), dtype=np.int64)
    scores = np.empty((q.shape[0], k), dtype=np.float64)
    for s in range(0, q.shape[0], block):
        sc = metric_scores(store, q[s:s + block], metric)
        for j in range(sc.shape[0]):
            top = _topk_row(sc[j], k)
            ids[s + j] = top
            scores[s + j] = sc[j, top]
    if metric == "l2":
        scores = -scores
    return GroundTruth(k, metric, ids, scores)


def brute_topk(store: VectorStore, query, k: int, metric: str = "ip") -> GroundTruth:
    """Exact top-k for one query; ties broken by smaller id."""
    query = np.asarray(query, dtype=np.float32)
    if query.ndim != 1:
        raise DimMismatch("brute_topk expects a single query vector")
    return brute_topk_batch(store, query[None, :], k, metric)


def recall_at_k(returned, truth) -> float:
    truth = set(int(t) for t in np.asarray(truth).ravel())
    if not truth:
        raise EmptyTruth("ground-truth set is empty")
    got = set(int(r) for r in np.asarray(returned).ravel())
    return len(got & truth) / len(truth)


def mean_recall(result_ids: np.ndarray, truth_ids: np.ndarray) -> float:
    k = truth_ids.shape[1]
    return float(np.mean([recall_at_k(r[:k], t) for r, t in zip(result_ids, truth_ids)]))
