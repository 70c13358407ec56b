"""Euclidean K-nearest-neighbor graph bootstrap (exact scan or NN-descent)."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidParam, KTooLarge, MalformedRecord
from .vecstore import VectorStore, atomic_write

log = logging.getLogger(__name__)

EXACT_LIMIT = 100_000
_MAGIC = b"KNN1"


@dataclass
class KnnGraph:
    ids: np.ndarray    # (n, K) int32, ascending by distance
    dists: np.ndarray  # (n, K) float32 L2 distances

    @property
    def K(self) -> int:
        return self.ids.shape[1]

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    def save(self, path):
        head = _MAGIC + struct.pack("<qq", self.n, self.K)
        atomic_write(path, head + self.ids.astype("<i4").tobytes() + self.dists.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "KnnGraph":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != _MAGIC:
            raise MalformedRecord(f"{path}: not a KNN1 cache")
        n, K = struct.unpack_from("<qq", raw, 4)
        body = 20 + n * K * 8
        if len(raw) != body:
            raise MalformedRecord(f"{path}: expected {body} bytes, found {len(raw)}")
        ids = np.frombuffer(raw, dtype="<i4", count=n * K, offset=20).reshape(n, K)
        dists = np.frombuffer(raw, dtype="<f4", count=n * K, offset=20 + n * K * 4).reshape(n, K)
        return cls(ids.astype(np.int32), dists.astype(np.float32))


def _check_k(store: VectorStore, K: int):
    if K < 1 or K >= store.count:
        raise KTooLarge(f"K={K} must satisfy 1 <= K < n={store.count}")


@numba.njit(cache=True)
def _sqd(data, i, j):
    s = 0.0
    for t in range(data.shape[1]):
        v = np.float64(data[i, t]) - np.float64(data[j, t])
        s += v * v
    return s


@numba.njit(cache=True)
def _select_block(gram, rows, data, sq, K, eps):
    """Exact K-NN for a block of rows from a float32 Gram block.

    Candidates within the float32 error margin of the K-th value are
    re-scored in float64, so the result is exact.
    """
    n = gram.shape[1]
    B = rows.shape[0]
    out_ids = np.empty((B, K), dtype=np.int32)
    out_d = np.empty((B, K), dtype=np.float64)
    heap = np.empty(K, dtype=np.float64)
    for b in range(B):
        i = rows[b]
        heap[:] = np.inf
        for j in range(n):
            if j == i:
                continue
            v = sq[i] + sq[j] - 2.0 * gram[b, j]
            if v < heap[0]:
                # sift down replacing the max
                pos = 0
                while True:
                    left = 2 * pos + 1
                    if left >= K:
                        break
                    child = left
                    if left + 1 < K and heap[left + 1] > heap[left]:
                        child = left + 1
                    if heap[child] > v:
                        heap[pos] = heap[child]
                        pos = child
                    else:
                        break
                heap[pos] = v
        bound = heap[0] + eps[b]
        cnt = 0
        for j in range(n):
            if j != i and sq[i] + sq[j] - 2.0 * gram[b, j] <= bound:
                cnt += 1
        cand = np.empty(cnt, dtype=np.int64)
        cd = np.empty(cnt, dtype=np.float64)
        c = 0
        for j in range(n):
            if j != i and sq[i] + sq[j] - 2.0 * gram[b, j] <= bound:
                cand[c] = j
                cd[c] = _sqd(data, i, j)
                c += 1
        # stable sort by distance keeps ascending id among ties
        order = np.argsort(cd, kind="mergesort")
        for t in range(K):
            out_ids[b, t] = cand[order[t]]
            out_d[b, t] = cd[order[t]]
    return out_ids, out_d


def exact_rows(store: VectorStore, rows: np.ndarray, K: int, block: int = 512):
    """Exact K-NN (self excluded) for the given row ids."""
    rows = np.asarray(rows, dtype=np.int64)
    x = store.data
    sq = store.norms ** 2
    maxn = float(store.norms.max())
    ids = np.empty((rows.size, K), dtype=np.int32)
    dists = np.empty((rows.size, K), dtype=np.float32)
    for s in range(0, rows.size, block):
        r = rows[s:s + block]
        gram = x[r] @ x.T
        # float32 dot error bound, doubled for the -2<x,y> term, with slack
        eps = 8.0 * (store.dim + 2) * 2.0 ** -24 * store.norms[r] * maxn + 1e-12
        bi, bd = _select_block(gram, r, x, sq, K, eps)
        ids[s:s + r.size] = bi
        dists[s:s + r.size] = np.sqrt(bd)
    return ids, dists


def build_exact_knn(store: VectorStore, K: int) -> KnnGraph:
    _check_k(store, K)
    ids, dists = exact_rows(store, np.arange(store.count), K)
    return KnnGraph(ids, dists)


# ---------------------------------------------------------------------------
# NN-descent
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _heap_push(ids, dists, flags, row, j, d, flag):
    """Bounded max-heap on dists[row]; returns 1 if j was inserted."""
    K = ids.shape[1]
    if d >= dists[row, 0]:
        return 0
    for t in range(K):
        if ids[row, t] == j:
            return 0
    # replace root and sift down
    pos = 0
    while True:
        left = 2 * pos + 1
        right = left + 1
        if left >= K:
            break
        if right >= K or dists[row, left] >= dists[row, right]:
            child = left
        else:
            child = right
        if dists[row, child] > d:
            ids[row, pos] = ids[row, child]
            dists[row, pos] = dists[row, child]
            flags[row, pos] = flags[row, child]
            pos = child
        else:
            break
    ids[row, pos] = j
    dists[row, pos] = d
    flags[row, pos] = flag
    return 1


@numba.njit(cache=True)
def _cand_push(cids, cpri, row, j, p):
    """Bounded max-heap on random priority; keeps the lowest priorities."""
    C = cids.shape[1]
    if p >= cpri[row, 0]:
        return
    for t in range(C):
        if cids[row, t] == j:
            return
    pos = 0
    while True:
        left = 2 * pos + 1
        right = left + 1
        if left >= C:
            break
        if right >= C or cpri[row, left] >= cpri[row, right]:
            child = left
        else:
            child = right
        if cpri[row, child] > p:
            cids[row, pos] = cids[row, child]
            cpri[row, pos] = cpri[row, child]
            pos = child
        else:
            break
    cids[row, pos] = j
    cpri[row, pos] = p


@numba.njit(cache=True)
def _nndescent(data, K, iters, max_cand, delta, seed):
    n = data.shape[0]
    np.random.seed(seed)
    ids = np.full((n, K), -1, dtype=np.int32)
    dists = np.full((n, K), np.inf, dtype=np.float64)
    flags = np.zeros((n, K), dtype=np.uint8)
    for i in range(n):
        got = 0
        while got < K:
            j = np.random.randint(n)
            if j == i:
                continue
            got += _heap_push(ids, dists, flags, i, j, _sqd(data, i, j), 1)
    new_c = np.empty((n, max_cand), dtype=np.int32)
    new_p = np.empty((n, max_cand), dtype=np.float64)
    old_c = np.empty((n, max_cand), dtype=np.int32)
    old_p = np.empty((n, max_cand), dtype=np.float64)
    done = 0
    for it in range(iters):
        new_c[:] = -1
        new_p[:] = np.inf
        old_c[:] = -1
        old_p[:] = np.inf
        for i in range(n):
            for t in range(K):
                j = ids[i, t]
                if j < 0:
                    continue
                p = np.random.random()
                if flags[i, t]:
                    _cand_push(new_c, new_p, i, j, p)
                    _cand_push(new_c, new_p, j, i, p)
                else:
                    _cand_push(old_c, old_p, i, j, p)
                    _cand_push(old_c, old_p, j, i, p)
        # sampled new neighbors become old
        for i in range(n):
            for t in range(K):
                j = ids[i, t]
                for c in range(max_cand):
                    if new_c[i, c] == j:
                        flags[i, t] = 0
                        break
        updates = 0
        for i in range(n):
            for a in range(max_cand):
                u = new_c[i, a]
                if u < 0:
                    continue
                for b in range(a + 1, max_cand):
                    v = new_c[i, b]
                    if v < 0:
                        continue
                    d = _sqd(data, u, v)
                    updates += _heap_push(ids, dists, flags, u, v, d, 1)
                    updates += _heap_push(ids, dists, flags, v, u, d, 1)
                for b in range(max_cand):
                    v = old_c[i, b]
                    if v < 0 or v == u:
                        continue
                    d = _sqd(data, u, v)
                    updates += _heap_push(ids, dists, flags, u, v, d, 1)
                    updates += _heap_push(ids, dists, flags, v, u, d, 1)
        done = it + 1
        if updates <= delta * n * K:
            break
    return ids, dists, done


def _sort_rows(ids, d2):
    out_ids = np.empty_like(ids)
    out_d = np.empty(ids.shape, dtype=np.float32)
    for i in range(ids.shape[0]):
        order = np.lexsort((ids[i], d2[i]))
        out_ids[i] = ids[i, order]
        out_d[i] = np.sqrt(d2[i, order])
    return out_ids, out_d


def build_nndescent_knn(store: VectorStore, K: int, iters: int = 12, sample_rate: float = 0.3,
                        seed: int = 0, delta: float = 0.001) -> KnnGraph:
    """Approximate K-NN graph by local joins over sampled new/old candidate lists."""
    _check_k(store, K)
    if iters < 1:
        raise InvalidParam(f"iters must be >= 1, got {iters}")
    if not 0.0 < sample_rate <= 1.0:
        raise InvalidParam(f"sample_rate must lie in (0, 1], got {sample_rate}")
    max_cand = max(2, int(round(sample_rate * K)))
    ids, d2, done = _nndescent(store.data, K, iters, max_cand, delta, seed)
    log.info("nn-descent finished after %d iterations", done)
    ids, dists = _sort_rows(ids, d2)
    return KnnGraph(ids, dists)


def build_knn(store: VectorStore, K: int, seed: int = 0, iters: int = 12,
              sample_rate: float = 0.3) -> KnnGraph:
    if store.count <= EXACT_LIMIT:
        return build_exact_knn(store, K)
    return build_nndescent_knn(store, K, iters=iters, sample_rate=sample_rate, seed=seed)


def knn_accuracy(store: VectorStore, graph: KnnGraph, sample: int = 500, seed: int = 0) -> float:
    """Acc@K: mean overlap of sampled rows with the exact K-NN."""
    rng = np.random.default_rng(seed)
    rows = rng.choice(store.count, size=min(sample, store.count), replace=False)
    exact, _ = exact_rows(store, np.sort(rows), graph.K)
    rows = np.sort(rows)
    hits = [len(set(graph.ids[r]) & set(e)) for r, e in zip(rows, exact)]
    return float(np.sum(hits)) / (rows.size * graph.K)
