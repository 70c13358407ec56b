"""Best-first graph search under inner product (or L2 / cosine).

The hot loop lives in a numba kernel operating on a sorted fixed-capacity
pool. ``reference_search`` is an independent heap-based implementation used
to cross-check results and distance-computation counts.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DimMismatch, InvalidParam
from .graph import NavIvf, ProximityGraph, PspIndex
from .vecstore import CountedKernels, VectorStore

METRIC_CODES = {"ip": 0, "l2": 1, "cosine": 2}


@dataclass
class SearchParams:
    l_s: int = 100
    k: int = 100
    metric: str = "ip"
    entry_mode: str = "sn"
    aet: bool = False

    def validate(self):
        if self.k < 1:
            raise InvalidParam("k must be >= 1")
        if self.l_s < self.k:
            raise InvalidParam(f"l_s={self.l_s} must be >= k={self.k}")
        if self.metric not in METRIC_CODES:
            raise InvalidParam(f"unknown metric {self.metric!r}")
        if self.entry_mode not in ("sn", "random"):
            raise InvalidParam(f"unknown entry_mode {self.entry_mode!r}")
        if self.aet and self.metric != "ip":
            raise InvalidParam("early termination is defined for the ip metric only")
        return self


@dataclass
class SearchTrace:
    result_ids: np.ndarray
    result_scores: np.ndarray
    visited: np.ndarray
    dc: int
    hops: int
    wall_ns: int
    stopped_early: bool = False
    features: np.ndarray | None = None   # (hops, 4) feature state at each stop decision
    topk_hits: np.ndarray | None = None  # (hops,) true top-k members in the pool top-k at each decision
    final_hits: int = -1


# ---------------------------------------------------------------------------
# numba kernel
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _score(data, i, q, qn, norms, metric):
    s = 0.0
    if metric == 1:
        for t in range(q.shape[0]):
            v = np.float64(data[i, t]) - q[t]
            s += v * v
        return -s
    for t in range(q.shape[0]):
        s += np.float64(data[i, t]) * q[t]
    if metric == 2:
        den = norms[i] * qn
        return s / den if den > 0.0 else 0.0
    return s


@numba.njit(cache=True)
def _insert(pid, psc, pexp, size, node, score):
    """Insert into the descending pool; returns (position or -1, new size)."""
    cap = pid.shape[0]
    if size == cap:
        last = size - 1
        if score < psc[last] or (score == psc[last] and node > pid[last]):
            return -1, size
    lo, hi = 0, size
    while lo < hi:
        mid = (lo + hi) // 2
        if psc[mid] > score or (psc[mid] == score and pid[mid] < node):
            lo = mid + 1
        else:
            hi = mid
    end = size if size < cap else cap - 1
    for t in range(end, lo, -1):
        pid[t] = pid[t - 1]
        psc[t] = psc[t - 1]
        pexp[t] = pexp[t - 1]
    pid[lo] = node
    psc[lo] = score
    pexp[lo] = 0
    if size < cap:
        size += 1
    return lo, size


@numba.njit(cache=True)
def _tree_stop(f, t_feat, t_thr, t_left, t_right, t_stop):
    node = 0
    while t_feat[node] >= 0:
        if f[t_feat[node]] < t_thr[node]:
            node = t_left[node]
        else:
            node = t_right[node]
    return t_stop[node] != 0


@numba.njit(cache=True)
def _search_kernel(data, norms, offsets, nbrs, q, metric, entries, ls, k, seen, epoch,
                   use_aet, t_feat, t_thr, t_left, t_right, t_stop, beta, record, truth):
    qn = 0.0
    for t in range(q.shape[0]):
        qn += q[t] * q[t]
    qn = np.sqrt(qn)
    pid = np.empty(ls, dtype=np.int64)
    psc = np.empty(ls, dtype=np.float64)
    pexp = np.zeros(ls, dtype=np.uint8)
    size = 0
    dc = 0
    for e in entries:
        if seen[e] == epoch:
            continue
        seen[e] = epoch
        dc += 1
        pos, size = _insert(pid, psc, pexp, size, e, _score(data, e, q, qn, norms, metric))
    cap_log = 64
    visited = np.empty(cap_log, dtype=np.int64)
    feats = np.empty((cap_log if record else 1, 4), dtype=np.float64)
    hits = np.empty(cap_log if record else 1, dtype=np.int64)
    pops = 0
    cur = 0
    changed = True
    stopped = False
    f = np.zeros(4, dtype=np.float64)
    min_norm = 0.0
    max_ip = 0.0
    kk = min(k, ls)
    while True:
        while cur < size and pexp[cur]:
            cur += 1
        if cur >= size:
            break
        p = pid[cur]
        pexp[cur] = 1
        if pops == visited.shape[0]:
            grown = np.empty(pops * 2, dtype=np.int64)
            grown[:pops] = visited
            visited = grown
            if record:
                g2 = np.empty((pops * 2, 4), dtype=np.float64)
                g2[:pops] = feats
                feats = g2
                h2 = np.empty(pops * 2, dtype=np.int64)
                h2[:pops] = hits
                hits = h2
        visited[pops] = p
        if use_aet or record:
            ip = psc[cur]
            nm = norms[p]
            obs4 = 1.0 if changed else 0.0
            if pops == 0:
                min_norm = nm
                max_ip = ip
                f[0] = ip
                f[1] = nm / min_norm if min_norm > 0.0 else 1.0
                f[2] = ip / max_ip if max_ip != 0.0 else 1.0
                f[3] = obs4
            else:
                if nm < min_norm:
                    min_norm = nm
                if ip > max_ip:
                    max_ip = ip
                f[0] = beta * f[0] + (1.0 - beta) * ip
                f[1] = beta * f[1] + (1.0 - beta) * (nm / min_norm if min_norm > 0.0 else 1.0)
                f[2] = beta * f[2] + (1.0 - beta) * (ip / max_ip if max_ip != 0.0 else 1.0)
                f[3] = beta * f[3] + (1.0 - beta) * obs4
            if record:
                feats[pops, :] = f
                h = 0
                for t in range(min(kk, size)):
                    if truth[pid[t]]:
                        h += 1
                hits[pops] = h
        pops += 1
        if use_aet and _tree_stop(f, t_feat, t_thr, t_left, t_right, t_stop):
            stopped = True
            break
        changed = False
        for e in range(offsets[p], offsets[p + 1]):
            v = nbrs[e]
            if seen[v] == epoch:
                continue
            seen[v] = epoch
            dc += 1
            pos, size = _insert(pid, psc, pexp, size, v, _score(data, v, q, qn, norms, metric))
            if pos >= 0:
                if pos < kk:
                    changed = True
                if pos < cur:
                    cur = pos
    final_hits = -1
    if record:
        final_hits = 0
        for t in range(min(kk, size)):
            if truth[pid[t]]:
                final_hits += 1
    nres = min(k, size)
    return (pid[:nres].copy(), psc[:nres].copy(), dc, pops, visited[:pops].copy(),
            feats[:pops].copy(), hits[:pops].copy(), final_hits, stopped)


_EMPTY_I = np.empty(0, dtype=np.int32)
_NO_TREE = (np.full(1, -1, dtype=np.int32), np.zeros(1), np.zeros(1, dtype=np.int32),
            np.zeros(1, dtype=np.int32), np.zeros(1, dtype=np.uint8))


# ---------------------------------------------------------------------------
# entry selection
# ---------------------------------------------------------------------------

def cluster_order(nav: NavIvf, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    sims = nav.centroids.astype(np.float64) @ q
    return np.lexsort((np.arange(nav.c), -sims))


def select_entries(nav: NavIvf, query, l_s: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the best-cosine cluster's list, topped up from the next clusters."""
    out = []
    need = l_s
    for c in cluster_order(nav, query):
        lst = nav.lists[c]
        if need <= 0:
            break
        if len(lst) == 0:
            continue
        if len(lst) <= need:
            out.append(np.asarray(lst, dtype=np.int64))
            need -= len(lst)
        else:
            out.append(rng.choice(np.asarray(lst, dtype=np.int64), size=need, replace=False))
            need = 0
    if not out:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(out)


def random_entries(n: int, l_s: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=min(l_s, n), replace=False).astype(np.int64)


def query_rng(seed: int, query_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, query_id])


# ---------------------------------------------------------------------------
# session
# ---------------------------------------------------------------------------

class Searcher:
    """Per-session search state: visited epochs and counters. Not thread-safe; make one per worker."""

    def __init__(self, index: PspIndex, seed: int = 0):
        self.index = index
        self.seed = seed
        self._seen = np.zeros(index.n, dtype=np.int64)
        self._epoch = 0
        self._tree = _NO_TREE
        self._beta = 0.9
        self._tree_src = None
        self._tree_key = None

    def _tree_arrays(self):
        model = self.index.aet
        if model is None:
            raise InvalidParam("index has no early-termination model")
        if self._tree_src is not model or self._tree_key != model.theta:
            self._tree = model.compiled()
            self._beta = model.beta
            self._tree_src = model
            self._tree_key = model.theta
        return self._tree

    def entries(self, query, params: SearchParams, query_id: int) -> np.ndarray:
        rng = query_rng(self.seed, query_id)
        if params.entry_mode == "sn":
            ent = select_entries(self.index.nav, query, params.l_s, rng)
            if ent.size == 0:
                ent = random_entries(self.index.n, params.l_s, rng)
            return ent
        return random_entries(self.index.n, params.l_s, rng)

    def search(self, query, params: SearchParams, query_id: int = 0, entries=None,
               truth_ids=None, scale: float = 1.0) -> SearchTrace:
        params.validate()
        store = self.index.store
        q = np.asarray(query, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != store.dim:
            raise DimMismatch(f"query dim {q.shape[-1]} != store dim {store.dim}")
        t0 = time.perf_counter_ns()
        if entries is None:
            entries = self.entries(q, params, query_id)
        entries = np.asarray(entries, dtype=np.int64)
        tree = self._tree_arrays() if params.aet else _NO_TREE
        record = truth_ids is not None
        if record:
            truth = np.zeros(self.index.n, dtype=np.bool_)
            truth[np.asarray(truth_ids, dtype=np.int64)] = True
        else:
            truth = np.zeros(1, dtype=np.bool_)
        self._epoch += 1
        g = self.index.graph
        ids, sc, dc, pops, visited, feats, hits, final_hits, stopped = _search_kernel(
            store.data, store.norms, g.offsets, g.nbrs, q * scale, METRIC_CODES[params.metric],
            entries, params.l_s, params.k, self._seen, self._epoch,
            params.aet, *tree, self._beta, record, truth)
        wall = time.perf_counter_ns() - t0
        if params.metric == "l2":
            sc = np.sqrt(-sc)
        return SearchTrace(ids, sc, visited, int(dc), int(pops), int(wall), bool(stopped),
                           feats if record else None, hits if record else None, int(final_hits))


def greedy_search(index: PspIndex, query, params: SearchParams, query_id: int = 0,
                  seed: int = 0, searcher: Searcher | None = None) -> SearchTrace:
    searcher = searcher or Searcher(index, seed)
    return searcher.search(query, params, query_id)


def search_batch(index: PspIndex, queries, params: SearchParams, seed: int = 0):
    s = Searcher(index, seed)
    return [s.search(q, params, i) for i, q in enumerate(np.asarray(queries))]


def raw_graph_search(store: VectorStore, graph: ProximityGraph, query, entries, l_s: int,
                     k: int, metric: str = "ip"):
    """Kernel call without an index wrapper (used during construction)."""
    seen = np.zeros(store.count, dtype=np.int64)
    out = _search_kernel(store.data, store.norms, graph.offsets, graph.nbrs,
                         np.asarray(query, dtype=np.float64), METRIC_CODES[metric],
                         np.asarray(entries, dtype=np.int64), l_s, k, seen, 1,
                         False, *_NO_TREE, 0.9, False, np.zeros(1, dtype=np.bool_))
    return out[0], out[1], out[2]


# ---------------------------------------------------------------------------
# reference implementation (heap pair, instrumented kernels)
# ---------------------------------------------------------------------------

def reference_search(store: VectorStore, graph: ProximityGraph, query, entries, l_s: int, k: int,
                     metric: str = "ip", model=None, beta: float = 0.9):
    """Heap-based best-first search mirroring the published listing.

    Returns (ids, scores, dc, hops, visited, feature states).
    """
    from .aet import FeatureState, evaluate, update_features

    kern = CountedKernels(store)
    q = np.asarray(query, dtype=np.float64)
    seen = set()
    cand = []   # max-heap via (-score, id)
    pool = []   # min-heap of the best l_s: (score, -id)
    for e in entries:
        e = int(e)
        if e in seen:
            continue
        seen.add(e)
        s = _ref_score(kern, e, q, metric)
        heapq.heappush(cand, (-s, e))
        _pool_push(pool, l_s, s, e)
    visited, states = [], []
    state = FeatureState(beta=beta)
    changed = True
    stopped = False
    while cand:
        negs, p = heapq.heappop(cand)
        s = -negs
        if len(pool) == l_s and (s, -p) < pool[0]:
            break
        visited.append(p)
        if model is not None:
            state = update_features(state, s, float(store.norms[p]), changed)
            states.append(state)
            if evaluate(model, state):
                stopped = True
                break
        before = _topk_set(pool, k)
        for v in graph.neighbors(p):
            v = int(v)
            if v in seen:
                continue
            seen.add(v)
            sv = _ref_score(kern, v, q, metric)
            if _pool_push(pool, l_s, sv, v):
                heapq.heappush(cand, (-sv, v))
        changed = _topk_set(pool, k) != before
    best = sorted(pool, reverse=True)[:k]
    ids = np.array([-b[1] for b in best], dtype=np.int64)
    scores = np.array([b[0] for b in best])
    return ids, scores, kern.dc, len(visited), visited, states, stopped


def _ref_score(kern: CountedKernels, i, q, metric):
    if metric == "l2":
        return -kern.l2(i, q) ** 2
    if metric == "cosine":
        return kern.cosine(i, q)
    return kern.ip(i, q)


def _pool_push(pool, cap, s, i):
    item = (s, -i)
    if len(pool) < cap:
        heapq.heappush(pool, item)
        return True
    if item > pool[0]:
        heapq.heapreplace(pool, item)
        return True
    return False


def _topk_set(pool, k):
    return frozenset(b[1] for b in heapq.nlargest(k, pool))
