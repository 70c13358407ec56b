"""PSP index construction.

Stages: kNN bootstrap -> angle-pruned proximity graph -> edge refinement
toward large inner-product 2-hop neighbors -> spherical navigation IVF ->
connectivity repair from the navigation nodes.
"""

from __future__ import annotations

import logging
import math
import time

import numba
import numpy as np
from scipy.special import ndtr

from .errors import InvalidParam
from .graph import UNBOUNDED, BuildParams, NavIvf, ProximityGraph, PspIndex
from .knn_graph import KnnGraph, build_knn
from .search import raw_graph_search
from .vecstore import VectorStore

log = logging.getLogger(__name__)

ANGLE_TOL = 1e-6
KMEANS_ITERS = 25
KMEANS_SAMPLE = 200_000
EMPTY_RETRIES = 5


# ---------------------------------------------------------------------------
# angle-pruned neighbor selection
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _sqd(data, i, j):
    s = 0.0
    for t in range(data.shape[1]):
        v = np.float64(data[i, t]) - np.float64(data[j, t])
        s += v * v
    return s


@numba.njit(cache=True)
def _lex_order(ids, keys, c):
    """Indices sorting (keys asc, ids asc) over the first c entries."""
    by_id = np.argsort(ids[:c], kind="mergesort")
    by_key = np.argsort(keys[:c][by_id], kind="mergesort")
    return by_id[by_key]


@numba.njit(cache=True)
def _select(data, p, cand, cdist, c, L, R, cos_a, sel_vec, sel_ids):
    """Greedy ascending-distance selection keeping pairwise angles >= alpha."""
    d = data.shape[1]
    order = _lex_order(cand, cdist, c)
    cnt = 0
    lim = min(L, c)
    for idx in range(lim):
        j = cand[order[idx]]
        dist = cdist[order[idx]]
        if dist <= 0.0:
            continue
        inv = 1.0 / np.sqrt(dist)
        ok = True
        for s in range(cnt):
            cs = 0.0
            for t in range(d):
                cs += (np.float64(data[j, t]) - np.float64(data[p, t])) * inv * sel_vec[s, t]
            if cs > cos_a:
                ok = False
                break
        if ok:
            for t in range(d):
                sel_vec[cnt, t] = (np.float64(data[j, t]) - np.float64(data[p, t])) * inv
            sel_ids[cnt] = j
            cnt += 1
            if cnt >= R:
                break
    return cnt


@numba.njit(cache=True)
def _forward(data, knn_ids, use_all, L, R, cos_a):
    n, d = data.shape
    K = knn_ids.shape[1]
    maxc = n - 1 if use_all else K + K * K
    maxc = max(maxc, 1)
    cand = np.empty(maxc, dtype=np.int64)
    cdist = np.empty(maxc, dtype=np.float64)
    selcap = min(R, maxc)
    sel_vec = np.empty((selcap, d), dtype=np.float64)
    sel_ids = np.empty(selcap, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    flat = np.empty(max(1, n * min(selcap, 32)), dtype=np.int32)
    for p in range(n):
        c = 0
        if use_all:
            for j in range(n):
                if j != p:
                    cand[c] = j
                    c += 1
        else:
            mark[p] = p
            for a in range(K):
                j = knn_ids[p, a]
                if mark[j] != p:
                    mark[j] = p
                    cand[c] = j
                    c += 1
            for a in range(K):
                j = knn_ids[p, a]
                for b in range(K):
                    u = knn_ids[j, b]
                    if mark[u] != p:
                        mark[u] = p
                        cand[c] = u
                        c += 1
        for t in range(c):
            cdist[t] = _sqd(data, p, cand[t])
        cnt = _select(data, p, cand, cdist, c, L, R, cos_a, sel_vec, sel_ids)
        base = offsets[p]
        if base + cnt > flat.shape[0]:
            grown = np.empty(max(flat.shape[0] * 2, base + cnt), dtype=np.int32)
            grown[:base] = flat[:base]
            flat = grown
        for t in range(cnt):
            flat[base + t] = sel_ids[t]
        offsets[p + 1] = base + cnt
    return offsets, flat[:offsets[n]].copy()


@numba.njit(cache=True)
def _reprune(data, off, nbrs, roff, rnbrs, R, cos_a):
    """Re-select each node's neighbors from its forward and reverse edges."""
    n, d = data.shape
    mark = np.full(n, -1, dtype=np.int64)
    maxc = 1
    for p in range(n):
        m = (off[p + 1] - off[p]) + (roff[p + 1] - roff[p])
        if m > maxc:
            maxc = m
    cand = np.empty(maxc, dtype=np.int64)
    cdist = np.empty(maxc, dtype=np.float64)
    sel_vec = np.empty((R, d), dtype=np.float64)
    sel_ids = np.empty(R, dtype=np.int64)
    out_off = np.zeros(n + 1, dtype=np.int64)
    out = np.empty(n * R, dtype=np.int32)
    for p in range(n):
        c = 0
        mark[p] = p
        for e in range(off[p], off[p + 1]):
            j = nbrs[e]
            if mark[j] != p:
                mark[j] = p
                cand[c] = j
                c += 1
        for e in range(roff[p], roff[p + 1]):
            j = rnbrs[e]
            if mark[j] != p:
                mark[j] = p
                cand[c] = j
                c += 1
        for t in range(c):
            cdist[t] = _sqd(data, p, cand[t])
        cnt = _select(data, p, cand, cdist, c, c, R, cos_a, sel_vec, sel_ids)
        base = out_off[p]
        for t in range(cnt):
            out[base + t] = sel_ids[t]
        out_off[p + 1] = base + cnt
    return out_off, out[:out_off[n]].copy()


def _reverse_csr(graph: ProximityGraph) -> ProximityGraph:
    src = np.repeat(np.arange(graph.n, dtype=np.int32), graph.degrees())
    order = np.lexsort((src, graph.nbrs))
    counts = np.bincount(graph.nbrs, minlength=graph.n)
    offsets = np.zeros(graph.n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return ProximityGraph(offsets, src[order])


def nssg_prune(knn: KnnGraph | None, store: VectorStore, params: BuildParams) -> ProximityGraph:
    """Angle-pruned sparse graph from kNN rows expanded by one hop.

    With ``knn=None`` every node is a candidate (exhaustive, quadratic).
    """
    n = store.count
    cos_a = math.cos(math.radians(params.alpha)) + ANGLE_TOL
    use_all = knn is None
    if use_all:
        knn_ids = np.zeros((n, 1), dtype=np.int32)
    else:
        knn_ids = np.ascontiguousarray(knn.ids, dtype=np.int32)
    R = min(params.R, max(n - 1, 1))
    L = min(params.L, max(n - 1, 1))
    off, nb = _forward(store.data, knn_ids, use_all, L, R, cos_a)
    graph = ProximityGraph(off, nb)
    if params.reverse_links and params.R < UNBOUNDED:
        rev = _reverse_csr(graph)
        off, nb = _reprune(store.data, graph.offsets, graph.nbrs, rev.offsets, rev.nbrs, R, cos_a)
        graph = ProximityGraph(off, nb)
    return graph


# ---------------------------------------------------------------------------
# edge refinement
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _refine_node(data, norms, off, nbrs, i, S, cos_a, origin_guard, mark, cand, cip, kept):
    c = 0
    mark[i] = i
    for e in range(off[i], off[i + 1]):
        x = nbrs[e]
        for f in range(off[x], off[x + 1]):
            u = nbrs[f]
            if mark[u] != i:
                mark[u] = i
                cand[c] = u
                c += 1
    if c == 0 or S <= 0:
        return 0
    d = data.shape[1]
    for t in range(c):
        s = 0.0
        for k in range(d):
            s += np.float64(data[i, k]) * np.float64(data[cand[t], k])
        cip[t] = -s
    order = _lex_order(cand, cip, c)
    kept[0] = cand[order[0]]
    nk = 1
    for idx in range(1, c):
        if nk >= S:
            break
        p = cand[order[idx]]
        ok = True
        if origin_guard:
            den = norms[i] * norms[p]
            cs = -cip[order[idx]] / den if den > 0.0 else 0.0
            ok = cs <= cos_a
        else:
            for r in range(nk):
                e = kept[r]
                den = norms[e] * norms[p]
                s = 0.0
                for k in range(d):
                    s += np.float64(data[e, k]) * np.float64(data[p, k])
                cs = s / den if den > 0.0 else 0.0
                if cs > cos_a:
                    ok = False
                    break
        if ok:
            kept[nk] = p
            nk += 1
    return nk


@numba.njit(cache=True)
def _refine_all(data, norms, off, nbrs, S, cos_a, origin_guard):
    n = data.shape[0]
    mark = np.full(n, -1, dtype=np.int64)
    maxc = 1
    for i in range(n):
        t = 0
        for e in range(off[i], off[i + 1]):
            x = nbrs[e]
            t += off[x + 1] - off[x]
        if t > maxc:
            maxc = t
    cand = np.empty(maxc, dtype=np.int64)
    cip = np.empty(maxc, dtype=np.float64)
    kept = np.empty(max(S, 1), dtype=np.int64)
    out_off = np.zeros(n + 1, dtype=np.int64)
    out = np.empty(off[n] + n * S, dtype=np.int32)
    for i in range(n):
        base = out_off[i]
        deg = off[i + 1] - off[i]
        for e in range(deg):
            out[base + e] = nbrs[off[i] + e]
        nk = _refine_node(data, norms, off, nbrs, i, S, cos_a, origin_guard, mark, cand, cip, kept)
        m = deg
        for r in range(nk):
            dup = False
            for e in range(deg):
                if nbrs[off[i] + e] == kept[r]:
                    dup = True
                    break
            if not dup:
                out[base + m] = kept[r]
                m += 1
        out_off[i + 1] = base + m
    return out_off, out[:out_off[n]].copy()


def edge_refine_all(graph: ProximityGraph, store: VectorStore, S: int, alpha: float,
                    guard: str = "pairwise") -> ProximityGraph:
    """Refine every node against a frozen snapshot of ``graph``."""
    if S <= 0:
        return graph
    cos_a = math.cos(math.radians(alpha)) + ANGLE_TOL
    off, nb = _refine_all(store.data, store.norms, graph.offsets, graph.nbrs, S, cos_a, guard == "origin")
    return ProximityGraph(off, nb)


def edge_refine(graph: ProximityGraph, store: VectorStore, node: int, S: int, alpha: float,
                guard: str = "pairwise") -> np.ndarray:
    """Refined adjacency for one node (existing edges kept, new ones appended)."""
    n = graph.n
    cos_a = math.cos(math.radians(alpha)) + ANGLE_TOL
    mark = np.full(n, -1, dtype=np.int64)
    maxc = max(1, sum(len(graph.neighbors(x)) for x in graph.neighbors(node)))
    cand = np.empty(maxc, dtype=np.int64)
    cip = np.empty(maxc, dtype=np.float64)
    kept = np.empty(max(S, 1), dtype=np.int64)
    nk = _refine_node(store.data, store.norms, graph.offsets, graph.nbrs, node, S, cos_a,
                      guard == "origin", mark, cand, cip, kept)
    row = graph.neighbors(node).tolist()
    for v in kept[:nk].tolist():
        if v not in row:
            row.append(v)
    return np.asarray(row, dtype=np.int32)


# ---------------------------------------------------------------------------
# spherical navigation
# ---------------------------------------------------------------------------

def _normalize(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    nr = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, nr, out=np.zeros_like(x), where=nr > 0)


def _kmeanspp(u: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = u.shape[0]
    centers = np.empty((c, u.shape[1]))
    centers[0] = u[rng.integers(n)]
    d2 = np.maximum(2.0 - 2.0 * (u @ centers[0]), 0.0)
    for j in range(1, c):
        tot = d2.sum()
        idx = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centers[j] = u[idx]
        d2 = np.minimum(d2, np.maximum(2.0 - 2.0 * (u @ centers[j]), 0.0))
    return centers


def _assign(u: np.ndarray, centers: np.ndarray, block: int = 65536):
    lab = np.empty(u.shape[0], dtype=np.int64)
    sim = np.empty(u.shape[0])
    for s in range(0, u.shape[0], block):
        m = u[s:s + block] @ centers.T
        lab[s:s + block] = np.argmax(m, axis=1)
        sim[s:s + block] = m[np.arange(m.shape[0]), lab[s:s + block]]
    return lab, sim


def spherical_kmeans(vectors: np.ndarray, c: int, seed: int = 0, iters: int = KMEANS_ITERS,
                     sample: int = KMEANS_SAMPLE):
    """k-means on unit-normalized copies; returns (unit centroids, labels over all rows)."""
    rng = np.random.default_rng(seed)
    u_all = _normalize(vectors)
    n = u_all.shape[0]
    u = u_all[np.sort(rng.choice(n, size=sample, replace=False))] if n > sample else u_all
    centers = _kmeanspp(u, c, rng)
    retries = 0
    lab = None
    for _ in range(iters):
        new_lab, sim = _assign(u, centers)
        counts = np.bincount(new_lab, minlength=c)
        empty = np.flatnonzero(counts == 0)
        if empty.size and retries < EMPTY_RETRIES:
            retries += 1
            # re-seed empty centroids with the worst-served points
            worst = np.argsort(sim, kind="stable")[:empty.size]
            centers[empty] = u[worst]
            lab = None
            continue
        if lab is not None and np.array_equal(new_lab, lab):
            break
        lab = new_lab
        sums = np.zeros_like(centers)
        np.add.at(sums, lab, u)
        nz = counts > 0
        centers[nz] = _normalize(sums[nz])
    labels, _ = _assign(u_all, centers)
    return _normalize(centers).astype(np.float32), labels


def sample_navigation(norms: np.ndarray, members: np.ndarray, quota: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Norm-weighted sample without replacement, weight = Gaussian upper-tail score."""
    if quota <= 0 or members.size == 0:
        return np.empty(0, dtype=np.int32)
    if members.size <= quota:
        return np.sort(members).astype(np.int32)
    nm = norms[members]
    mu, sd = nm.mean(), nm.std()
    if sd <= 1e-12 * max(1.0, abs(mu)):
        order = np.lexsort((members, -nm))
        return np.sort(members[order[:quota]]).astype(np.int32)
    w = ndtr((nm - mu) / sd)
    w = np.maximum(w, 1e-300)
    pick = rng.choice(members.size, size=quota, replace=False, p=w / w.sum())
    return np.sort(members[pick]).astype(np.int32)


def spherical_navigation(store: VectorStore, m: int, c: int, seed: int = 0) -> NavIvf:
    n = store.count
    if not 1 <= c <= min(m, n):
        raise InvalidParam(f"need 1 <= c <= min(m, n), got c={c}, m={m}, n={n}")
    centers, labels = spherical_kmeans(store.data, c, seed)
    rng = np.random.default_rng([seed, 1])
    quota = np.full(c, m // c, dtype=np.int64)
    cap = -(-m // c)
    members = [np.flatnonzero(labels == j) for j in range(c)]
    sizes = np.array([x.size for x in members])
    # quota of empty or undersized clusters moves to the largest ones, capped at ceil(m/c)
    spare = int(np.sum(np.maximum(quota - sizes, 0)))
    quota = np.minimum(quota, sizes)
    for j in np.lexsort((np.arange(c), -sizes)):
        if spare <= 0:
            break
        extra = min(spare, cap - quota[j], sizes[j] - quota[j])
        if extra > 0:
            quota[j] += extra
            spare -= extra
    lists = [sample_navigation(store.norms, members[j], int(quota[j]), rng) for j in range(c)]
    return NavIvf(centers, lists)


# ---------------------------------------------------------------------------
# connectivity repair
# ---------------------------------------------------------------------------

def connectivity_repair(graph: ProximityGraph, store: VectorStore, entry_ids, cap: int = UNBOUNDED,
                        l_s: int = 64) -> tuple[ProximityGraph, int]:
    """Give every unreachable node an in-edge from its nearest reachable node.

    Returns the repaired graph and the number of edges added.
    """
    entry_ids = np.asarray(entry_ids, dtype=np.int64)
    if entry_ids.size == 0:
        entry_ids = np.zeros(1, dtype=np.int64)
    seen = graph.reachable(entry_ids)
    if seen.all():
        return graph, 0
    n = graph.n
    deg = graph.degrees().astype(np.int64)
    extra: dict[int, list[int]] = {}
    added = 0
    search_ls = max(l_s, 1)
    for u in np.flatnonzero(~seen):
        if seen[u]:
            continue
        ids, _, _ = raw_graph_search(store, graph, store.data[u], entry_ids, search_ls, search_ls, "l2")
        src = -1
        for v in ids:
            if v != u and seen[v] and deg[v] < cap:
                src = int(v)
                break
        if src < 0:
            reach = np.flatnonzero(seen & (deg < cap))
            reach = reach[reach != u]
            if reach.size == 0:
                continue
            d2 = ((store.data[reach].astype(np.float64) - store.data[u]) ** 2).sum(1)
            src = int(reach[np.lexsort((reach, d2))[0]])
        extra.setdefault(src, []).append(int(u))
        deg[src] += 1
        added += 1
        # mark everything newly reachable through u
        stack = [int(u)]
        seen[u] = True
        while stack:
            x = stack.pop()
            for y in list(graph.neighbors(x)) + extra.get(x, []):
                if not seen[y]:
                    seen[y] = True
                    stack.append(int(y))
    lists = graph.to_lists()
    for s, vs in extra.items():
        lists[s].extend(vs)
    return ProximityGraph.from_lists(lists), added


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def degree_stats(graph: ProximityGraph) -> dict:
    deg = graph.degrees()
    return {"mean": float(deg.mean()), "std": float(deg.std()), "max": int(deg.max()),
            "min": int(deg.min())}


def build_index(store: VectorStore, params: BuildParams | None = None, seed: int = 0,
                knn: KnnGraph | None = None) -> PspIndex:
    params = (params or BuildParams()).validate()
    n = store.count
    rep: dict = {"n": n, "d": store.dim}
    t_all = time.perf_counter()
    exhaustive = params.L >= n - 1
    t = time.perf_counter()
    if knn is None and not exhaustive:
        K = min(params.K, n - 1)
        knn = build_knn(store, K, seed=seed, iters=params.knn_iters, sample_rate=params.sample_rate)
    rep["knn_seconds"] = time.perf_counter() - t

    t = time.perf_counter()
    graph = nssg_prune(None if exhaustive else knn, store, params)
    rep["prune_seconds"] = time.perf_counter() - t
    rep["pruned_degree"] = degree_stats(graph)

    t = time.perf_counter()
    graph = edge_refine_all(graph, store, params.S, params.alpha, params.ef_guard)
    rep["ef_seconds"] = time.perf_counter() - t

    t = time.perf_counter()
    c, m = params.resolved_nav(n)
    nav = spherical_navigation(store, m, c, seed)
    rep["sn_seconds"] = time.perf_counter() - t

    t = time.perf_counter()
    graph, added = connectivity_repair(graph, store, nav.all_ids(), params.degree_cap)
    rep["repair_seconds"] = time.perf_counter() - t
    rep["repair_edges"] = added
    rep["degree"] = degree_stats(graph)
    rep["reachable_fraction"] = float(graph.reachable(nav.all_ids()).mean())
    rep["build_seconds"] = time.perf_counter() - t_all
    rep["nav"] = {"c": c, "m": m}
    log.info("built index n=%d in %.1fs (mean degree %.1f)", n, rep["build_seconds"], rep["degree"]["mean"])
    return PspIndex(store, graph, nav, params, None, rep)


def ideal_params(n: int, alpha: float = 60.0, S: int = 0) -> BuildParams:
    """Exhaustive candidates and unbounded degree."""
    return BuildParams(K=1, L=n, R=UNBOUNDED, alpha=alpha, S=S, reverse_links=False)
