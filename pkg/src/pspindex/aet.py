"""Adaptive early termination: streaming features, training, and the stop model.

Features tracked at every pop of the best-first search:

    F1  EMA of <p, q>
    F2  EMA of |p| / (smallest |p| seen so far)
    F3  EMA of <p, q> / (largest <p, q> seen so far)
    F4  EMA of "the previous expansion changed the running top-k"

A shallow CART tree over (F1..F4) keeps positive (continue) and negative
(stop) counts in its leaves. A leaf says stop when neg / pos > theta, so the
aggressiveness can be retuned without refitting.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateQuery, InvalidParam, MalformedRecord, SingleClassData

log = logging.getLogger(__name__)

N_FEATURES = 4
FEATURE_NAMES = ("F1", "F2", "F3", "F4")
DEFAULT_THETA = 2.0
DEFAULT_BETA = 0.9
# training traces run well past saturation so the post-boundary tail is long
TRAIN_LS = 800
LEAF = -1


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureState:
    f1: float = 0.0
    f2: float = 0.0
    f3: float = 0.0
    f4: float = 0.0
    min_norm: float = math.inf
    max_ip: float = -math.inf
    count: int = 0
    beta: float = DEFAULT_BETA

    def vector(self) -> np.ndarray:
        return np.array([self.f1, self.f2, self.f3, self.f4])


def update_features(state: FeatureState, ip: float, norm: float, changed: bool) -> FeatureState:
    """One pop: refresh the running extremes, then fold the observations into the EMAs."""
    min_norm = min(state.min_norm, norm)
    max_ip = max(state.max_ip, ip)
    o1 = ip
    o2 = norm / min_norm if min_norm > 0 else 1.0
    o3 = ip / max_ip if max_ip != 0 else 1.0
    o4 = 1.0 if changed else 0.0
    if state.count == 0:
        return replace(state, f1=o1, f2=o2, f3=o3, f4=o4, min_norm=min_norm, max_ip=max_ip, count=1)
    b = state.beta
    return replace(state,
                   f1=b * state.f1 + (1 - b) * o1,
                   f2=b * state.f2 + (1 - b) * o2,
                   f3=b * state.f3 + (1 - b) * o3,
                   f4=b * state.f4 + (1 - b) * o4,
                   min_norm=min_norm, max_ip=max_ip, count=state.count + 1)


def replay_features(ips, norms, changed, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Recompute the (pops, 4) feature log from per-pop observations."""
    st = FeatureState(beta=beta)
    out = np.empty((len(ips), N_FEATURES))
    for t, (a, b, c) in enumerate(zip(ips, norms, changed)):
        st = update_features(st, float(a), float(b), bool(c))
        out[t] = st.vector()
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def leaf_stops(pos: int, neg: int, theta: float) -> bool:
    # an all-stop leaf has ratio +inf: it stops for every finite theta
    ratio = math.inf if pos == 0 else neg / pos
    return ratio > theta


@dataclass
class AetModel:
    """Binary tree in flat arrays; node 0 is the root, leaves have feature == -1."""

    feature: np.ndarray    # int32
    threshold: np.ndarray  # float32; go left when f[feature] < threshold
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    pos: np.ndarray        # int64 continue counts
    neg: np.ndarray        # int64 stop counts
    theta: float = DEFAULT_THETA
    beta: float = DEFAULT_BETA
    max_depth: int = 4

    @property
    def size(self) -> int:
        return int(self.feature.shape[0])

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def stop_flags(self, theta: float | None = None) -> np.ndarray:
        th = self.theta if theta is None else theta
        return np.array([self.is_leaf(i) and leaf_stops(int(self.pos[i]), int(self.neg[i]), th)
                         for i in range(self.size)], dtype=np.uint8)

    def depth(self) -> int:
        def rec(i):
            return 0 if self.is_leaf(i) else 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def compiled(self):
        """Arrays consumed by the search kernel."""
        return (self.feature.astype(np.int32), self.threshold.astype(np.float64),
                self.left.astype(np.int32), self.right.astype(np.int32), self.stop_flags())

    def leaf_of(self, f) -> int:
        i = 0
        while not self.is_leaf(i):
            i = self.left[i] if f[self.feature[i]] < self.threshold[i] else self.right[i]
        return int(i)

    def with_theta(self, theta: float) -> "AetModel":
        if not theta > 0:
            raise InvalidParam(f"theta must be positive, got {theta}")
        return prune(replace(self, theta=float(theta)))

    # -- serialization ----------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [struct.pack("<I", self.size)]
        for i in range(self.size):
            feat = 255 if self.feature[i] < 0 else int(self.feature[i])
            out.append(struct.pack("<Bf4I", feat, float(self.threshold[i]), int(max(self.left[i], 0)),
                                   int(max(self.right[i], 0)), int(self.pos[i]), int(self.neg[i])))
        out.append(struct.pack("<f", self.theta))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes, beta: float = DEFAULT_BETA) -> "AetModel":
        rec = struct.calcsize("<Bf4I")
        if len(raw) < 8:
            raise MalformedRecord("model section too short")
        (count,) = struct.unpack_from("<I", raw, 0)
        if len(raw) != 4 + count * rec + 4 or count == 0:
            raise MalformedRecord("model section length does not match node count")
        feat = np.empty(count, dtype=np.int32)
        thr = np.empty(count, dtype=np.float32)
        left = np.empty(count, dtype=np.int32)
        right = np.empty(count, dtype=np.int32)
        pos = np.empty(count, dtype=np.int64)
        neg = np.empty(count, dtype=np.int64)
        for i in range(count):
            f, t, lo, hi, p, n = struct.unpack_from("<Bf4I", raw, 4 + i * rec)
            leaf = f == 255
            if not leaf and (f >= N_FEATURES or not (i < lo < count and i < hi < count)):
                raise MalformedRecord(f"model node {i} is malformed")
            feat[i] = LEAF if leaf else f
            thr[i] = t
            left[i] = LEAF if leaf else lo
            right[i] = LEAF if leaf else hi
            pos[i] = p
            neg[i] = n
        (theta,) = struct.unpack_from("<f", raw, 4 + count * rec)
        return cls(feat, thr, left, right, pos, neg, float(theta), beta)


def evaluate(model: AetModel, state) -> bool:
    """True means stop."""
    f = state.vector() if isinstance(state, FeatureState) else np.asarray(state, dtype=np.float64)
    i = model.leaf_of(f)
    return leaf_stops(int(model.pos[i]), int(model.neg[i]), model.theta)


def prune(model: AetModel) -> AetModel:
    """Collapse internal nodes whose two leaf children agree, until none remain."""
    lists = {k: list(getattr(model, k)) for k in ("feature", "threshold", "left", "right", "pos", "neg")}

    def rec(i):
        if lists["feature"][i] < 0:
            return
        rec(lists["left"][i])
        rec(lists["right"][i])
        lo, hi = lists["left"][i], lists["right"][i]
        if lists["feature"][lo] < 0 and lists["feature"][hi] < 0:
            a = leaf_stops(lists["pos"][lo], lists["neg"][lo], model.theta)
            b = leaf_stops(lists["pos"][hi], lists["neg"][hi], model.theta)
            if a == b:
                lists["feature"][i] = LEAF
                lists["threshold"][i] = 0.0
                lists["left"][i] = LEAF
                lists["right"][i] = LEAF

    rec(0)
    # renumber the surviving nodes in preorder
    order = []

    def walk(i):
        order.append(i)
        if lists["feature"][i] >= 0:
            walk(lists["left"][i])
            walk(lists["right"][i])

    walk(0)
    remap = {old: new for new, old in enumerate(order)}
    feat = np.array([lists["feature"][o] for o in order], dtype=np.int32)
    left = np.array([remap[lists["left"][o]] if feat[j] >= 0 else LEAF for j, o in enumerate(order)],
                    dtype=np.int32)
    right = np.array([remap[lists["right"][o]] if feat[j] >= 0 else LEAF for j, o in enumerate(order)],
                     dtype=np.int32)
    return AetModel(feat, np.array([lists["threshold"][o] for o in order], dtype=np.float32), left, right,
                    np.array([lists["pos"][o] for o in order], dtype=np.int64),
                    np.array([lists["neg"][o] for o in order], dtype=np.int64),
                    model.theta, model.beta, model.max_depth)


def export_rules(model: AetModel, names=FEATURE_NAMES) -> str:
    """Clause form: one ``if (...) stop;`` line per stop leaf, then ``else continue;``."""
    clauses = []

    def fmt(x):
        return f"{float(x):.6g}"

    def rec(i, conds):
        if model.is_leaf(i):
            if leaf_stops(int(model.pos[i]), int(model.neg[i]), model.theta):
                clauses.append(" & ".join(conds) if conds else "true")
            return
        nm = names[model.feature[i]]
        rec(model.left[i], conds + [f"{nm}<{fmt(model.threshold[i])}"])
        rec(model.right[i], conds + [f"{nm}>={fmt(model.threshold[i])}"])

    rec(0, [])
    if not clauses:
        return "continue;"
    lines = [("if" if j == 0 else "else if") + f" ({c}) stop;" for j, c in enumerate(clauses)]
    return "\n".join(lines + ["else continue;"])


# ---------------------------------------------------------------------------
# CART
# ---------------------------------------------------------------------------

def _gini(pos, neg):
    tot = pos + neg
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(tot > 0, pos / np.maximum(tot, 1), 0.0)
    return 1.0 - p * p - (1.0 - p) ** 2


def _best_split(X, y):
    """Best (gain, feature, float32 threshold) with the left side being f < threshold."""
    n = y.size
    pos_all = float(y.sum())
    parent = _gini(np.array(pos_all), np.array(n - pos_all)) * n
    best = (0.0, -1, 0.0)
    for j in range(X.shape[1]):
        col = X[:, j]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        ys = y[order]
        uniq = np.unique(xs)
        if uniq.size < 2:
            continue
        thr = ((uniq[:-1] + uniq[1:]) / 2.0).astype(np.float32)
        thr = np.unique(thr)
        # number of rows strictly below each float32 threshold
        nl = np.searchsorted(xs, thr.astype(np.float64), side="left")
        ok = (nl > 0) & (nl < n)
        if not ok.any():
            continue
        thr, nl = thr[ok], nl[ok]
        cpos = np.concatenate([[0.0], np.cumsum(ys)])
        pl = cpos[nl]
        pr = pos_all - pl
        nr = n - nl
        child = _gini(pl, nl - pl) * nl + _gini(pr, nr - pr) * nr
        gain = parent - child
        k = int(np.argmax(gain))
        if gain[k] > best[0] + 1e-12:
            best = (float(gain[k]), j, float(thr[k]))
    return best


def train_tree(X, y, max_depth: int = 4, theta: float = DEFAULT_THETA, beta: float = DEFAULT_BETA,
               min_leaf: int = 1) -> AetModel:
    """Greedy Gini CART; y == 1 is continue, y == 0 is stop."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if X.ndim != 2 or X.shape[1] != N_FEATURES or X.shape[0] != y.shape[0]:
        raise InvalidParam(f"expected (rows, {N_FEATURES}) features with matching labels")
    if not 1 <= max_depth <= N_FEATURES:
        raise InvalidParam(f"max_depth must lie in [1, {N_FEATURES}]")
    if not theta > 0:
        raise InvalidParam(f"theta must be positive, got {theta}")
    if y.size == 0 or np.unique(y).size < 2:
        raise SingleClassData("training rows need both continue and stop labels")
    feat, thr, left, right, pos, neg = [], [], [], [], [], []

    def grow(idx, depth):
        me = len(feat)
        p = int(y[idx].sum())
        feat.append(LEAF)
        thr.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        pos.append(p)
        neg.append(idx.size - p)
        if depth >= max_depth or p == 0 or p == idx.size or idx.size < 2 * min_leaf:
            return me
        gain, j, t = _best_split(X[idx], y[idx])
        if j < 0:
            return me
        go_left = X[idx, j] < np.float64(np.float32(t))
        li, ri = idx[go_left], idx[~go_left]
        if li.size < min_leaf or ri.size < min_leaf:
            return me
        feat[me] = j
        thr[me] = t
        left[me] = grow(li, depth + 1)
        right[me] = grow(ri, depth + 1)
        return me

    grow(np.arange(y.size), 0)
    model = AetModel(np.array(feat, dtype=np.int32), np.array(thr, dtype=np.float32),
                     np.array(left, dtype=np.int32), np.array(right, dtype=np.int32),
                     np.array(pos, dtype=np.int64), np.array(neg, dtype=np.int64),
                     float(theta), beta, max_depth)
    return prune(model)


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    X: np.ndarray
    y: np.ndarray
    report: dict = field(default_factory=dict)


def boundary_index(hits: np.ndarray, final_hits: int) -> int:
    """First pop at which the pool top-k already holds the final recall (len(hits) if never)."""
    reach = np.flatnonzero(np.asarray(hits) >= final_hits)
    return int(reach[0]) if reach.size else len(hits)


def label_trace(features, hits, final_hits, sample_per_query, rng):
    """Rows before the boundary are continue (1), rows from it on are stop (0)."""
    feats = np.asarray(features)
    if final_hits <= 0 or feats.shape[0] == 0:
        raise DegenerateQuery("search never retrieved a true neighbor")
    b = boundary_index(hits, final_hits)
    before = np.arange(b)
    after = np.arange(b, feats.shape[0])
    take_b = rng.choice(before, size=min(sample_per_query, before.size), replace=False) if before.size else before
    take_a = rng.choice(after, size=min(sample_per_query, after.size), replace=False) if after.size else after
    rows = np.concatenate([take_b, take_a]).astype(np.int64)
    labels = np.concatenate([np.ones(take_b.size), np.zeros(take_a.size)]).astype(np.int64)
    return feats[rows], labels, b


def balance(X, y, rng):
    """Downsample the majority class."""
    ip = np.flatnonzero(y == 1)
    ineg = np.flatnonzero(y == 0)
    m = min(ip.size, ineg.size)
    if m == 0:
        return X, y
    keep = np.sort(np.concatenate([rng.choice(ip, m, replace=False), rng.choice(ineg, m, replace=False)]))
    return X[keep], y[keep]


def generate_training_data(store, build_params=None, k: int = 100, l_s: int = TRAIN_LS, split: float = 0.9,
                           sample_per_query: int = 8, seed: int = 0, max_queries: int | None = 1000,
                           index=None, queries=None) -> TrainingData:
    """Split the base, index the held-in part, trace searches for the held-out part.

    Pass ``index`` and ``queries`` to skip the split and trace on an existing index.
    """
    from .build import build_index
    from .oracle import brute_topk_batch
    from .search import Searcher, SearchParams

    rng = np.random.default_rng([seed, 7])
    rep: dict = {}
    if index is None:
        if not 0.0 < split < 1.0:
            raise InvalidParam(f"split must lie in (0, 1), got {split}")
        perm = rng.permutation(store.count)
        cut = int(round(split * store.count))
        base_ids, query_ids = np.sort(perm[:cut]), perm[cut:]
        if max_queries is not None:
            query_ids = query_ids[:max_queries]
        base = store.subset(base_ids)
        queries = store.data[query_ids]
        index = build_index(base, build_params, seed=seed)
        rep["base_count"] = int(base.count)
    queries = np.asarray(queries, dtype=np.float32)
    k = min(k, index.n)
    l_s = max(l_s, k)
    truth = brute_topk_batch(index.store, queries, k, "ip")
    searcher = Searcher(index, seed)
    params = SearchParams(l_s=l_s, k=k, metric="ip")
    xs, ys, bounds, pops = [], [], [], []
    degenerate = 0
    for i, q in enumerate(queries):
        tr = searcher.search(q, params, query_id=i, truth_ids=truth.ids[i])
        try:
            fx, fy, b = label_trace(tr.features, tr.topk_hits, tr.final_hits, sample_per_query, rng)
        except DegenerateQuery:
            degenerate += 1
            continue
        xs.append(fx)
        ys.append(fy)
        bounds.append(b / max(tr.hops, 1))
        pops.append(tr.hops)
    if not xs:
        raise SingleClassData("no usable training traces")
    X = np.concatenate(xs)
    y = np.concatenate(ys)
    rep.update({"queries": int(len(queries)), "degenerate_queries": degenerate,
                "raw_continue": int(y.sum()), "raw_stop": int((y == 0).sum()),
                "mean_pops": float(np.mean(pops)), "mean_boundary_fraction": float(np.mean(bounds))})
    X, y = balance(X, y, rng)
    rep["rows"] = int(y.size)
    log.info("AET training rows: %d (%d degenerate queries)", y.size, degenerate)
    return TrainingData(X, y, rep)


def train_aet(store, build_params=None, k: int = 100, l_s: int = TRAIN_LS, split: float = 0.9,
              theta: float = DEFAULT_THETA, sample_per_query: int = 8, seed: int = 0,
              max_depth: int = 4, **kw) -> tuple[AetModel, TrainingData]:
    data = generate_training_data(store, build_params, k, l_s, split, sample_per_query, seed, **kw)
    return train_tree(data.X, data.y, max_depth=max_depth, theta=theta), data
