"""Executable checks of the MIPS <-> NNS scaling equivalence.

* scaling a query by mu > 0 never changes its MIPS answer set;
* above a finite bound mu_bar the Euclidean nearest neighbor of mu*q is a
  MIPS solution of q, and greedy walks under the two metrics coincide;
* the probability that two same-law Gaussian vectors lie within squared
  distance s follows a regularized incomplete gamma law;
* mean search hops grow slowly with n.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammainc
from scipy.stats import spearmanr

from .errors import DegenerateDataset, InvalidParam
from .graph import ProximityGraph, PspIndex
from .oracle import brute_topk_batch, mean_recall
from .search import Searcher, SearchParams, query_rng
from .vecstore import VectorStore

EPS_MU = 1e-6
MU_GRID = (1.01, 2.0, 10.0, 100.0)
BELOW_GRID = (0.5, 0.9, 0.99)
TABLE_MUS = (0.1, 1.0, 10.0, 100.0, 1200.0)


def _ips(store: VectorStore, q) -> np.ndarray:
    return store.data.astype(np.float64) @ np.asarray(q, dtype=np.float64)


def nn_of_scaled(store: VectorStore, q, mu: float) -> int:
    """Euclidean nearest neighbor of mu*q, ties to the smaller id.

    Ranks by |x|^2 - 2 mu <x, q>, which drops the constant mu^2 |q|^2 and so
    keeps full precision for large mu.
    """
    key = store.norms ** 2 - 2.0 * mu * _ips(store, q)
    return int(np.flatnonzero(key == key.min())[0])


def mips_solutions(store: VectorStore, q) -> np.ndarray:
    ip = _ips(store, q)
    return np.flatnonzero(ip == ip.max())


# ---------------------------------------------------------------------------
# mu bound
# ---------------------------------------------------------------------------

@dataclass
class MuBoundReport:
    mu_bar: float
    effective_lower: float
    witness: int
    solutions: np.ndarray
    competitors: np.ndarray
    terms: np.ndarray
    argsup: int

    def grid(self, factors=MU_GRID) -> list[float]:
        base = max(self.mu_bar, EPS_MU)
        return [f * base for f in factors]


def compute_mu_bar(store: VectorStore, query) -> MuBoundReport:
    """Exact supremum over the competitor set, relative to the smallest-norm MIPS solution."""
    if store.count < 2:
        raise DegenerateDataset("need at least two points")
    ip = _ips(store, query)
    sol = np.flatnonzero(ip == ip.max())
    comp = np.flatnonzero(ip != ip.max())
    if comp.size == 0:
        raise DegenerateDataset("every point attains the maximum inner product")
    sq = store.norms ** 2
    # among tied solutions the nearest to mu*q is the one with the smallest norm
    witness = int(sol[np.lexsort((sol, sq[sol]))[0]])
    terms = (sq[witness] - sq[comp]) / (2.0 * (ip[witness] - ip[comp]))
    j = int(np.argmax(terms))
    mu_bar = float(terms[j])
    return MuBoundReport(mu_bar, max(mu_bar, 0.0), witness, sol, comp, terms, int(comp[j]))


def verify_mu_grid(store: VectorStore, query, report: MuBoundReport | None = None,
                   factors=MU_GRID, below=BELOW_GRID) -> dict:
    """NN(mu q) in the MIPS solution set above the bound; below it, record failures."""
    rep = report or compute_mu_bar(store, query)
    sol = set(rep.solutions.tolist())
    above = {mu: nn_of_scaled(store, query, mu) in sol for mu in rep.grid(factors)}
    under = {}
    if rep.mu_bar > 0:
        under = {f * rep.mu_bar: nn_of_scaled(store, query, f * rep.mu_bar) in sol for f in below}
    return {"mu_bar": rep.mu_bar, "above": above, "below": under,
            "above_ok": all(above.values()), "below_fails": any(not v for v in under.values())}


# ---------------------------------------------------------------------------
# path duality
# ---------------------------------------------------------------------------

def _greedy_walk(graph: ProximityGraph, key: np.ndarray, start: int, max_steps: int) -> list[int]:
    """1-best walk maximizing ``key``; moves only on strict improvement, ties to the smaller id."""
    path = [int(start)]
    cur = int(start)
    for _ in range(max_steps):
        nb = graph.neighbors(cur)
        if nb.size == 0:
            break
        vals = key[nb]
        best = vals.max()
        nxt = int(nb[vals == best].min())
        if not best > key[cur]:
            break
        path.append(nxt)
        cur = nxt
    return path


def dual_metric_walk(graph: ProximityGraph, store: VectorStore, query, mu: float, max_steps: int = 15,
                     start: int = 0) -> dict:
    """Greedy walks under inner product toward q and under L2 toward mu*q from one start."""
    if not mu > 0:
        raise InvalidParam(f"mu must be positive, got {mu}")
    ip = _ips(store, query)
    l2_key = 2.0 * mu * ip - store.norms ** 2   # larger is nearer to mu*q
    return {"path_ip": _greedy_walk(graph, ip, start, max_steps),
            "path_l2": _greedy_walk(graph, l2_key, start, max_steps)}


def path_overlap(a, b) -> float:
    """Positional id agreement over aligned steps, divided by the longer path's length."""
    if not a and not b:
        return 1.0
    same = sum(1 for x, y in zip(a, b) if x == y)
    return same / max(len(a), len(b))


@dataclass
class OverlapReport:
    mus: list
    overlap: list
    recall: list
    spearman: float
    meta: dict = field(default_factory=dict)

    def rows(self):
        return [{"mu": m, "overlap": o, "recall": r} for m, o, r in zip(self.mus, self.overlap, self.recall)]


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.ptp(y) == 0:
        return 1.0  # a constant series is trivially non-decreasing
    return float(spearmanr(x, y).statistic)


def overlap_experiment(store: VectorStore, queries, mu_list=TABLE_MUS, max_steps: int = 15,
                       ideal: bool = True, index: PspIndex | None = None, k: int = 100,
                       l_s: int = 200, seed: int = 0) -> OverlapReport:
    from .build import build_index, ideal_params

    if index is None:
        if ideal and store.count > 20_000:
            raise InvalidParam("the exhaustive index is limited to n <= 20000")
        index = build_index(store, ideal_params(store.count) if ideal else None, seed=seed)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    k = min(k, store.count)
    truth = brute_topk_batch(store, queries, k, "ip")
    searcher = Searcher(index, seed)
    starts = [int(query_rng(seed, i).integers(store.count)) for i in range(len(queries))]
    overlaps, recalls = [], []
    for mu in mu_list:
        ov = [path_overlap(**_paths(dual_metric_walk(index.graph, store, q, mu, max_steps, s)))
              for q, s in zip(queries, starts)]
        sp = SearchParams(l_s=max(l_s, k), k=k, metric="l2")
        res = np.array([searcher.search(q, sp, i, scale=mu).result_ids for i, q in enumerate(queries)])
        overlaps.append(float(np.mean(ov)))
        recalls.append(mean_recall(res, truth.ids))
    meta = {"overlap_definition": "positional id matches / longer path length",
            "max_steps": max_steps, "ideal": ideal, "k": k, "l_s": l_s, "seed": seed,
            "queries": int(len(queries)), "n": store.count,
            "mean_degree": float(index.graph.degrees().mean())}
    return OverlapReport(list(mu_list), overlaps, recalls, spearman(mu_list, overlaps), meta)


def _paths(walk):
    return {"a": walk["path_ip"], "b": walk["path_l2"]}


# ---------------------------------------------------------------------------
# Q(s)
# ---------------------------------------------------------------------------

def qs_probability(d: int, sigma2: float, s: float, scale: str = "2sigma2") -> float:
    """gamma(d/2, s / (2 sigma^2)) / Gamma(d/2).

    ``scale="4sigma2"`` evaluates the same law with s / (4 sigma^2), which is
    the exact distribution of |X - Y|^2 for X, Y ~ N(0, sigma^2 I_d).
    """
    if d < 1 or not sigma2 > 0 or s < 0:
        raise InvalidParam("need d >= 1, sigma2 > 0, s >= 0")
    div = {"2sigma2": 2.0, "4sigma2": 4.0}.get(scale)
    if div is None:
        raise InvalidParam(f"unknown scale {scale!r}")
    return float(gammainc(d / 2.0, s / (div * sigma2)))


def qs_monte_carlo(d: int, sigma2: float, s, trials: int = 1_000_000, seed: int = 0,
                   chunk: int = 250_000):
    """Empirical P(|X - Y|^2 < s) for X, Y ~ N(0, sigma^2 I_d); returns (values, standard errors)."""
    if trials < 1:
        raise InvalidParam("trials must be positive")
    s_arr = np.atleast_1d(np.asarray(s, dtype=np.float64))
    rng = np.random.default_rng(seed)
    counts = np.zeros(s_arr.size, dtype=np.int64)
    sd = math.sqrt(sigma2)
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        diff = (rng.standard_normal((m, d)) - rng.standard_normal((m, d))) * sd
        z = np.sort(np.einsum("ij,ij->i", diff, diff))
        counts += np.searchsorted(z, s_arr, side="left")
        done += m
    p = counts / trials
    se = np.sqrt(p * (1 - p) / trials)
    if np.ndim(s) == 0:
        return float(p[0]), float(se[0])
    return p, se


@dataclass
class QsReport:
    d: int
    sigma2: float
    s_grid: np.ndarray
    q_formula: np.ndarray
    q_alt: np.ndarray
    q_mc: np.ndarray
    mc_se: np.ndarray
    trials: int
    overlap_empirical: np.ndarray | None = None

    @property
    def gap_formula(self) -> float:
        return float(np.max(np.abs(self.q_formula - self.q_mc)))

    @property
    def gap_alt(self) -> float:
        return float(np.max(np.abs(self.q_alt - self.q_mc)))

    def summary(self, tol: float = 0.01) -> dict:
        return {"d": self.d, "sigma2": self.sigma2, "trials": self.trials,
                "gap_2sigma2": self.gap_formula, "gap_4sigma2": self.gap_alt,
                "matches_mc_2sigma2": self.gap_formula <= tol, "matches_mc_4sigma2": self.gap_alt <= tol,
                "max_se": float(np.max(self.mc_se)),
                "mc_monotone": bool(np.all(np.diff(self.q_mc) >= 0))}

    def rows(self):
        out = []
        for j, s in enumerate(self.s_grid):
            row = {"s": float(s), "q_2sigma2": float(self.q_formula[j]), "q_4sigma2": float(self.q_alt[j]),
                   "q_mc": float(self.q_mc[j]), "mc_se": float(self.mc_se[j])}
            if self.overlap_empirical is not None:
                row["overlap_empirical"] = float(self.overlap_empirical[j])
            out.append(row)
        return out


def qs_report(d: int, sigma2: float, s_grid, trials: int = 1_000_000, seed: int = 0) -> QsReport:
    s_grid = np.sort(np.asarray(s_grid, dtype=np.float64))
    qf = np.array([qs_probability(d, sigma2, s) for s in s_grid])
    qa = np.array([qs_probability(d, sigma2, s, "4sigma2") for s in s_grid])
    mc, se = qs_monte_carlo(d, sigma2, s_grid, trials, seed)
    return QsReport(d, sigma2, s_grid, qf, qa, mc, se, trials)


def default_s_grid(d: int, sigma2: float, points: int = 10) -> np.ndarray:
    """Grid spanning the bulk of the |X - Y|^2 law (mean 2 d sigma^2)."""
    return np.linspace(0.0, 4.0 * d * sigma2, points + 1)[1:]


def kmips_neighborhood_overlap(store: VectorStore, queries, k: int, s_grid) -> np.ndarray:
    """Per s: mean fraction of the exact top-k MIPS set within squared L2 distance s of the top-1."""
    truth = brute_topk_batch(store, queries, k, "ip")
    s_grid = np.asarray(s_grid, dtype=np.float64)
    x = store.data.astype(np.float64)
    out = np.zeros(s_grid.size)
    for row in truth.ids:
        d2 = ((x[row] - x[row[0]]) ** 2).sum(1)
        out += (d2[None, :] <= s_grid[:, None]).mean(1)
    return out / len(truth.ids)


def median_pairwise_sqdist(store: VectorStore, pairs: int = 200_000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    a = rng.integers(store.count, size=pairs)
    b = rng.integers(store.count, size=pairs)
    keep = a != b
    diff = store.data[a[keep]].astype(np.float64) - store.data[b[keep]]
    return float(np.median(np.einsum("ij,ij->i", diff, diff)))


# ---------------------------------------------------------------------------
# hop scaling
# ---------------------------------------------------------------------------

LS_LADDER = (1, 2, 3, 4, 6, 8, 10, 12, 16, 20, 24, 32, 40, 48, 64, 80, 96, 128, 160, 192, 256,
             320, 384, 512, 640, 768, 1024)


def operating_point(index: PspIndex, queries, truth_ids, k: int, target: float = 0.95,
                    ladder=LS_LADDER, seed: int = 0) -> dict:
    """Smallest ladder l_s reaching the target recall@k; reports mean hops and query time there."""
    searcher = Searcher(index, seed)
    last = None
    for ls in ladder:
        if ls < k:
            continue
        sp = SearchParams(l_s=ls, k=k)
        t0 = time.perf_counter()
        tr = [searcher.search(q, sp, i) for i, q in enumerate(queries)]
        wall = time.perf_counter() - t0
        rec = mean_recall(np.array([t.result_ids for t in tr]), truth_ids[:, :k])
        last = {"l_s": ls, "recall": rec, "hops": float(np.mean([t.hops for t in tr])),
                "dc": float(np.mean([t.dc for t in tr])), "query_us": 1e6 * wall / len(queries),
                "reached": rec >= target}
        if rec >= target:
            return last
    return last


def hop_scaling(stores: dict, queries, build_params=None, ks=(1, 100), target: float = 0.95,
                seed: int = 0, indexes: dict | None = None) -> list[dict]:
    """For each n: build (or reuse) an index with identical params and find the target operating point."""
    from .build import build_index

    rows = []
    queries = np.asarray(queries, dtype=np.float32)
    for n in sorted(stores):
        store = stores[n]
        index = (indexes or {}).get(n) or build_index(store, build_params, seed=seed)
        kmax = min(max(ks), store.count)
        truth = brute_topk_batch(store, queries, kmax, "ip")
        for k in ks:
            k = min(k, store.count)
            pt = operating_point(index, queries, truth.ids, k, target, seed=seed)
            rows.append({"n": n, "k": k, **pt, "build_seconds": index.report.get("build_seconds", 0.0)})
    return rows


def hop_ratios(rows, k: int = 1) -> list[float]:
    pts = sorted((r["n"], r["hops"]) for r in rows if r["k"] == k)
    return [b[1] / a[1] for a, b in zip(pts, pts[1:])]
