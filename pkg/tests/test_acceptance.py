"""Acceptance criteria 1-10, each run at its stated tolerance and runtime budget.

Every criterion prints one line ``[ACCEPT n] PASS|FAIL name: details (t s / budget s)``
and the test asserts the same verdict. Run directly with
``python3 tests/test_acceptance.py [n ...]`` to get only the summary lines.
"""

from __future__ import annotations

import math
import sys
import time

import numpy as np
import pytest

from pspindex.aet import evaluate, train_aet
from pspindex.bench import ablation_matrix
from pspindex.build import ANGLE_TOL, build_index, nssg_prune
from pspindex.errors import DataError
from pspindex.graph import BuildParams
from pspindex.indexio import decode_index, encode_index
from pspindex.knn_graph import build_exact_knn
from pspindex.oracle import brute_topk, brute_topk_batch, recall_at_k
from pspindex.search import Searcher, SearchParams
from pspindex.synth import SynthSpec, generate
from pspindex.theory import (compute_mu_bar, default_s_grid, hop_ratios, hop_scaling,
                             kmips_neighborhood_overlap, median_pairwise_sqdist, mips_solutions,
                             nn_of_scaled, overlap_experiment, qs_report)
from pspindex.vecstore import VectorStore

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

# lognormal-norm desk law used wherever a norm-diverse dataset is needed
LOGNORMAL_TAIL = 0.25


def _report(n: int, name: str, ok: bool, detail: str, elapsed: float, budget: float) -> bool:
    within = elapsed <= budget
    verdict = "PASS" if ok and within else "FAIL"
    line = f"[ACCEPT {n}] {verdict} {name}: {detail} ({elapsed:.1f} s / {budget:.0f} s)"
    if not within:
        line += " runtime over budget"
    print(line, flush=True)
    return ok and within


def _desk(kind: str, n: int, queries: int, d: int = 16, seed: int = 0):
    return generate(SynthSpec(kind=kind, n=n, d=d, seed=seed, norm_tail=LOGNORMAL_TAIL), queries)


def _norm_diverse(rng, n, d):
    radius = np.exp(rng.normal(0.0, 0.5, size=n))
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return (x * radius[:, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# 1. scaling invariance of the MIPS answer set
# ---------------------------------------------------------------------------

def criterion_1() -> bool:
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    mismatches = checks = 0
    for _ in range(50):
        n = int(rng.integers(20, 1001))
        d = int(rng.integers(1, 33))
        store = VectorStore(_norm_diverse(rng, n, d))
        # dyadic components keep mu * q exact in float32 for every tested mu
        q = (rng.integers(-64, 65, size=d) / 8.0).astype(np.float32)
        if not q.any():
            q[0] = 1.0
        for k in (1, 10):
            base = set(brute_topk(store, q, k).ids[0].tolist())
            for mu in (0.5, 2.0, 1000.0):
                scaled = (q * np.float32(mu)).astype(np.float32)
                assert np.array_equal(scaled.astype(np.float64), q.astype(np.float64) * mu)
                checks += 1
                mismatches += set(brute_topk(store, scaled, k).ids[0].tolist()) != base
    return _report(1, "scaling invariance", mismatches == 0,
                   f"{mismatches} mismatches over {checks} (instance, k, mu) checks",
                   time.perf_counter() - t0, 10)


# ---------------------------------------------------------------------------
# 2. the mu-bar bound
# ---------------------------------------------------------------------------

def _direct_nn(x64, q, mu):
    # independent route: explicit squared distances to mu*q
    d2 = ((x64 - mu * q[None, :]) ** 2).sum(1)
    return int(np.flatnonzero(d2 == d2.min())[0])


def criterion_2() -> bool:
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    above_fail = direct_disagree = positive = positive_fail = 0
    for _ in range(100):
        n = int(rng.integers(20, 201))
        d = int(rng.integers(2, 17))
        store = VectorStore(_norm_diverse(rng, n, d))
        q = rng.standard_normal(d).astype(np.float32)
        rep = compute_mu_bar(store, q)
        sol = set(mips_solutions(store, q).tolist())
        x64 = store.data.astype(np.float64)
        q64 = q.astype(np.float64)
        for mu in rep.grid():
            nn = nn_of_scaled(store, q, mu)
            above_fail += nn not in sol
            direct_disagree += _direct_nn(x64, q64, mu) != nn
        if rep.mu_bar > 0:
            positive += 1
            below = [f * rep.mu_bar for f in (0.5, 0.9, 0.99)]
            positive_fail += any(nn_of_scaled(store, q, mu) not in sol for mu in below)
    frac = positive_fail / positive if positive else 0.0
    ok = above_fail == 0 and direct_disagree == 0 and positive > 0 and frac >= 0.30
    return _report(2, "mu-bar bound", ok,
                   f"above-bound failures {above_fail}, route disagreements {direct_disagree}, "
                   f"mu_bar>0 on {positive}/100, below-bound failure rate {frac:.2f} (need >= 0.30)",
                   time.perf_counter() - t0, 30)


# ---------------------------------------------------------------------------
# 3. path overlap trend on an ideal index
# ---------------------------------------------------------------------------

def criterion_3() -> bool:
    t0 = time.perf_counter()
    store, qs = _desk("lognormal-norm", 5000, 100)
    rep = overlap_experiment(store, qs.data, mu_list=(0.1, 1.0, 10.0, 100.0, 1200.0), k=100)
    ok = rep.spearman >= 0.9 and rep.overlap[-1] == 1.0 and rep.recall[-1] >= 0.99
    pairs = ", ".join(f"mu={m:g}: {o:.3f}/{r:.3f}" for m, o, r in zip(rep.mus, rep.overlap, rep.recall))
    return _report(3, "overlap trend", ok,
                   f"overlap/L2 recall@100 {pairs}; spearman {rep.spearman:.3f}",
                   time.perf_counter() - t0, 600)


# ---------------------------------------------------------------------------
# 4. Q(s) against Monte Carlo
# ---------------------------------------------------------------------------

def criterion_4() -> bool:
    t0 = time.perf_counter()
    rep = qs_report(8, 1.0, default_s_grid(8, 1.0), trials=1_000_000, seed=0)
    s = rep.summary(tol=0.01)
    ok = (s["mc_monotone"] and s["max_se"] <= 0.005
          and (s["matches_mc_2sigma2"] or s["matches_mc_4sigma2"]))
    return _report(4, "Q(s) vs Monte Carlo", ok,
                   f"monotone {s['mc_monotone']}, max se {s['max_se']:.5f}; "
                   f"gap 2sigma2 {s['gap_2sigma2']:.4f} (match {s['matches_mc_2sigma2']}), "
                   f"gap 4sigma2 {s['gap_4sigma2']:.4f} (match {s['matches_mc_4sigma2']})",
                   time.perf_counter() - t0, 120)


# ---------------------------------------------------------------------------
# 5. k-MIPS neighborhood overlap
# ---------------------------------------------------------------------------

def criterion_5() -> bool:
    t0 = time.perf_counter()
    store, qs = _desk("gaussian", 100_000, 200)
    med = median_pairwise_sqdist(store)
    grid = np.linspace(0.0, 2.0 * med, 41)[1:]
    ov = kmips_neighborhood_overlap(store, qs.data, 100, grid)
    monotone = bool(np.all(np.diff(ov) >= 0))
    below = ov[grid < med]
    ok = monotone and below.size > 0 and bool(below.max() > 0.9)
    at_med = float(np.interp(med, grid, ov))
    first = grid[np.argmax(ov > 0.9)] if (ov > 0.9).any() else math.nan
    return _report(5, "k-MIPS neighborhood overlap", ok,
                   f"monotone {monotone}; median pairwise sq dist {med:.2f}; overlap there {at_med:.3f}; "
                   f"max below median {below.max():.3f}; first s with overlap > 0.9 is {first:.2f}",
                   time.perf_counter() - t0, 300)


# ---------------------------------------------------------------------------
# 6. end-to-end recall at n = 1e5
# ---------------------------------------------------------------------------

E2E_PARAMS = BuildParams(K=100, L=200, R=48, S=5)


def criterion_6() -> bool:
    t0 = time.perf_counter()
    n = 100_000
    store, qs = _desk("gaussian", n, 200)
    idx = build_index(store, E2E_PARAMS, seed=0)
    truth = brute_topk_batch(store, qs.data, 100)
    searcher = Searcher(idx, 0)
    rows = []
    for ls in range(100, 501, 50):
        sp = SearchParams(l_s=ls, k=100)
        tr = [searcher.search(q, sp, i) for i, q in enumerate(qs.data)]
        rec = float(np.mean([recall_at_k(t.result_ids, g) for t, g in zip(tr, truth.ids)]))
        rows.append((ls, rec, float(np.mean([t.dc for t in tr]))))
    good = [r for r in rows if r[1] >= 0.99 and r[2] < 0.05 * n]
    ok = bool(good)
    table = ", ".join(f"l_s={ls}: {rec:.4f}@{dc:.0f}" for ls, rec, dc in rows)
    return _report(6, "end-to-end recall@100", ok,
                   f"need recall >= 0.99 with mean dc < {0.05 * n:.0f}; {table}; "
                   f"build {idx.report.get('build_seconds', 0.0):.0f} s",
                   time.perf_counter() - t0, 900)


# ---------------------------------------------------------------------------
# 7. hop scaling
# ---------------------------------------------------------------------------

HOP_PARAMS = BuildParams(K=32, L=64, R=32, S=3, sample_rate=0.6)


def criterion_7() -> bool:
    t0 = time.perf_counter()
    sizes = (10_000, 100_000, 1_000_000)
    stores = {n: _desk("gaussian", n, 0) for n in sizes}
    _, qs = _desk("gaussian", 10, 200)
    rows = hop_scaling(stores, qs.data, HOP_PARAMS, ks=(1,), target=0.95)
    ratios = hop_ratios(rows, k=1)
    ok = len(ratios) == 2 and all(r < 3 for r in ratios) and all(r["reached"] for r in rows)
    pts = ", ".join(f"n={r['n']}: hops {r['hops']:.1f} at l_s={r['l_s']} recall {r['recall']:.3f}"
                    for r in rows)
    return _report(7, "hop scaling", ok,
                   f"{pts}; ratios {', '.join(f'{x:.2f}' for x in ratios)} (need < 3)",
                   time.perf_counter() - t0, 3600)


# ---------------------------------------------------------------------------
# 8. early termination
# ---------------------------------------------------------------------------

AET_PARAMS = BuildParams(K=32, L=64, R=32, S=3)
AET_EVAL_LS = 400


def _theta_nested(model, rng, states: int = 10_000) -> bool:
    X = np.column_stack([rng.normal(0, 20, states), rng.uniform(0.5, 4, states),
                         rng.uniform(-1, 1.2, states), rng.uniform(0, 1, states)])
    thetas = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, math.inf)
    stops = [np.array([evaluate(model.with_theta(t), x) for x in X]) for t in thetas]
    return all(not np.any(hi & ~lo) for lo, hi in zip(stops, stops[1:]))


def criterion_8() -> bool:
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    wins = 0
    nested = True
    parts = []
    for kind in ("gaussian", "lognormal-norm", "clustered"):
        store, qs = _desk(kind, 20_000, 500)
        model, _ = train_aet(store, AET_PARAMS)
        nested &= _theta_nested(model, rng)
        idx = build_index(store, AET_PARAMS, seed=0)
        idx.aet = model
        truth = brute_topk_batch(store, qs.data, 100)
        searcher = Searcher(idx, 0)
        res = {}
        for on in (False, True):
            sp = SearchParams(l_s=AET_EVAL_LS, k=100, aet=on)
            tr = [searcher.search(q, sp, i) for i, q in enumerate(qs.data)]
            res[on] = (float(np.mean([recall_at_k(t.result_ids, g) for t, g in zip(tr, truth.ids)])),
                       float(np.mean([t.hops for t in tr])))
        loss = res[False][0] - res[True][0]
        saved = 1.0 - res[True][1] / res[False][1]
        win = saved >= 0.03 and loss <= 0.01
        wins += win
        parts.append(f"{kind}: pops -{100 * saved:.1f}%, recall {res[False][0]:.4f}->{res[True][0]:.4f} "
                     f"({'ok' if win else 'miss'})")
    ok = wins >= 2 and nested
    return _report(8, "early termination", ok,
                   f"l_s={AET_EVAL_LS}; {'; '.join(parts)}; theta nesting exact {nested}",
                   time.perf_counter() - t0, 1800)


# ---------------------------------------------------------------------------
# 9. structural invariants
# ---------------------------------------------------------------------------

def _angle_violations(store, graph, alpha, nodes) -> int:
    lim = math.cos(math.radians(alpha)) + ANGLE_TOL
    bad = 0
    x = store.data.astype(np.float64)
    for p in nodes:
        v = x[graph.neighbors(p)] - x[p]
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        c = v @ v.T
        bad += int(np.sum(np.triu(c, 1) > lim))
    return bad


def _fuzz(raw: bytes, trials: int, rng) -> tuple[int, int]:
    crashes = survivors = 0
    for t in range(trials):
        buf = bytearray(raw)
        if t % 2 == 0:
            for _ in range(int(rng.integers(1, 8))):
                buf[int(rng.integers(len(buf)))] ^= int(rng.integers(1, 256))
        else:
            buf = buf[:int(rng.integers(0, len(buf)))]
        try:
            back = decode_index(bytes(buf))
            back.validate()
            survivors += 1
        except DataError:
            pass
        except Exception:  # anything else is a crash
            crashes += 1
    return crashes, survivors


def criterion_9() -> bool:
    t0 = time.perf_counter()
    store, _ = _desk("lognormal-norm", 5000, 1)
    params = BuildParams(K=32, L=64, R=16, S=3)
    knn = build_exact_knn(store, params.K)
    pruned = nssg_prune(knn, store, params)
    idx = build_index(store, params, seed=0, knn=knn)
    idx.validate()
    rng = np.random.default_rng(909)
    deg = idx.graph.degrees()
    cap_ok = int(pruned.degrees().max()) <= params.R and int(deg.max()) <= params.degree_cap
    angle_bad = _angle_violations(store, pruned, params.alpha, rng.choice(store.count, 100, replace=False))
    kept = all(set(pruned.neighbors(i).tolist()) <= set(idx.graph.neighbors(i).tolist())
               for i in range(store.count))
    reach = float(idx.graph.reachable(idx.nav.all_ids()).mean())
    raw = encode_index(idx)
    roundtrip = encode_index(decode_index(raw)) == raw
    crashes, survivors = _fuzz(raw, 100, rng)
    ok = cap_ok and angle_bad == 0 and kept and reach == 1.0 and roundtrip and crashes == 0
    return _report(9, "structural invariants", ok,
                   f"max degree {int(deg.max())} (cap {params.degree_cap}), pruned max "
                   f"{int(pruned.degrees().max())} (cap {params.R}); angle violations {angle_bad}; "
                   f"pruned edges kept {kept}; reachable {reach:.3f}; roundtrip identical {roundtrip}; "
                   f"fuzz crashes {crashes}/100 ({survivors} valid survivors)",
                   time.perf_counter() - t0, 300)


# ---------------------------------------------------------------------------
# 10. ablation direction
# ---------------------------------------------------------------------------

def _fmt(v):
    return "n/a" if v is None else f"{v:.0f}"


ABLATION_PARAMS = BuildParams(K=32, L=64, R=32, S=3)


def criterion_10() -> bool:
    t0 = time.perf_counter()
    store, qs = _desk("lognormal-norm", 20_000, 300)
    truth = brute_topk_batch(store, qs.data, 100)
    out = ablation_matrix(store, qs.data, truth.ids, 100, ABLATION_PARAMS,
                          ls_list=(100, 200, 400, 800, 1600, 3200), target=0.99, key="median_dc")
    dc = {k: out[k]["dc_at_target"] for k in ("base", "+EF", "+SN", "full")}
    reached = all(v is not None for v in dc.values())
    gains = {}
    if reached:
        gains = {"SN vs random (no EF)": dc["base"] - dc["+SN"],
                 "SN vs random (with EF)": dc["+EF"] - dc["full"],
                 "EF vs off (random entry)": dc["base"] - dc["+EF"],
                 "EF vs off (SN entry)": dc["+SN"] - dc["full"]}
    ok = reached and all(g >= 0 for g in gains.values())
    return _report(10, "ablation direction", ok,
                   "median dc at 0.99: " + ", ".join(f"{k} {_fmt(v)}" for k, v in dc.items())
                   + "; " + ", ".join(f"{k} {g:+.0f}" for k, g in gains.items()),
                   time.perf_counter() - t0, 1200)


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_acceptance_criterion(number, capsys):
    with capsys.disabled():
        print()
        ok = CRITERIA[number]()
    assert ok, f"acceptance criterion {number} failed; see the [ACCEPT {number}] line"


if __name__ == "__main__":
    chosen = [int(a) for a in sys.argv[1:]] or sorted(CRITERIA)
    results = {n: CRITERIA[n]() for n in chosen}
    print(f"{sum(results.values())}/{len(results)} criteria passed")
    sys.exit(0 if all(results.values()) else 1)
