"""Recall / QPS / distance-computation sweeps and component ablations."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidParam, TruthMismatch
from .graph import BuildParams, PspIndex
from .oracle import metric_scores, _topk_row, recall_at_k
from .search import Searcher, SearchParams
from .vecstore import VectorStore, atomic_write

ROW_FIELDS = ("l_s", "aet", "recall", "qps", "mean_dc", "median_dc", "mean_hops", "p50_ns", "p99_ns",
              "mean_ns")


@dataclass
class BenchReport:
    dataset: str
    k: int
    rows: list = field(default_factory=list)
    build: dict = field(default_factory=dict)

    def off_rows(self):
        return [r for r in self.rows if r["aet"] == "off"]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)

    def write(self, out_dir, plot_data: bool = False):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [",".join(ROW_FIELDS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r[f]) for f in ROW_FIELDS))
        atomic_write(out / "report.csv", ("\n".join(lines) + "\n").encode())
        atomic_write(out / "report.json", self.to_json().encode())
        if plot_data:
            atomic_write(out / "plot_data.json", json.dumps(plot_series(self), indent=2).encode())


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _check_truth(queries, truth_ids, k):
    truth_ids = np.asarray(truth_ids)
    if truth_ids.ndim != 2 or truth_ids.shape[0] != len(queries):
        raise TruthMismatch(f"truth has {truth_ids.shape[0] if truth_ids.ndim else 0} rows for {len(queries)} queries")
    if truth_ids.shape[1] < k:
        raise TruthMismatch(f"truth holds {truth_ids.shape[1]} ids per query, need k={k}")
    return truth_ids[:, :k]


def _row(l_s, aet, traces, truth, wall):
    rec = float(np.mean([recall_at_k(t.result_ids, g) for t, g in zip(traces, truth)]))
    lat = np.array([t.wall_ns for t in traces], dtype=np.float64)
    dc = np.array([t.dc for t in traces], dtype=np.float64)
    return {"l_s": l_s, "aet": aet, "recall": rec, "qps": len(traces) / wall if wall > 0 else float("inf"),
            "mean_dc": float(dc.mean()), "median_dc": float(np.median(dc)),
            "mean_hops": float(np.mean([t.hops for t in traces])),
            "p50_ns": float(np.percentile(lat, 50)), "p99_ns": float(np.percentile(lat, 99)),
            "mean_ns": float(lat.mean())}


def run_sweep(index: PspIndex, queries, truth_ids, k: int, ls_list, aet_modes=("off",),
              entry_mode: str = "sn", seed: int = 0, dataset: str = "") -> BenchReport:
    """One row per (l_s, aet) pair; queries run one at a time on this thread."""
    queries = np.asarray(queries, dtype=np.float32)
    truth = _check_truth(queries, truth_ids, k)
    searcher = Searcher(index, seed)
    rows = []
    for ls in sorted(ls_list):
        for mode in aet_modes:
            if mode not in ("off", "on"):
                raise InvalidParam(f"aet mode must be 'on' or 'off', got {mode!r}")
            sp = SearchParams(l_s=ls, k=k, metric="ip", entry_mode=entry_mode, aet=mode == "on")
            t0 = time.perf_counter()
            traces = [searcher.search(q, sp, i) for i, q in enumerate(queries)]
            wall = time.perf_counter() - t0
            rows.append(_row(ls, mode, traces, truth, wall))
    build = {"degree_mean": float(index.graph.degrees().mean()),
             "degree_std": float(index.graph.degrees().std()),
             "build_seconds": float(index.report.get("build_seconds", 0.0)),
             "index_bytes": index_bytes(index)}
    return BenchReport(dataset, k, rows, build)


def index_bytes(index: PspIndex) -> int:
    from .indexio import encode_index
    return len(encode_index(index))


def brute_force_row(store: VectorStore, queries, truth_ids, k: int) -> dict:
    """Exhaustive scan as an index: recall 1 and dc = n by construction."""
    queries = np.asarray(queries, dtype=np.float32)
    truth = _check_truth(queries, truth_ids, k)
    lat = []
    recs = []
    t0 = time.perf_counter()
    for i, q in enumerate(queries):
        s = time.perf_counter_ns()
        top = _topk_row(metric_scores(store, q, "ip")[0], k)
        lat.append(time.perf_counter_ns() - s)
        recs.append(recall_at_k(top, truth[i]))
    wall = time.perf_counter() - t0
    lat = np.array(lat, dtype=np.float64)
    return {"l_s": store.count, "aet": "brute", "recall": float(np.mean(recs)), "qps": len(queries) / wall,
            "mean_dc": float(store.count), "median_dc": float(store.count), "mean_hops": 0.0,
            "p50_ns": float(np.percentile(lat, 50)), "p99_ns": float(np.percentile(lat, 99)),
            "mean_ns": float(lat.mean())}


def value_at_recall(rows, target: float, key: str = "mean_dc"):
    """Linear interpolation of ``key`` at the target recall along l_s-sorted rows.

    Returns None when the sweep never reaches the target.
    """
    pts = sorted(rows, key=lambda r: r["l_s"])
    prev = None
    for r in pts:
        if r["recall"] >= target:
            if prev is None or r["recall"] == prev["recall"]:
                return float(r[key])
            w = (target - prev["recall"]) / (r["recall"] - prev["recall"])
            return float(prev[key] + w * (r[key] - prev[key]))
        prev = r
    return None


def dc_at_recall(rows, target: float = 0.99, key: str = "mean_dc"):
    return value_at_recall(rows, target, key)


def recall_monotone_violations(rows) -> int:
    pts = sorted(rows, key=lambda r: r["l_s"])
    return sum(1 for a, b in zip(pts, pts[1:]) if b["recall"] < a["recall"])


def plot_series(report: BenchReport) -> dict:
    out = {}
    for mode in sorted({r["aet"] for r in report.rows}):
        rs = sorted((r for r in report.rows if r["aet"] == mode), key=lambda r: r["l_s"])
        out[mode] = {"recall": [r["recall"] for r in rs], "qps": [r["qps"] for r in rs],
                     "mean_dc": [r["mean_dc"] for r in rs], "l_s": [r["l_s"] for r in rs]}
    return out


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def ablation_matrix(store: VectorStore, queries, truth_ids, k: int, params: BuildParams | None = None,
                    ls_list=(100, 150, 200, 300, 400, 600), target: float = 0.99, seed: int = 0,
                    aet_model=None, knn=None, key: str = "median_dc") -> dict:
    """Variants {base, +EF, +SN, full, +AET} from one kNN bootstrap and seed.

    base = pruned graph with random entries; +EF adds refinement edges; +SN
    uses navigation entries; full has both. Each variant reports ``key`` and
    QPS interpolated at the target recall.
    """
    from .build import build_index
    from .knn_graph import build_knn

    params = (params or BuildParams()).validate()
    if knn is None:
        knn = build_knn(store, min(params.K, store.count - 1), seed=seed, iters=params.knn_iters,
                        sample_rate=params.sample_rate)
    no_ef = build_index(store, replace(params, S=0), seed=seed, knn=knn)
    with_ef = build_index(store, params, seed=seed, knn=knn)
    with_ef.aet = aet_model
    variants = {"base": (no_ef, "random", ("off",)), "+EF": (with_ef, "random", ("off",)),
                "+SN": (no_ef, "sn", ("off",)), "full": (with_ef, "sn", ("off",))}
    if aet_model is not None:
        variants["+AET"] = (with_ef, "sn", ("on",))
    out = {}
    for name, (idx, mode, aet) in variants.items():
        rep = run_sweep(idx, queries, truth_ids, k, ls_list, aet, entry_mode=mode, seed=seed, dataset=name)
        out[name] = {"rows": rep.rows, "dc_at_target": value_at_recall(rep.rows, target, key),
                     "qps_at_target": value_at_recall(rep.rows, target, "qps")}
    base = out["base"]
    for name, v in out.items():
        v["dc_improvement_vs_base"] = _delta(base["dc_at_target"], v["dc_at_target"])
        v["qps_ratio_vs_base"] = (v["qps_at_target"] / base["qps_at_target"]
                                  if v["qps_at_target"] and base["qps_at_target"] else None)
    if "+AET" in out:
        full_rows = {r["l_s"]: r for r in out["full"]["rows"]}
        out["+AET"]["recall_delta"] = [r["recall"] - full_rows[r["l_s"]]["recall"] for r in out["+AET"]["rows"]]
    out["_meta"] = {"target": target, "key": key, "k": k, "ls_list": list(ls_list), "seed": seed}
    return out


def _delta(ref, val):
    if ref is None or val is None:
        return None
    return ref - val
