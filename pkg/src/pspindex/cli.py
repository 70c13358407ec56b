"""Command-line entry point: ``pspindex <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 data error, 4 internal invariant violation.
A ``--config`` file of ``key=value`` lines supplies defaults for the chosen
subcommand; explicit flags win over it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidParam, PspError, UsageError
from .vecstore import atomic_write

log = logging.getLogger("pspindex")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_plain)
    if out:
        atomic_write(out, (text + "\n").encode())
    else:
        print(text)


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _float_list(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def read_config(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _build_params(a):
    from .graph import BuildParams
    return BuildParams(K=a.K, L=a.L, R=a.R, alpha=a.alpha, S=a.S, c=a.c, m=a.m,
                       ef_guard=a.ef_guard).validate()


def _add_build_flags(p):
    p.add_argument("--K", type=int, default=400, help="kNN bootstrap width")
    p.add_argument("--L", type=int, default=800, help="pruning candidate pool size")
    p.add_argument("--R", type=int, default=40, help="max out-degree after pruning")
    p.add_argument("--alpha", type=float, default=60.0, help="minimum edge angle in degrees")
    p.add_argument("--S", type=int, default=5, help="edge-refinement quota per node")
    p.add_argument("--c", type=int, default=None, help="navigation clusters (default from n)")
    p.add_argument("--m", type=int, default=None, help="navigation nodes in total (default from n)")
    p.add_argument("--ef-guard", choices=("pairwise", "origin"), default="pairwise")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(a):
    from .synth import SynthSpec, generate
    from .vecstore import write_fvecs

    spec = SynthSpec(kind=a.kind, n=a.n, d=a.d, sigma2=a.sigma2, seed=a.seed, clusters=a.clusters,
                     norm_tail=a.norm_tail)
    if a.queries > 0:
        base, q = generate(spec, a.queries)
        write_fvecs(a.query_out or str(Path(a.out).with_suffix("")) + ".query.fvecs", q.data)
    else:
        base = generate(spec)
    write_fvecs(a.out, base.data)
    print(f"wrote {base.count} x {base.dim} {a.kind} vectors to {a.out}")


def cmd_gt(a):
    from .oracle import brute_topk_batch
    from .vecstore import load_vectors

    base = load_vectors(a.base)
    q = load_vectors(a.query)
    base.check_dim(q.dim)
    gt = brute_topk_batch(base, q.data, a.k, a.metric)
    gt.save(a.out)
    print(f"wrote top-{a.k} {a.metric} truth for {q.count} queries to {a.out}")


def cmd_build(a):
    from .build import build_index
    from .indexio import save_index
    from .vecstore import load_vectors

    store = load_vectors(a.base)
    index = build_index(store, _build_params(a), seed=a.seed)
    index.validate()
    save_index(index, a.out)
    rep = index.report
    print(f"built index n={store.count} d={store.dim} in {rep['build_seconds']:.1f}s; "
          f"degree mean {rep['degree']['mean']:.2f}; wrote {a.out}")


def cmd_train_aet(a):
    from .aet import train_aet
    from .indexio import load_index, save_index
    from .vecstore import load_vectors

    if a.index_in is None and a.base is None:
        raise UsageError("train-aet needs --base or --index-in")
    out = a.index_out or a.index_in
    if out is None:
        raise UsageError("train-aet needs --index-out when no --index-in is given")
    index = load_index(a.index_in) if a.index_in else None
    store = load_vectors(a.base) if a.base else index.store
    params = index.params if index is not None else _build_params(a)
    model, data = train_aet(store, params, k=a.k, l_s=a.ls, split=a.split, theta=a.theta,
                            sample_per_query=a.samples, seed=a.seed, max_queries=a.max_queries)
    if index is None:
        from .build import build_index
        index = build_index(store, params, seed=a.seed)
    index.aet = model
    save_index(index, out)
    print(f"trained tree with {model.size} nodes on {data.y.size} rows "
          f"({data.report['degenerate_queries']} degenerate queries); wrote {out}")


def cmd_search(a):
    from .indexio import load_index
    from .search import Searcher, SearchParams
    from .vecstore import load_vectors

    index = load_index(a.index)
    q = load_vectors(a.query)
    index.store.check_dim(q.dim)
    if a.aet == "on" and index.aet is None:
        raise UsageError("index has no early-termination model; run train-aet first")
    if a.theta is not None and index.aet is not None:
        index.aet = index.aet.with_theta(a.theta)
    sp = SearchParams(l_s=a.ls, k=a.k, metric=a.metric, entry_mode=a.entry, aet=a.aet == "on").validate()
    s = Searcher(index, a.seed)
    rows = []
    for i, vec in enumerate(q.data):
        tr = s.search(vec, sp, i)
        for r, (bid, sc) in enumerate(zip(tr.result_ids, tr.result_scores)):
            rows.append((i, r, int(bid), f"{float(sc):.7g}", tr.dc, tr.wall_ns))
    payload = _csv_bytes(("query_id", "rank", "base_id", "score", "dc", "wall_ns"), rows)
    if a.out:
        atomic_write(a.out, payload)
    else:
        sys.stdout.write(payload.decode())


def cmd_eval(a):
    from .bench import brute_force_row, run_sweep
    from .indexio import load_index
    from .vecstore import load_vectors, read_ivecs

    index = load_index(a.index)
    if a.base:
        base = load_vectors(a.base)
        if base.count != index.n or not np.array_equal(base.data, index.store.data):
            raise UsageError("--base does not match the vectors embedded in the index")
    q = load_vectors(a.query)
    index.store.check_dim(q.dim)
    truth = read_ivecs(a.gt)
    modes = {"both": ("off", "on"), "on": ("on",), "off": ("off",)}[a.aet]
    if "on" in modes and index.aet is None:
        raise UsageError("index has no early-termination model; use --aet off")
    rep = run_sweep(index, q.data, truth, a.k, a.ls, modes, seed=a.seed, dataset=Path(a.index).stem)
    if a.brute:
        rep.rows.append(brute_force_row(index.store, q.data, truth, a.k))
    rep.write(a.out_dir, plot_data=a.plot_data)
    for r in rep.rows:
        print(f"l_s={r['l_s']:<6} aet={r['aet']:<5} recall={r['recall']:.4f} qps={r['qps']:.1f} "
              f"dc={r['mean_dc']:.1f}")


def cmd_inspect(a):
    from .indexio import decode_index, inspect_index

    raw = Path(a.index).read_bytes()
    index = decode_index(raw)
    _emit(inspect_index(index, raw, seed=a.seed))


def cmd_export_rules(a):
    from .aet import export_rules
    from .indexio import load_index

    index = load_index(a.index)
    if index.aet is None:
        raise UsageError("index has no early-termination model")
    model = index.aet.with_theta(a.theta) if a.theta is not None else index.aet
    print(export_rules(model))


def cmd_theory(a):
    from . import theory
    from .vecstore import load_vectors

    if a.theory_cmd == "mu-bar":
        base = load_vectors(a.base)
        q = load_vectors(a.query)
        base.check_dim(q.dim)
        rows = []
        for i, vec in enumerate(q.data):
            rep = theory.compute_mu_bar(base, vec)
            chk = theory.verify_mu_grid(base, vec, rep)
            rows.append((i, f"{rep.mu_bar:.9g}", f"{rep.effective_lower:.9g}", rep.witness, rep.argsup,
                         int(chk["above_ok"]), int(chk["below_fails"]) if rep.mu_bar > 0 else ""))
        header = ("query_id", "mu_bar", "effective_lower", "witness", "argsup", "grid_ok", "below_fails")
        _write_table(a, header, rows, {"experiment": "mu-bar", "queries": q.count,
                                       "all_grid_ok": all(r[5] for r in rows), "grid": list(theory.MU_GRID)})
    elif a.theory_cmd == "overlap":
        base = load_vectors(a.base)
        q = load_vectors(a.query)
        rep = theory.overlap_experiment(base, q.data[:a.max_queries], a.mus, a.max_steps, ideal=not a.pruned,
                                        k=a.k, l_s=a.ls, seed=a.seed)
        rows = [(r["mu"], f"{r['overlap']:.6f}", f"{r['recall']:.6f}") for r in rep.rows()]
        _write_table(a, ("mu", "overlap", "recall"), rows, {"experiment": "overlap", "spearman": rep.spearman,
                                                            **rep.meta})
    elif a.theory_cmd == "qs":
        grid = np.asarray(a.s) if a.s else theory.default_s_grid(a.d, a.sigma2, a.points)
        rep = theory.qs_report(a.d, a.sigma2, grid, a.trials, a.seed)
        rows = [(f"{r['s']:.6g}", f"{r['q_2sigma2']:.6f}", f"{r['q_4sigma2']:.6f}", f"{r['q_mc']:.6f}",
                 f"{r['mc_se']:.6f}") for r in rep.rows()]
        _write_table(a, ("s", "q_2sigma2", "q_4sigma2", "q_mc", "mc_se"), rows,
                     {"experiment": "qs", "seed": a.seed, **rep.summary()})
    elif a.theory_cmd == "kmips-overlap":
        base = load_vectors(a.base)
        q = load_vectors(a.query)
        med = theory.median_pairwise_sqdist(base, seed=a.seed)
        grid = np.asarray(a.s) if a.s else np.linspace(0.0, med, a.points + 1)[1:]
        ov = theory.kmips_neighborhood_overlap(base, q.data, a.k, grid)
        rows = [(f"{s:.6g}", f"{v:.6f}") for s, v in zip(grid, ov)]
        _write_table(a, ("s", "overlap"), rows, {"experiment": "kmips-overlap", "k": a.k,
                                                 "median_pairwise_sqdist": med})
    elif a.theory_cmd == "hop-scaling":
        from .synth import SynthSpec, generate, sample, QUERY_STREAM
        stores = {n: generate(SynthSpec(kind=a.kind, n=n, d=a.d, seed=a.seed)) for n in a.sizes}
        queries = sample(SynthSpec(kind=a.kind, n=1, d=a.d, seed=a.seed), a.queries, QUERY_STREAM)
        rows = theory.hop_scaling(stores, queries, _build_params(a), ks=(1, 100), target=a.target, seed=a.seed)
        table = [(r["n"], r["k"], r["l_s"], f"{r['recall']:.4f}", f"{r['hops']:.2f}", f"{r['query_us']:.1f}")
                 for r in rows]
        _write_table(a, ("n", "k", "l_s", "recall", "hops", "query_us"), table,
                     {"experiment": "hop-scaling", "ratios_top1": theory.hop_ratios(rows, 1),
                      "target": a.target, "seed": a.seed})


def _write_table(a, header, rows, summary):
    payload = _csv_bytes(header, rows)
    if a.out:
        atomic_write(a.out, payload)
        _emit(summary, str(Path(a.out).with_suffix(".json")))
    else:
        sys.stdout.write(payload.decode())
    _emit(summary)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="pspindex", description="Graph index for maximum inner product search.",
                                  allow_abbrev=False)
    top.add_argument("--seed", type=int, default=0)
    top.add_argument("--threads", type=int, default=1, help="worker count (kernels are single-threaded)")
    top.add_argument("--verbosity", "-v", action="count", default=0)
    top.add_argument("--config", help="key=value file of defaults for the subcommand")
    sub = top.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=("gaussian", "lognormal-norm", "clustered", "sphere"), default="gaussian")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--clusters", type=int, default=32)
    p.add_argument("--norm-tail", type=float, default=0.5)
    p.add_argument("--queries", type=int, default=0, help="also write this many queries from the same law")
    p.add_argument("--query-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gt", help="brute-force ground truth (ivecs)")
    p.add_argument("--base", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--metric", choices=("ip", "l2", "cosine"), default="ip")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gt)

    p = sub.add_parser("build", help="build an index file")
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    _add_build_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train-aet", help="train the early-termination model and embed it in an index")
    p.add_argument("--base")
    p.add_argument("--split", type=float, default=0.9)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--ls", type=int, default=800)
    p.add_argument("--theta", type=float, default=2.0)
    p.add_argument("--samples", type=int, default=8, help="rows per side per query")
    p.add_argument("--max-queries", type=int, default=1000)
    p.add_argument("--index-in")
    p.add_argument("--index-out")
    _add_build_flags(p)
    p.set_defaults(func=cmd_train_aet)

    p = sub.add_parser("search", help="query an index; CSV output")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--ls", type=int, default=200)
    p.add_argument("--metric", choices=("ip", "l2", "cosine"), default="ip")
    p.add_argument("--entry", choices=("sn", "random"), default="sn")
    p.add_argument("--aet", choices=("on", "off"), default="off")
    p.add_argument("--theta", type=float, default=None, help="override the stored stop ratio")
    p.add_argument("--out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="recall/QPS/dc sweep over l_s")
    p.add_argument("--index", required=True)
    p.add_argument("--base")
    p.add_argument("--query", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--ls", type=_int_list, default=[100, 200, 400])
    p.add_argument("--aet", choices=("both", "on", "off"), default="off")
    p.add_argument("--brute", action="store_true", help="append an exhaustive-scan row")
    p.add_argument("--plot-data", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print index statistics")
    p.add_argument("--index", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("aet", help="early-termination model tools")
    asub = p.add_subparsers(dest="aet_cmd", required=True)
    e = asub.add_parser("export-rules", help="print the stop rules in clause form")
    e.add_argument("--index", required=True)
    e.add_argument("--theta", type=float, default=None)
    e.set_defaults(func=cmd_export_rules)

    p = sub.add_parser("theory", help="scaling-equivalence experiments")
    tsub = p.add_subparsers(dest="theory_cmd", required=True)
    t = tsub.add_parser("mu-bar")
    t.add_argument("--base", required=True)
    t.add_argument("--query", required=True)
    t.add_argument("--out")
    t = tsub.add_parser("overlap")
    t.add_argument("--base", required=True)
    t.add_argument("--query", required=True)
    t.add_argument("--mus", type=_float_list, default=[0.1, 1.0, 10.0, 100.0, 1200.0])
    t.add_argument("--max-steps", type=int, default=15)
    t.add_argument("--max-queries", type=int, default=200)
    t.add_argument("--k", type=int, default=100)
    t.add_argument("--ls", type=int, default=200)
    t.add_argument("--pruned", action="store_true", help="use a default pruned index instead of the exhaustive one")
    t.add_argument("--out")
    t = tsub.add_parser("qs")
    t.add_argument("--d", type=int, default=8)
    t.add_argument("--sigma2", type=float, default=1.0)
    t.add_argument("--s", type=_float_list, default=None)
    t.add_argument("--points", type=int, default=10)
    t.add_argument("--trials", type=int, default=1_000_000)
    t.add_argument("--out")
    t = tsub.add_parser("kmips-overlap")
    t.add_argument("--base", required=True)
    t.add_argument("--query", required=True)
    t.add_argument("--k", type=int, default=100)
    t.add_argument("--s", type=_float_list, default=None)
    t.add_argument("--points", type=int, default=20)
    t.add_argument("--out")
    t = tsub.add_parser("hop-scaling")
    t.add_argument("--kind", choices=("gaussian", "lognormal-norm", "clustered", "sphere"), default="gaussian")
    t.add_argument("--sizes", type=_int_list, default=[10_000, 100_000, 1_000_000])
    t.add_argument("--d", type=int, default=16)
    t.add_argument("--queries", type=int, default=200)
    t.add_argument("--target", type=float, default=0.95)
    t.add_argument("--out")
    _add_build_flags(t)
    p.set_defaults(func=cmd_theory)
    return top


def _leaf_parser(parser, argv):
    """The (sub)parser selected by the positional words in ``argv``."""
    p = parser
    path = []
    for tok in argv:
        subs = [a for a in p._actions if isinstance(a, argparse._SubParsersAction)]
        if subs and tok in subs[0].choices:
            p = subs[0].choices[tok]
            path.append(tok)
    return p, " ".join(path)


def _config_path(argv):
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def _apply_config(parser, argv, path):
    """Install config values as defaults so explicit flags still override them."""
    cfg = read_config(path)
    leaf, name = _leaf_parser(parser, argv)
    acts = {a.dest: a for a in leaf._actions if a.dest != "help"} if leaf is not parser else {}
    top = {a.dest: a for a in parser._actions if a.dest not in ("help", "cmd", "config")}
    for key, val in cfg.items():
        act = acts.get(key) or top.get(key)
        if act is None or isinstance(act, argparse._SubParsersAction):
            raise UsageError(f"unknown config key {key!r} for '{name or 'pspindex'}'")
        if isinstance(act, argparse._CountAction):
            conv = int
        elif isinstance(act, argparse._StoreTrueAction):
            conv = lambda s: s.lower() in ("1", "true", "yes", "on")  # noqa: E731
        else:
            conv = act.type or (lambda s: s)
        try:
            value = conv(val)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None
        if act.choices is not None and value not in act.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {sorted(act.choices)}")
        act.default = value
        act.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        cfg = _config_path(argv)
        if cfg:
            _apply_config(parser, argv, cfg)
    except PspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        level = logging.WARNING - 10 * min(args.verbosity, 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except PspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return 3
    except Exception as exc:  # surfaced as an internal failure, still one line
        print(f"error: internal failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
