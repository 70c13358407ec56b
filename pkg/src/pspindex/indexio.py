"""PSP1 index file: magic, version, then CRC32-checked sections.

    "PSP1" | u16 version | section*

Each section is ``tag[4] | u64 length | u32 crc32(tag+length+payload) | payload``.
Sections, in order: HEAD, PARM, GRPH, NAVI, VECS, then optional AETM.
Every loader failure surfaces as a DataError subclass, never a raw crash.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import deque
from dataclasses import asdict

import numpy as np

from .aet import AetModel
from .errors import BadMagic, ChecksumMismatch, DataError, MalformedRecord, VersionUnsupported
from .graph import BuildParams, NavIvf, ProximityGraph, PspIndex
from .vecstore import VectorStore, atomic_write

MAGIC = b"PSP1"
VERSION = 1
_SEC = struct.Struct("<4sQ")
_HEAD = struct.Struct("<7q")
REQUIRED = (b"HEAD", b"PARM", b"GRPH", b"NAVI", b"VECS")


def _section(tag: bytes, payload: bytes) -> bytes:
    head = _SEC.pack(tag, len(payload))
    crc = zlib.crc32(head + payload) & 0xFFFFFFFF
    return head + struct.pack("<I", crc) + payload


def _params_json(p: BuildParams) -> bytes:
    return json.dumps(asdict(p), sort_keys=True, separators=(",", ":")).encode()


def encode_index(index: PspIndex) -> bytes:
    store, g, nav, p = index.store, index.graph, index.nav, index.params
    c, m = p.resolved_nav(store.count)
    head = _HEAD.pack(store.count, store.dim, p.R, p.S, nav.c, m, int(round(p.alpha * 1000)))
    lens = np.array([len(x) for x in nav.lists], dtype=np.int64)
    loff = np.zeros(nav.c + 1, dtype="<i8")
    np.cumsum(lens, out=loff[1:])
    navb = (struct.pack("<II", nav.c, store.dim) + nav.centroids.astype("<f4").tobytes()
            + loff.tobytes() + nav.all_ids().astype("<i4").tobytes())
    parts = [MAGIC, struct.pack("<H", VERSION),
             _section(b"HEAD", head),
             _section(b"PARM", _params_json(p)),
             _section(b"GRPH", g.offsets.astype("<i8").tobytes() + g.nbrs.astype("<i4").tobytes()),
             _section(b"NAVI", navb),
             _section(b"VECS", store.data.astype("<f4").tobytes())]
    if index.aet is not None:
        parts.append(_section(b"AETM", index.aet.to_bytes()))
    return b"".join(parts)


def save_index(index: PspIndex, path):
    atomic_write(path, encode_index(index))


def split_sections(raw: bytes) -> dict[bytes, bytes]:
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise BadMagic("not a PSP1 index file")
    (ver,) = struct.unpack_from("<H", raw, 4)
    if ver != VERSION:
        raise VersionUnsupported(f"index version {ver} is not supported (expected {VERSION})")
    pos = 6
    out: dict[bytes, bytes] = {}
    while pos < len(raw):
        if pos + _SEC.size + 4 > len(raw):
            raise ChecksumMismatch("truncated section header")
        tag, length = _SEC.unpack_from(raw, pos)
        (crc,) = struct.unpack_from("<I", raw, pos + _SEC.size)
        start = pos + _SEC.size + 4
        if length > len(raw) - start:
            raise ChecksumMismatch(f"section {tag!r} runs past end of file")
        payload = raw[start:start + length]
        if zlib.crc32(raw[pos:pos + _SEC.size] + payload) & 0xFFFFFFFF != crc:
            raise ChecksumMismatch(f"section {tag!r} fails its checksum")
        if tag in out:
            raise ChecksumMismatch(f"duplicate section {tag!r}")
        out[tag] = payload
        pos = start + length
    missing = [t for t in REQUIRED if t not in out]
    if missing:
        raise ChecksumMismatch(f"missing sections: {b', '.join(missing).decode(errors='replace')}")
    return out


def _frombuf(buf, dtype, count, offset, what):
    need = np.dtype(dtype).itemsize * count
    if count < 0 or offset + need > len(buf):
        raise MalformedRecord(f"{what} section is too short")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def decode_index(raw: bytes) -> PspIndex:
    sec = split_sections(raw)
    try:
        return _decode(sec)
    except DataError:
        raise
    except (ValueError, TypeError, KeyError, struct.error, OverflowError, MemoryError) as exc:
        raise MalformedRecord(f"index content is inconsistent: {exc}") from None


def _decode(sec) -> PspIndex:
    if len(sec[b"HEAD"]) != _HEAD.size:
        raise MalformedRecord("HEAD section has the wrong size")
    n, d, R, S, c, m, alpha_md = _HEAD.unpack(sec[b"HEAD"])
    if n < 1 or d < 1 or c < 0:
        raise MalformedRecord("HEAD section holds invalid sizes")
    pj = json.loads(sec[b"PARM"].decode())
    params = BuildParams(**pj)
    if params.R != R or params.S != S or int(round(params.alpha * 1000)) != alpha_md:
        raise MalformedRecord("PARM and HEAD disagree")

    gb = sec[b"GRPH"]
    offsets = _frombuf(gb, "<i8", n + 1, 0, "GRPH").astype(np.int64)
    e = int(offsets[-1])
    if len(gb) != 8 * (n + 1) + 4 * e:
        raise MalformedRecord("GRPH length does not match its offsets")
    nbrs = _frombuf(gb, "<i4", e, 8 * (n + 1), "GRPH").astype(np.int32)
    graph = ProximityGraph(offsets, nbrs)

    nb = sec[b"NAVI"]
    nc, nd = struct.unpack_from("<II", nb, 0) if len(nb) >= 8 else (None, None)
    if nc != c or nd != d:
        raise MalformedRecord("NAVI header disagrees with HEAD")
    pos = 8
    cent = _frombuf(nb, "<f4", c * d, pos, "NAVI").reshape(c, d).astype(np.float32)
    pos += 4 * c * d
    loff = _frombuf(nb, "<i8", c + 1, pos, "NAVI").astype(np.int64)
    pos += 8 * (c + 1)
    if loff[0] != 0 or np.any(np.diff(loff) < 0) or len(nb) != pos + 4 * int(loff[-1]):
        raise MalformedRecord("NAVI list offsets are inconsistent")
    ids = _frombuf(nb, "<i4", int(loff[-1]), pos, "NAVI").astype(np.int32)
    nav = NavIvf(cent, [ids[loff[j]:loff[j + 1]].copy() for j in range(c)])

    vb = sec[b"VECS"]
    if len(vb) != 4 * n * d:
        raise MalformedRecord("VECS length does not match n*d")
    store = VectorStore(_frombuf(vb, "<f4", n * d, 0, "VECS").reshape(n, d))

    aet = AetModel.from_bytes(sec[b"AETM"]) if b"AETM" in sec else None
    index = PspIndex(store, graph, nav, params, aet, {})
    try:
        graph.validate(params.degree_cap)
        nav.validate(n)
    except Exception as exc:
        raise MalformedRecord(f"index structure invalid: {exc}") from None
    return index


def load_index(path) -> PspIndex:
    with open(path, "rb") as f:
        return decode_index(f.read())


def section_sizes(raw: bytes) -> dict[str, int]:
    return {t.decode(): len(p) for t, p in split_sections(raw).items()}


# ---------------------------------------------------------------------------
# structural statistics
# ---------------------------------------------------------------------------

def clustering_coefficient(graph: ProximityGraph, sample: int = 1000, seed: int = 0) -> float:
    """Mean local clustering over sampled nodes (undirected view)."""
    n = graph.n
    rng = np.random.default_rng(seed)
    nodes = rng.choice(n, size=min(sample, n), replace=False)
    src = np.repeat(np.arange(n), graph.degrees())
    undirected: dict[int, set] = {}
    pairs = set(zip(src.tolist(), graph.nbrs.tolist()))
    for a, b in pairs:
        undirected.setdefault(a, set()).add(b)
        undirected.setdefault(b, set()).add(a)
    vals = []
    for u in nodes.tolist():
        nb = list(undirected.get(u, ()))
        k = len(nb)
        if k < 2:
            vals.append(0.0)
            continue
        links = sum(1 for i in range(k) for j in range(i + 1, k) if nb[j] in undirected.get(nb[i], ()))
        vals.append(2.0 * links / (k * (k - 1)))
    return float(np.mean(vals))


def bfs_hops(graph: ProximityGraph, sources) -> np.ndarray:
    """Directed multi-source BFS depth per node (-1 when unreachable)."""
    dist = np.full(graph.n, -1, dtype=np.int64)
    dq = deque()
    for s in np.asarray(sources, dtype=np.int64).tolist():
        if dist[s] < 0:
            dist[s] = 0
            dq.append(s)
    off, nb = graph.offsets, graph.nbrs
    while dq:
        u = dq.popleft()
        for v in nb[off[u]:off[u + 1]].tolist():
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                dq.append(v)
    return dist


def inspect_index(index: PspIndex, raw: bytes | None = None, sample: int = 1000, seed: int = 0) -> dict:
    g = index.graph
    deg = g.degrees()
    rng = np.random.default_rng(seed)
    hops = bfs_hops(g, index.nav.all_ids())
    tgt = rng.choice(g.n, size=min(sample, g.n), replace=False)
    th = hops[tgt]
    th = th[th >= 0]
    out = {"n": index.n, "d": index.store.dim, "edges": g.n_edges,
           "degree_mean": float(deg.mean()), "degree_std": float(deg.std()), "degree_max": int(deg.max()),
           "degree_cap": index.params.degree_cap,
           "clustering_coefficient": clustering_coefficient(g, sample, seed),
           "shortest_path_mean": float(th.mean()) if th.size else float("nan"),
           "shortest_path_std": float(th.std()) if th.size else float("nan"),
           "reachable_fraction": float((hops >= 0).mean()),
           "nav_clusters": index.nav.c, "nav_nodes": int(index.nav.all_ids().size),
           "aet": index.aet is not None}
    if raw is not None:
        out["sections"] = section_sizes(raw)
    return out
