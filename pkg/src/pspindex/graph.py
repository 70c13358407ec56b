"""Index data structures shared by build, search and persistence."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import InvariantViolation, InvalidParam
from .vecstore import VectorStore

UNBOUNDED = 2**31 - 1


@dataclass
class BuildParams:
    K: int = 400
    L: int = 800
    R: int = 40
    alpha: float = 60.0
    S: int = 5
    c: int | None = None
    m: int | None = None
    ef_guard: str = "pairwise"
    reverse_links: bool = True
    knn_iters: int = 12
    sample_rate: float = 0.3

    def validate(self):
        if self.K < 1 or self.L < 1 or self.R < 1:
            raise InvalidParam("K, L and R must be positive")
        if self.L < self.R and self.R != UNBOUNDED:
            raise InvalidParam(f"L={self.L} must be >= R={self.R}")
        if not 0.0 < self.alpha < 180.0:
            raise InvalidParam(f"alpha must lie in (0, 180), got {self.alpha}")
        if self.S < 0:
            raise InvalidParam("S must be non-negative")
        if self.ef_guard not in ("pairwise", "origin"):
            raise InvalidParam(f"unknown ef_guard {self.ef_guard!r}")
        if self.c is not None and self.m is not None and not 1 <= self.c <= self.m:
            raise InvalidParam(f"need 1 <= c <= m, got c={self.c}, m={self.m}")
        return self

    def resolved_nav(self, n: int) -> tuple[int, int]:
        """SN cluster count and sample total, defaulted from n when unset."""
        c = self.c if self.c is not None else (64 if n >= 100_000 else max(8, n // 16384))
        m = self.m if self.m is not None else (4096 if n >= 100_000 else min(4096, max(16 * c, n // 32)))
        c = min(c, n)
        m = min(max(m, c), n)
        return c, m

    @property
    def degree_cap(self) -> int:
        return UNBOUNDED if self.R >= UNBOUNDED - self.S else self.R + self.S


@numba.njit(cache=True)
def _bfs(offsets, nbrs, seeds, seen):
    stack = np.empty(offsets.shape[0] - 1, dtype=np.int64)
    top = 0
    for s in seeds:
        if not seen[s]:
            seen[s] = True
            stack[top] = s
            top += 1
    count = top
    while top > 0:
        top -= 1
        u = stack[top]
        for e in range(offsets[u], offsets[u + 1]):
            v = nbrs[e]
            if not seen[v]:
                seen[v] = True
                stack[top] = v
                top += 1
                count += 1
    return count


@dataclass
class ProximityGraph:
    """Directed graph in CSR form; neighbor order is insertion order."""

    offsets: np.ndarray  # (n+1,) int64
    nbrs: np.ndarray     # (E,) int32

    @property
    def n(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def n_edges(self) -> int:
        return int(self.offsets[-1])

    def neighbors(self, i: int) -> np.ndarray:
        return self.nbrs[self.offsets[i]:self.offsets[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def to_lists(self) -> list[list[int]]:
        return [self.neighbors(i).tolist() for i in range(self.n)]

    @classmethod
    def from_lists(cls, lists) -> "ProximityGraph":
        deg = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
        offsets = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum(deg, out=offsets[1:])
        nbrs = np.fromiter((v for x in lists for v in x), dtype=np.int32, count=int(offsets[-1]))
        return cls(offsets, nbrs)

    def reachable(self, seeds) -> np.ndarray:
        seen = np.zeros(self.n, dtype=np.bool_)
        _bfs(self.offsets, self.nbrs, np.asarray(seeds, dtype=np.int64), seen)
        return seen

    def validate(self, cap: int | None = None):
        n = self.n
        if self.offsets[0] != 0 or np.any(np.diff(self.offsets) < 0):
            raise InvariantViolation("CSR offsets are not monotone from 0")
        if self.nbrs.size != self.offsets[-1]:
            raise InvariantViolation("CSR edge array length does not match offsets")
        if self.nbrs.size and (self.nbrs.min() < 0 or self.nbrs.max() >= n):
            raise InvariantViolation("edge target out of range")
        deg = self.degrees()
        if cap is not None and deg.size and deg.max() > cap:
            raise InvariantViolation(f"out-degree {deg.max()} exceeds cap {cap}")
        src = np.repeat(np.arange(n), deg)
        if np.any(src == self.nbrs):
            raise InvariantViolation("self-loop present")
        key = src.astype(np.int64) * n + self.nbrs
        if np.unique(key).size != key.size:
            raise InvariantViolation("duplicate edge present")


@dataclass
class NavIvf:
    """Normalized centroids keyed to inverted lists of navigation node ids."""

    centroids: np.ndarray  # (c, d) float32, unit norm
    lists: list[np.ndarray]

    @property
    def c(self) -> int:
        return self.centroids.shape[0]

    def all_ids(self) -> np.ndarray:
        if not self.lists:
            return np.empty(0, dtype=np.int32)
        return np.concatenate(self.lists).astype(np.int32)

    def validate(self, n: int, m: int | None = None):
        norms = np.linalg.norm(self.centroids.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise InvariantViolation("centroid not unit norm")
        if len(self.lists) != self.c:
            raise InvariantViolation("centroid count does not match list count")
        ids = self.all_ids()
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise InvariantViolation("navigation id out of range")
        if np.unique(ids).size != ids.size:
            raise InvariantViolation("inverted lists are not disjoint")
        if m is not None and self.c:
            cap = -(-m // self.c)
            if any(len(x) > cap for x in self.lists):
                raise InvariantViolation(f"inverted list longer than ceil(m/c)={cap}")


@dataclass
class PspIndex:
    store: VectorStore
    graph: ProximityGraph
    nav: NavIvf
    params: BuildParams
    aet: object | None = None
    report: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.store.count

    def validate(self):
        self.graph.validate(self.params.degree_cap)
        c, m = self.params.resolved_nav(self.n)
        self.nav.validate(self.n, m)
        if self.graph.n != self.store.count:
            raise InvariantViolation("graph and store sizes differ")
        return self
