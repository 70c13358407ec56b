"""Dense vector storage, metric kernels and texmex-style file IO.

Vectors are stored as float32; every kernel accumulates in float64 with a
fixed sequential summation order so scores are reproducible.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DimMismatch, EmptyFile, MalformedRecord, NonFiniteValue

METRICS = ("ip", "l2", "cosine")


@numba.njit(cache=True, fastmath=False)
def _dot(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        s += np.float64(a[i]) * np.float64(b[i])
    return s


@numba.njit(cache=True, fastmath=False)
def _sqdist(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        t = np.float64(a[i]) - np.float64(b[i])
        s += t * t
    return s


def _as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float32)
    if v.ndim != 1:
        raise DimMismatch(f"expected a 1-D vector, got shape {v.shape}")
    return v


def _check_pair(a, b):
    a, b = _as_vec(a), _as_vec(b)
    if a.shape[0] != b.shape[0]:
        raise DimMismatch(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def inner_product(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(_dot(a, b))


def l2_distance(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.sqrt(_sqdist(a, b)))


def squared_l2(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(_sqdist(a, b))


def norm(a) -> float:
    a = _as_vec(a)
    return float(np.sqrt(_dot(a, a)))


def cosine(a, b) -> float:
    a, b = _check_pair(a, b)
    na, nb = np.sqrt(_dot(a, a)), np.sqrt(_dot(b, b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(_dot(a, b) / (na * nb))


def row_norms(data: np.ndarray) -> np.ndarray:
    d64 = data.astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", d64, d64))


@dataclass(frozen=True, eq=False)
class VectorStore:
    """Immutable n x d float32 matrix with cached row norms."""

    data: np.ndarray
    norms: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[1] < 1:
            raise DimMismatch(f"vector data must be 2-D with d >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteValue("vector data contains NaN or Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        norms = self.norms
        if norms is None:
            norms = row_norms(data)
        norms = np.ascontiguousarray(norms, dtype=np.float64)
        norms.setflags(write=False)
        object.__setattr__(self, "norms", norms)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        return self.data[i]

    def subset(self, ids) -> "VectorStore":
        ids = np.asarray(ids, dtype=np.int64)
        return type(self)(self.data[ids], self.norms[ids])

    def check_dim(self, other_dim: int):
        if other_dim != self.dim:
            raise DimMismatch(f"dimension mismatch: store has d={self.dim}, got {other_dim}")


class QuerySet(VectorStore):
    def __post_init__(self):
        super().__post_init__()
        if self.count < 1:
            raise EmptyFile("query set is empty")


class CountedKernels:
    """Metric kernels against a store that count every base-vector evaluation.

    One instance per search session; the counter is never shared.
    """

    def __init__(self, store: VectorStore):
        self.store = store
        self.dc = 0

    def ip(self, i: int, q: np.ndarray) -> float:
        self.dc += 1
        return float(_dot(self.store.data[i], q))

    def l2(self, i: int, q: np.ndarray) -> float:
        self.dc += 1
        return float(np.sqrt(_sqdist(self.store.data[i], q)))

    def cosine(self, i: int, q: np.ndarray) -> float:
        self.dc += 1
        n = self.store.norms[i] * np.sqrt(_dot(q, q))
        return float(_dot(self.store.data[i], q) / n) if n > 0 else 0.0

    def score(self, i: int, q: np.ndarray, metric: str) -> float:
        """Larger-is-better score; l2 is negated distance."""
        if metric == "ip":
            return self.ip(i, q)
        if metric == "l2":
            return -self.l2(i, q)
        if metric == "cosine":
            return self.cosine(i, q)
        raise ValueError(f"unknown metric {metric!r}")

    def scan(self, q: np.ndarray, metric: str = "ip") -> np.ndarray:
        return np.array([self.score(i, q, metric) for i in range(self.store.count)])


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def atomic_write(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_records(path, item_dtype: np.dtype) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise EmptyFile(f"{path}: empty file")
    if raw.size < 4:
        raise MalformedRecord(f"{path}: truncated header")
    item = np.dtype(item_dtype).itemsize
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise MalformedRecord(f"{path}: record 0 declares dim {dim}")
    rec = 4 + dim * item
    nrec = raw.size // rec
    if nrec > 0:
        heads = raw[: nrec * rec].reshape(nrec, rec)[:, :4].copy().view("<i4").ravel()
        bad = np.flatnonzero(heads != dim)
        if bad.size:
            raise MalformedRecord(
                f"{path}: record {bad[0]} declares dim {heads[bad[0]]}, expected {dim}")
    if raw.size % rec:
        raise MalformedRecord(f"{path}: truncated record {nrec} ({raw.size % rec} trailing bytes)")
    body = raw.reshape(nrec, rec)[:, 4:]
    return np.ascontiguousarray(body).view(np.dtype(item_dtype).newbyteorder("<")).reshape(nrec, dim)


def read_fvecs(path) -> np.ndarray:
    return _read_records(path, np.float32).astype(np.float32)


def read_bvecs(path) -> np.ndarray:
    return _read_records(path, np.uint8).astype(np.float32)


def read_ivecs(path) -> np.ndarray:
    return _read_records(path, np.int32).astype(np.int32)


def load_fvecs(path) -> VectorStore:
    data = read_fvecs(path)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{path}: NaN or Inf component")
    return VectorStore(data)


def load_bvecs(path) -> VectorStore:
    return VectorStore(read_bvecs(path))


def load_vectors(path) -> VectorStore:
    """Dispatch on extension (.fvecs, .bvecs)."""
    if os.fspath(path).endswith(".bvecs"):
        return load_bvecs(path)
    return load_fvecs(path)


def _encode(arr: np.ndarray, dtype) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DimMismatch(f"expected a 2-D array, got shape {arr.shape}")
    n, d = arr.shape
    body = np.ascontiguousarray(arr.astype(dtype)).view(np.uint8).reshape(n, -1)
    rec = np.empty((n, 4 + body.shape[1]), dtype=np.uint8)
    rec[:, :4] = np.full((n, 1), d, dtype="<i4").view(np.uint8)
    rec[:, 4:] = body
    return rec.tobytes()


def write_fvecs(path, arr):
    atomic_write(path, _encode(arr, "<f4"))


def write_ivecs(path, arr):
    atomic_write(path, _encode(arr, "<i4"))


def write_bvecs(path, arr):
    atomic_write(path, _encode(arr, np.uint8))
