"""Synthetic vector clouds for desk-scale experiments.

All generators draw from numpy's Philox counter-based bit generator keyed by
(seed, stream) so base and query sets come from independent streams of the
same law. Persist the output with ``write_fvecs`` when byte-stable inputs are
needed across numpy versions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam
from .vecstore import QuerySet, VectorStore

KINDS = ("gaussian", "lognormal-norm", "clustered", "sphere")
BASE_STREAM = 0
QUERY_STREAM = 1


@dataclass
class SynthSpec:
    kind: str = "gaussian"
    n: int = 10_000
    d: int = 16
    sigma2: float = 1.0
    seed: int = 0
    clusters: int = 32      # clustered kind
    norm_tail: float = 0.5  # lognormal-norm kind: sd of log radius
    spread: float = 3.0     # clustered kind: centroid scale relative to sigma

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidParam(f"unknown kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.n < 1 or self.d < 1:
            raise InvalidParam("n and d must be >= 1")
        if not self.sigma2 > 0:
            raise InvalidParam("sigma2 must be positive")
        if self.clusters < 1:
            raise InvalidParam("clusters must be >= 1")
        if self.norm_tail < 0:
            raise InvalidParam("norm_tail must be non-negative")
        return self


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, stream]))


def _unit(x: np.ndarray) -> np.ndarray:
    nr = np.linalg.norm(x, axis=1, keepdims=True)
    nr[nr == 0] = 1.0
    return x / nr


def sample(spec: SynthSpec, count: int, stream: int) -> np.ndarray:
    spec.validate()
    rng = rng_for(spec.seed, stream)
    sd = np.sqrt(spec.sigma2)
    d = spec.d
    if spec.kind == "gaussian":
        x = rng.standard_normal((count, d)) * sd
    elif spec.kind == "sphere":
        x = _unit(rng.standard_normal((count, d)))
    elif spec.kind == "lognormal-norm":
        # directions uniform on the sphere, radii with a long right tail
        radius = np.exp(rng.normal(0.0, spec.norm_tail, size=count)) * sd * np.sqrt(d)
        x = _unit(rng.standard_normal((count, d))) * radius[:, None]
    else:
        # centers come from a fixed stream so base and queries share them
        crng = rng_for(spec.seed, 1000)
        centers = crng.standard_normal((spec.clusters, d)) * sd * spec.spread / np.sqrt(d) * 2.0
        lab = rng.integers(spec.clusters, size=count)
        x = centers[lab] + rng.standard_normal((count, d)) * sd
    return x.astype(np.float32)


def generate(spec: SynthSpec, n_queries: int = 0):
    """Base store, plus a QuerySet from the same law when ``n_queries > 0``."""
    base = VectorStore(sample(spec, spec.n, BASE_STREAM))
    if n_queries <= 0:
        return base
    return base, QuerySet(sample(spec, n_queries, QUERY_STREAM))


def excess_kurtosis(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    z = (x - x.mean()) / x.std()
    return float(np.mean(z ** 4) - 3.0)
