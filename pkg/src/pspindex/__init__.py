"""Graph index for maximum inner product search.

Angle-pruned proximity graph with inner-product refinement edges, a
spherical navigation layer for entry points, learned early termination, and
an experiment lab for the MIPS/NNS scaling equivalence.
"""

from .errors import PspError
from .graph import BuildParams, NavIvf, ProximityGraph, PspIndex
from .vecstore import QuerySet, VectorStore, load_fvecs, load_vectors, write_fvecs

__version__ = "0.1.0"

__all__ = ["BuildParams", "NavIvf", "ProximityGraph", "PspError", "PspIndex", "QuerySet",
           "VectorStore", "load_fvecs", "load_vectors", "write_fvecs", "__version__"]
