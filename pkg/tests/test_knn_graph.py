import numpy as np
import pytest

from pspindex.errors import InvalidParam, KTooLarge
from pspindex.knn_graph import (KnnGraph, build_exact_knn, build_nndescent_knn, knn_accuracy)
from pspindex.oracle import brute_topk_batch
from pspindex.vecstore import VectorStore

from conftest import gaussian_store


def test_collinear_points():
    s = VectorStore(np.array([[0.0], [1.0], [3.0]], dtype=np.float32))
    g = build_exact_knn(s, 1)
    assert g.ids[:, 0].tolist() == [1, 0, 1]


def test_unit_square():
    s = VectorStore(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=np.float32))
    g = build_exact_knn(s, 2)
    expect = {0: {1, 3}, 1: {0, 2}, 2: {1, 3}, 3: {0, 2}}
    for i in range(4):
        assert set(g.ids[i].tolist()) == expect[i]


def test_exact_matches_oracle():
    s = gaussian_store(2000, 16, seed=5)
    g = build_exact_knn(s, 32)
    truth = brute_topk_batch(s, s.data, 33, "l2")
    # drop the self match (distance 0, first by tie order)
    for i in range(s.count):
        row = [j for j in truth.ids[i] if j != i][:32]
        assert g.ids[i].tolist() == row


def test_rows_sorted_no_self_no_dup():
    s = gaussian_store(500, 8)
    g = build_exact_knn(s, 10)
    assert np.all(np.diff(g.dists, axis=1) >= 0)
    assert not np.any(g.ids == np.arange(500)[:, None])
    assert all(len(set(r)) == 10 for r in g.ids)


def test_k_too_large():
    with pytest.raises(KTooLarge):
        build_exact_knn(gaussian_store(5, 2), 5)


def test_nndescent_accuracy():
    s = gaussian_store(2000, 16, seed=11)
    g = build_nndescent_knn(s, 32, iters=10, seed=0)
    assert knn_accuracy(s, g, sample=500) >= 0.95


def test_nndescent_rejects_zero_iters():
    with pytest.raises(InvalidParam):
        build_nndescent_knn(gaussian_store(50, 4), 5, iters=0)


def test_nndescent_deterministic():
    s = gaussian_store(800, 8, seed=2)
    a = build_nndescent_knn(s, 10, iters=4, seed=3)
    b = build_nndescent_knn(s, 10, iters=4, seed=3)
    np.testing.assert_array_equal(a.ids, b.ids)
    np.testing.assert_array_equal(a.dists, b.dists)


def test_nndescent_accuracy_mostly_monotone_in_iters():
    s = gaussian_store(1500, 12, seed=4)
    inversions = 0
    for seed in range(3):
        accs = [knn_accuracy(s, build_nndescent_knn(s, 16, iters=it, seed=seed, delta=0.0), sample=300)
                for it in (1, 2, 4)]
        inversions += sum(1 for a, b in zip(accs, accs[1:]) if b < a)
    assert inversions <= 1


def test_nearest_neighbor_reaches_candidate_pool():
    # j = NN(i): the forward prune always keeps j, so i enters j's pool through the reverse link
    from pspindex.build import _reverse_csr, nssg_prune
    from pspindex.graph import BuildParams
    s = gaussian_store(2000, 8, seed=8)
    g = build_exact_knn(s, 12)
    fwd = nssg_prune(g, s, BuildParams(K=12, L=24, R=8, S=0, reverse_links=False))
    rev = _reverse_csr(fwd)
    two_hop = 0
    for i in range(2000):
        j = int(g.ids[i, 0])
        assert fwd.neighbors(i)[0] == j
        pool = set(fwd.neighbors(j).tolist()) | set(rev.neighbors(j).tolist())
        assert i in pool
        hop = set(g.ids[j].tolist())
        for x in g.ids[j]:
            hop.update(g.ids[x].tolist())
        two_hop += i in hop
    # the kNN 2-hop expansion alone already covers most pairs
    assert two_hop / 2000 >= 0.9


def test_cache_roundtrip(tmp_path):
    s = gaussian_store(100, 4)
    g = build_exact_knn(s, 5)
    g.save(tmp_path / "k.knn")
    h = KnnGraph.load(tmp_path / "k.knn")
    np.testing.assert_array_equal(g.ids, h.ids)
    np.testing.assert_array_equal(g.dists, h.dists)
