import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dacl.density import (ClassEmbedding, Origin, ScaleSet, compactness_report, density_multi_scale,
                          density_single_scale, knn_graph)
from dacl.errors import ConfigError, ContractError, EmptyPoolError, UndefinedMetricError

from conftest import unit_rows


def embs(vecs, start=0, cls=1):
    return [ClassEmbedding(v, cls, seq_id=start + i) for i, v in enumerate(vecs)]


def oracle_density(qv, qi, pv, pi, ks):
    """All-pairs python sort: (-similarity, seq_id), self removed, k capped."""
    out = []
    for x, sid in zip(qv, qi):
        cands = sorted((-float(np.dot(x, y)), int(j)) for y, j in zip(pv, pi) if j != sid)
        per_k = [np.mean([-s for s, _ in cands[:min(k, len(cands))]]) for k in ks]
        out.append(np.mean(per_k))
    return np.array(out)


def test_three_point_example():
    # two identical vectors and one orthogonal one, k=1
    v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    pool = embs(v)
    d = density_single_scale(knn_graph(pool, pool, 1))
    np.testing.assert_allclose(d, [1.0, 1.0, 0.0])


def test_self_is_excluded_even_when_vector_is_duplicated():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    pool = embs(v)
    g = knn_graph(pool[:1], pool, 1)
    assert g.indices[0, 0] == 1


def test_ties_break_by_smaller_seq_id():
    v = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
    pool = [ClassEmbedding(v[0], 1, seq_id=0), ClassEmbedding(v[1], 1, seq_id=9),
            ClassEmbedding(v[2], 1, seq_id=4), ClassEmbedding(v[3], 1, seq_id=7)]
    g = knn_graph(pool[:1], pool, 2)
    assert [pool[i].seq_id for i in g.indices[0]] == [4, 7]


def test_k_is_capped_by_pool_size():
    v = unit_rows(np.random.default_rng(0), 3, 4)
    pool = embs(v)
    g = knn_graph(pool, pool, 10)
    assert g.counts.tolist() == [2, 2, 2]


def test_empty_pool_and_isolated_query():
    v = unit_rows(np.random.default_rng(0), 1, 4)
    with pytest.raises(EmptyPoolError):
        knn_graph(embs(v), [], 3)
    lone = embs(v)
    with pytest.raises(ContractError):
        density_single_scale(knn_graph(lone, lone, 3))


def test_unnormalized_vectors_rejected():
    pool = embs(np.array([[2.0, 0.0], [0.0, 1.0]]))
    with pytest.raises(ContractError):
        knn_graph(pool, pool, 1)


def test_scale_set_validation():
    assert list(ScaleSet((4, 8, 16))) == [4, 8, 16]
    for bad in [(), (4, 4), (8, 4), (0, 2)]:
        with pytest.raises((ConfigError, ContractError)):
            ScaleSet(bad)


def test_single_scale_equals_one_element_multi_scale(rng):
    pool = embs(unit_rows(rng, 30, 6))
    a = density_single_scale(knn_graph(pool, pool, 8))
    b = density_multi_scale(pool, pool, (8,))
    np.testing.assert_array_equal(a, b)


def test_multi_scale_is_mean_of_single_scales(rng):
    pool = embs(unit_rows(rng, 40, 5))
    per = [density_single_scale(knn_graph(pool, pool, k)) for k in (4, 8, 16)]
    np.testing.assert_allclose(density_multi_scale(pool, pool, (4, 8, 16)), np.mean(per, axis=0),
                               atol=1e-15)


def test_matches_all_pairs_oracle_on_union_pool(rng):
    bank = embs(unit_rows(rng, 50, 8), start=0)
    batch = embs(unit_rows(rng, 12, 8), start=100)
    got = density_multi_scale(batch, bank + batch, (4, 8, 16))
    want = oracle_density(np.stack([e.vector for e in batch]), [e.seq_id for e in batch],
                          np.stack([e.vector for e in bank + batch]),
                          [e.seq_id for e in bank + batch], (4, 8, 16))
    assert np.max(np.abs(got - want)) < 1e-12


@given(st.integers(2, 60), st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_densities_are_bounded_and_permutation_invariant(n, d, seed):
    r = np.random.default_rng(seed)
    pool = embs(unit_rows(r, n, d))
    dens = density_multi_scale(pool, pool, (4, 8, 16))
    assert np.all(dens <= 1 + 1e-12) and np.all(dens >= -1 - 1e-12)
    perm = r.permutation(n)
    shuffled = [pool[i] for i in perm]
    dens2 = density_multi_scale(shuffled, shuffled, (4, 8, 16))
    np.testing.assert_array_equal(dens2, dens[perm])


@given(st.integers(0, 2**32 - 1))
def test_single_scale_density_is_non_increasing_in_k(seed):
    r = np.random.default_rng(seed)
    pool = embs(unit_rows(r, 25, 4))
    prev = None
    for k in range(1, 24):
        cur = density_single_scale(knn_graph(pool, pool, k))
        if prev is not None:
            assert np.all(cur <= prev + 1e-12)
        prev = cur


def test_pulling_a_point_into_its_cluster_raises_its_density(rng):
    base = np.array([1.0, 0.0, 0.0])
    cluster = unit_rows(rng, 10, 3) * 0.1 + base
    cluster /= np.linalg.norm(cluster, axis=1, keepdims=True)
    far = np.array([0.0, 1.0, 0.0])
    near = base + 0.05 * far
    near /= np.linalg.norm(near)
    for probe, expect_high in [(far, False), (near, True)]:
        pool = embs(np.vstack([cluster, probe]))
        d = density_multi_scale(pool[-1:], pool, (4,))[0]
        assert (d > 0.9) == expect_high


def brute_silhouette(X, labels):
    n = len(X)
    D = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    s = []
    for i in range(n):
        same = (labels == labels[i]) & (np.arange(n) != i)
        if not same.any():
            s.append(0.0)
            continue
        a = D[i, same].mean()
        b = min(D[i, labels == c].mean() for c in np.unique(labels) if c != labels[i])
        s.append((b - a) / max(a, b))
    return float(np.mean(s))


def brute_davies_bouldin(X, labels):
    cls = np.unique(labels)
    cents = np.stack([X[labels == c].mean(0) for c in cls])
    spread = np.array([np.linalg.norm(X[labels == c] - cents[k], axis=1).mean() for k, c in enumerate(cls)])
    worst = []
    for i in range(len(cls)):
        worst.append(max((spread[i] + spread[j]) / np.linalg.norm(cents[i] - cents[j])
                         for j in range(len(cls)) if j != i))
    return float(np.mean(worst))


def test_compactness_matches_brute_force(rng):
    X = unit_rows(rng, 30, 5)
    labels = np.repeat([0, 1, 2], 10)
    items = [ClassEmbedding(x, int(c), seq_id=i) for i, (x, c) in enumerate(zip(X, labels))]
    rep = compactness_report(items, predicted=labels)
    assert rep["silhouette"] == pytest.approx(brute_silhouette(X, labels), abs=1e-12)
    assert rep["davies_bouldin"] == pytest.approx(brute_davies_bouldin(X, labels), abs=1e-12)
    assert rep["v_measure"] == pytest.approx(1.0)


def test_tighter_clusters_score_better(rng):
    centers = np.eye(3)

    def report(spread):
        r = np.random.default_rng(5)
        X = np.repeat(centers, 8, axis=0) + spread * r.normal(size=(24, 3))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        return compactness_report([ClassEmbedding(x, i // 8, seq_id=i) for i, x in enumerate(X)])

    tight, loose = report(0.05), report(0.6)
    assert tight["silhouette"] > loose["silhouette"]
    assert tight["davies_bouldin"] < loose["davies_bouldin"]
    assert tight["v_measure"] >= loose["v_measure"]


def test_compactness_needs_two_classes(rng):
    items = embs(unit_rows(rng, 5, 3))
    with pytest.raises(UndefinedMetricError):
        compactness_report(items)


def test_detached_copy_is_read_only():
    e = ClassEmbedding(np.array([1.0, 0.0]), 2, density=0.5, seq_id=3)
    d = e.detached(Origin.BANK)
    assert d.origin is Origin.BANK and d.tensor is None
    with pytest.raises(ValueError):
        d.vector[0] = 2.0
