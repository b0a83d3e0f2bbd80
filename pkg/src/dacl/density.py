"""Cosine geometry, k-NN graphs and neighborhood density of class embeddings.

Density of an embedding is the mean cosine similarity to its k nearest
neighbors inside a candidate pool (the class memory bank joined with the
current batch). Averaging that quantity over several neighborhood sizes
gives the multi-scale estimate used to rank anchors and positive keys.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EmptyPoolError, UndefinedMetricError

NORM_TOL = 1e-9


class Origin(enum.Enum):
    BATCH = "batch"
    BANK = "bank"


@dataclass(eq=False)
class ClassEmbedding:
    """A projected class prototype.

    ``tensor`` optionally holds the same vector as a node on the autodiff
    tape (row ``row`` of a stacked tensor when ``row`` is set) so that losses
    built from sampled embeddings reach the encoder; it is never stored in a
    memory bank.
    """

    vector: np.ndarray
    class_id: int
    density: float | None = None
    origin: Origin = Origin.BATCH
    seq_id: int = 0
    scene_id: int | None = None
    tensor: object = field(default=None, repr=False)
    row: int | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)

    def normalized(self):
        n = np.linalg.norm(self.vector)
        if n == 0:
            raise ContractError("cannot normalize a zero vector")
        return ClassEmbedding(self.vector / n, self.class_id, self.density, self.origin,
                              self.seq_id, self.scene_id)

    def detached(self, origin=None):
        vec = self.vector.copy()
        vec.flags.writeable = False
        return ClassEmbedding(vec, self.class_id, self.density, origin or self.origin,
                              self.seq_id, self.scene_id)


@dataclass(frozen=True)
class ScaleSet:
    ks: tuple

    def __post_init__(self):
        ks = tuple(int(k) for k in self.ks)
        if not ks:
            raise ContractError("ScaleSet needs at least one neighborhood size")
        if any(k < 1 for k in ks):
            raise ContractError(f"neighborhood sizes must be >= 1, got {ks}")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ContractError(f"neighborhood sizes must be strictly increasing, got {ks}")
        object.__setattr__(self, "ks", ks)

    def __iter__(self):
        return iter(self.ks)

    def __len__(self):
        return len(self.ks)


@dataclass
class NeighborGraph:
    """Rows are padded with index -1 / NaN beyond ``counts[i]`` neighbors."""

    query_count: int
    k: int
    indices: np.ndarray
    similarities: np.ndarray
    counts: np.ndarray


def as_arrays(embeddings):
    """Stack embeddings into (vectors, seq_ids)."""
    if not embeddings:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    vecs = np.stack([e.vector for e in embeddings])
    ids = np.array([e.seq_id for e in embeddings], dtype=np.int64)
    return vecs, ids


def _check_normalized(vecs, what):
    if len(vecs) == 0:
        return
    norms = np.sqrt((vecs * vecs).sum(axis=1))
    bad = np.abs(norms - 1.0) > NORM_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise ContractError(f"{what} vector {i} is not L2-normalized (norm={norms[i]!r})")


@dataclass
class _Ranking:
    order: np.ndarray      # q x m pool indices, most similar first, self last
    sims: np.ndarray       # q x m similarities in that order
    available: np.ndarray  # neighbors per row once self is excluded


def rank_pool(q_vecs, q_ids, p_vecs, p_ids, check=True):
    """Sort every pool member by descending cosine to each query.

    Ties go to the smaller seq_id; a query's own entry (same seq_id) is
    pushed to the end and not counted as available.
    """
    if len(p_vecs) == 0:
        raise EmptyPoolError("neighbor search against an empty pool")
    if check:
        _check_normalized(q_vecs, "query")
        _check_normalized(p_vecs, "pool")
    q, m = len(q_vecs), len(p_vecs)
    # elementwise product + reduction keeps each entry independent of its
    # position in the pool (BLAS blocking would not)
    sims = (q_vecs[:, None, :] * p_vecs[None, :, :]).sum(axis=-1)
    is_self = q_ids[:, None] == p_ids[None, :]
    key = np.where(is_self, np.inf, -sims)
    tie = np.broadcast_to(p_ids, (q, m))
    order = np.lexsort((tie, key), axis=-1)
    ranked = np.take_along_axis(sims, order, axis=1)
    available = m - is_self.sum(axis=1)
    return _Ranking(order, ranked, available)


def graph_from_ranking(ranking, k):
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    q = ranking.order.shape[0]
    counts = np.minimum(ranking.available, k)
    width = int(counts.max()) if q else 0
    idx = ranking.order[:, :width].copy()
    sims = ranking.sims[:, :width].copy()
    pad = np.arange(width)[None, :] >= counts[:, None]
    idx[pad] = -1
    sims[pad] = np.nan
    return NeighborGraph(q, k, idx, sims, counts)


def knn_graph(queries, pool, k):
    """k most cosine-similar pool members per query, self excluded.

    When fewer than ``k`` candidates exist the neighborhood shrinks to all
    of them.
    """
    qv, qi = as_arrays(queries)
    pv, pi = as_arrays(pool)
    if not pool:
        raise EmptyPoolError("neighbor search against an empty pool")
    if not queries:
        return NeighborGraph(0, k, np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0)),
                             np.zeros(0, dtype=np.int64))
    return graph_from_ranking(rank_pool(qv, qi, pv, pi), k)


def density_single_scale(graph):
    if np.any(graph.counts == 0):
        row = int(np.argmin(graph.counts))
        raise ContractError(f"query {row} has no neighbors; filter it before estimating density")
    if graph.query_count == 0:
        return np.zeros(0)
    if np.all(graph.counts == graph.similarities.shape[1]):
        return graph.similarities.mean(axis=1)
    return np.array([graph.similarities[i, :c].mean() for i, c in enumerate(graph.counts)])


def density_from_ranking(ranking, scales):
    per_scale = [density_single_scale(graph_from_ranking(ranking, k)) for k in scales]
    return np.mean(np.stack(per_scale), axis=0)


def density_multi_scale(queries, pool, scales):
    """Mean over neighborhood sizes of the single-scale density."""
    scales = scales if isinstance(scales, ScaleSet) else ScaleSet(tuple(scales))
    if not pool:
        raise EmptyPoolError("neighbor search against an empty pool")
    if not queries:
        return np.zeros(0)
    qv, qi = as_arrays(queries)
    pv, pi = as_arrays(pool)
    return density_from_ranking(rank_pool(qv, qi, pv, pi), scales)


def compactness_report(embeddings, predicted=None):
    """Silhouette, Davies-Bouldin and V-measure of labelled embeddings.

    Distances are Euclidean between the (normalized) vectors. ``predicted``
    gives the class each embedding was assigned by its source model; when
    omitted, each embedding is assigned to the nearest class centroid.
    """
    from sklearn import metrics

    if not embeddings:
        raise UndefinedMetricError("no embeddings")
    X = np.stack([e.vector for e in embeddings])
    labels = np.array([e.class_id for e in embeddings])
    classes = np.unique(labels)
    if len(classes) < 2:
        raise UndefinedMetricError("clustering metrics need at least two classes")
    if len(classes) >= len(labels):
        raise UndefinedMetricError("silhouette needs at least one class with two members")
    if predicted is None:
        cents = np.stack([X[labels == c].mean(axis=0) for c in classes])
        d2 = ((X[:, None, :] - cents[None, :, :]) ** 2).sum(axis=-1)
        predicted = classes[np.argmin(d2, axis=1)]
    predicted = np.asarray(predicted)
    if predicted.shape != labels.shape:
        raise ContractError(f"predicted has {predicted.shape[0]} entries for {len(labels)} embeddings")
    return {
        "silhouette": float(metrics.silhouette_score(X, labels, metric="euclidean")),
        "davies_bouldin": float(metrics.davies_bouldin_score(X, labels)),
        "v_measure": float(metrics.v_measure_score(labels, predicted)),
    }
