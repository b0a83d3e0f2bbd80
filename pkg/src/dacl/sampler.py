"""Density-ranked anchor, positive-key and negative-key selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .density import ClassEmbedding, Origin
from .errors import ContractError


@dataclass
class SampleSets:
    class_id: int
    anchors: list = field(default_factory=list)
    positives: list = field(default_factory=list)
    center: np.ndarray | None = None
    negatives: list = field(default_factory=list)

    @property
    def usable(self):
        return bool(self.anchors) and self.center is not None and bool(self.negatives)


def _need_density(items):
    for e in items:
        if e.density is None:
            raise ContractError(f"embedding {e.seq_id} has no density")


def sample_anchors(batch_class_feats, n_q):
    """The ``n_q`` lowest-density batch features, ascending (ties by seq_id)."""
    _need_density(batch_class_feats)
    ranked = sorted(batch_class_feats, key=lambda e: (e.density, e.seq_id))
    return ranked[:n_q]


def _bank_arrays(bank_snapshot):
    """Accept either a sequence of ClassEmbeddings or (vecs, dens, ids[, class_id])."""
    if isinstance(bank_snapshot, tuple) and bank_snapshot and isinstance(bank_snapshot[0], np.ndarray):
        vecs, dens, ids = bank_snapshot[:3]
        cls = bank_snapshot[3] if len(bank_snapshot) > 3 else -1
        return vecs, dens, ids, cls
    items = list(bank_snapshot)
    _need_density(items)
    if not items:
        return np.zeros((0, 0)), np.zeros(0), np.zeros(0, dtype=np.int64), -1
    return (np.stack([e.vector for e in items]), np.array([e.density for e in items]),
            np.array([e.seq_id for e in items], dtype=np.int64), items[0].class_id)


def sample_positives(batch_class_feats, bank_snapshot, n_p_plus, exclude=()):
    """Highest-density keys: half from the batch, half from the bank.

    A side that cannot supply its half is back-filled from the other side.
    Batch features whose seq_id is in ``exclude`` (the anchors) are not
    eligible. The result is ordered by descending density.
    """
    _need_density(batch_class_feats)
    excluded = {e.seq_id if isinstance(e, ClassEmbedding) else int(e) for e in exclude}
    cand_b = sorted((e for e in batch_class_feats if e.seq_id not in excluded),
                    key=lambda e: (-e.density, e.seq_id))
    vecs, dens, ids, bank_cls = _bank_arrays(bank_snapshot)
    bank_order = np.lexsort((ids, -dens)) if len(ids) else np.zeros(0, dtype=np.int64)

    take_b = min(math.ceil(n_p_plus / 2), len(cand_b))
    take_g = min(n_p_plus // 2, len(bank_order))
    short = n_p_plus - take_b - take_g
    extra = min(short, len(cand_b) - take_b)
    take_b += extra
    take_g += min(short - extra, len(bank_order) - take_g)

    if cand_b:
        cls = cand_b[0].class_id
    else:
        cls = bank_cls
    picked = list(cand_b[:take_b])
    for j in bank_order[:take_g]:
        picked.append(ClassEmbedding(vecs[j], cls, float(dens[j]), Origin.BANK, int(ids[j])))
    picked.sort(key=lambda e: (-e.density, e.seq_id))
    return picked


def cluster_center(positives):
    """Normalized mean of the positive keys; ``None`` signals a skipped class."""
    if not positives:
        return None
    mean = np.mean(np.stack([p.vector for p in positives]), axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        return None
    return mean / norm


def sample_negatives(anchors_by_class, class_id, n_p_minus, rng):
    """Uniform draw without replacement from the other classes' anchors."""
    pool = [e for c in sorted(anchors_by_class) if c != class_id
            for e in sorted(anchors_by_class[c], key=lambda e: e.seq_id)]
    if not pool:
        return []
    size = min(n_p_minus, len(pool))
    idx = rng.choice(len(pool), size=size, replace=False)
    return [pool[i] for i in idx]


def sample_random(batch_class_feats, n_q, n_p_plus, rng):
    """Density-free sampling: random anchors and random batch positives."""
    items = sorted(batch_class_feats, key=lambda e: e.seq_id)
    if not items:
        return [], []
    perm = rng.permutation(len(items))
    n_anchor = min(n_q, len(items))
    anchors = [items[i] for i in perm[:n_anchor]]
    positives = [items[i] for i in perm[n_anchor:n_anchor + n_p_plus]]
    return anchors, positives
