"""Positiveness-weighted contrastive loss between sparse anchors and class centers.

For class n with anchors m_i, detached center c and negatives p-:

    L = - sum_n sum_i log( w_i * exp(m_i.c / tau) / sum_{p-} exp(m_i.p- / tau) )

The denominator holds negatives only, so a single term may be negative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ConvergenceError

log = logging.getLogger(__name__)


@dataclass
class PositivenessVector:
    class_id: int
    w: np.ndarray
    gamma: np.ndarray


@dataclass
class ContrastiveTerms:
    per_class: dict = field(default_factory=dict)
    total: T.Tensor = None
    tau: float = 0.4


def _anchor_matrix(anchors):
    if isinstance(anchors, np.ndarray):
        return anchors
    return np.stack([a.vector for a in anchors])


def positiveness(anchors, center, gamma=1.0, class_id=-1):
    """Softmax of anchor-to-center affinities across the anchors, divided by gamma."""
    A = _anchor_matrix(anchors)
    if len(A) == 0:
        raise ContractError("positiveness needs at least one anchor")
    g = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (len(A),)).copy()
    if np.any(g <= 0):
        raise ConfigError(f"gamma must be positive, got {gamma}")
    logits = A @ np.asarray(center, dtype=np.float64)
    z = np.exp(logits - logits.max())
    return PositivenessVector(class_id, z / z.sum() / g, g)


def uniform_positiveness(n_anchors, class_id=-1):
    return PositivenessVector(class_id, np.ones(n_anchors), np.ones(n_anchors))


def _anchor_tensor(anchors):
    """Stack anchor vectors as a tape tensor, gathering rows of shared parents."""
    if any(getattr(a, "tensor", None) is None for a in anchors):
        return T.Tensor(_anchor_matrix(anchors))
    parts, i = [], 0
    while i < len(anchors):
        src = anchors[i].tensor
        j = i
        while j < len(anchors) and anchors[j].tensor is src:
            j += 1
        group = anchors[i:j]
        if group[0].row is None:
            parts.extend(a.tensor.reshape(1, -1) for a in group)
        else:
            parts.append(T.take(src, np.array([a.row for a in group])))
        i = j
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)


def soft_contrastive_loss(sample_sets, weights, tau, infonce_denominator=False):
    """Sum of per-anchor terms over every class that has anchors, a center and negatives.

    ``weights`` maps class_id to a PositivenessVector aligned with that
    class's anchors. Gradients flow into anchors only.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if isinstance(sample_sets, dict):
        sample_sets = [sample_sets[k] for k in sorted(sample_sets)]
    else:
        sample_sets = sorted(sample_sets, key=lambda s: s.class_id)
    terms = ContrastiveTerms(tau=tau)
    total = None
    for ss in sample_sets:
        if not ss.usable:
            continue
        A = _anchor_tensor(ss.anchors)
        q = A.shape[0]
        w = weights[ss.class_id].w if weights is not None else np.ones(q)
        if len(w) != q:
            raise ContractError(f"class {ss.class_id}: {len(w)} weights for {q} anchors")
        center = T.Tensor(np.asarray(ss.center, dtype=np.float64).reshape(-1, 1))
        negs = T.Tensor(np.stack([p.vector for p in ss.negatives]).T)
        pos = T.matmul(A, center).reshape(q) * (1.0 / tau)
        neg = T.matmul(A, negs) * (1.0 / tau)
        if infonce_denominator:
            neg = T.concat([pos.reshape(q, 1), neg], axis=1)
        lse = T.logsumexp_lastdim(neg)
        per_anchor = T.neg(T.Tensor(np.log(w)) + pos - lse)
        cls_loss = per_anchor.sum()
        terms.per_class[ss.class_id] = cls_loss.item()
        total = cls_loss if total is None else total + cls_loss
    if total is None:
        log.warning("contrastive loss: every class was skipped; returning zero")
        total = T.Tensor(0.0)
    terms.total = total
    return terms


def claim1_verify(w, steps=50_000, lr=1.0, tol=1e-9):
    """Minimise -sum_i w_i log s_i over the probability simplex.

    ``s`` is parametrised as the softmax of free logits and optimised by
    gradient descent on the tape (step size ``lr / sum(w)``). Returns the
    optimum s*, which should equal ``w / sum(w)``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0 or np.any(w <= 0):
        raise ContractError("claim1_verify needs a non-empty vector of positive weights")
    total = w.sum()
    theta = T.Tensor(np.zeros(len(w)), requires_grad=True)
    wt = T.Tensor(w)
    residual = np.inf
    for _ in range(steps):
        obj = T.neg(T.tsum(T.mul(wt, T.log_softmax_lastdim(theta))))
        T.backward(obj)
        grad = theta.grad
        theta.grad = None
        residual = float(np.max(np.abs(grad))) / total
        if residual < tol:
            break
        theta.data -= (lr / total) * grad
    else:
        raise ConvergenceError(f"claim1_verify did not converge in {steps} steps", residual)
    return T.softmax_lastdim(theta.detach()).data
