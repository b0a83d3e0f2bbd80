"""Masked average pooling of projected feature maps into class prototypes."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .density import ClassEmbedding, Origin
from .errors import ConfigError, ContractError


class MaskSource(enum.Enum):
    GROUND_TRUTH = "ground_truth"
    PSEUDO_LABEL = "pseudo_label"


@dataclass
class ActivationMask:
    class_id: int
    scores: np.ndarray
    source: MaskSource = MaskSource.GROUND_TRUTH

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ContractError(f"mask scores for class {self.class_id} must lie in [0, 1]")


def binarize_mask(mask, phi):
    """1 where the activation strictly exceeds ``phi``."""
    if not 0.0 <= phi < 1.0:
        raise ConfigError(f"phi must lie in [0, 1), got {phi}")
    scores = mask.scores if isinstance(mask, ActivationMask) else np.asarray(mask)
    return (scores > phi).astype(np.float64)


def masked_average_pool(features, mask):
    """Channel mean of ``features`` (H, W, D) over pixels where ``mask`` is 1.

    Returns an un-normalized (D,) tensor on the tape, or ``None`` when the
    mask is empty.
    """
    features = T.as_tensor(features)
    mask = np.asarray(mask, dtype=np.float64)
    if features.ndim != 3 or mask.shape != features.shape[:2]:
        raise ContractError(f"mask shape {mask.shape} does not match feature map {features.shape}")
    total = mask.sum()
    if total == 0:
        return None
    h, w, d = features.shape
    weights = T.Tensor((mask / total).reshape(1, h * w))
    return T.matmul(weights, features.reshape(h * w, d)).reshape(d)


def _batched_pool(weights, feats):
    """(B, K, P) constant weights times (B, P, D) features -> (B, K, D)."""

    def bw(g):
        return (np.matmul(weights.transpose(0, 2, 1), g),)

    return T.Tensor.from_op(np.matmul(weights, feats.data), (feats,), bw, "masked_pool")


def pool_scores(batch_features, scores, phi, seq_counter=None, scene_ids=None):
    """Prototypes from a (B, H, W, N) stack of per-class activation scores.

    Array form of :func:`batch_prototypes`; embeddings come out image-major,
    then by class id.
    """
    if not 0.0 <= phi < 1.0:
        raise ConfigError(f"phi must lie in [0, 1), got {phi}")
    feats = T.as_tensor(batch_features)
    b, h, w, d = feats.shape
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[:3] != (b, h, w):
        raise ContractError(f"mask stack {scores.shape} does not match feature map {feats.shape}")
    n = scores.shape[3]
    binary = (scores > phi).reshape(b, h * w, n).transpose(0, 2, 1).astype(np.float64)
    totals = binary.sum(axis=2)
    present = totals > 0
    weights = np.divide(binary, totals[..., None], out=np.zeros_like(binary),
                        where=present[..., None])
    pooled = _batched_pool(weights, feats.reshape(b, h * w, d))
    img, cls = np.nonzero(present)
    if len(img) == 0:
        return []
    normed = T.l2_normalize_lastdim(T.take(pooled, (img, cls)))
    counter = seq_counter if seq_counter is not None else itertools.count()
    out = []
    for r, (i, c) in enumerate(zip(img.tolist(), cls.tolist())):
        sid = scene_ids[i] if scene_ids is not None else None
        out.append(ClassEmbedding(normed.data[r].copy(), c, origin=Origin.BATCH,
                                  seq_id=next(counter), scene_id=sid, tensor=normed, row=r))
    return out


def batch_prototypes(batch_features, masks_per_image, phi, seq_counter=None, scene_ids=None):
    """One normalized prototype per (image, present class).

    ``batch_features`` is a (B, H, W, D) tensor; ``masks_per_image[b]`` lists
    the ActivationMasks of image ``b``. Classes whose binarized mask is empty
    are skipped.
    """
    feats = T.as_tensor(batch_features)
    if feats.ndim != 4:
        raise ContractError(f"batch features must be (B, H, W, D), got {feats.shape}")
    b, h, w, _ = feats.shape
    if len(masks_per_image) != b:
        raise ContractError(f"{len(masks_per_image)} mask sets for a batch of {b}")
    class_ids = sorted({m.class_id for masks in masks_per_image for m in masks})
    col = {c: k for k, c in enumerate(class_ids)}
    scores = np.zeros((b, h, w, len(class_ids)))
    for i, masks in enumerate(masks_per_image):
        for m in masks:
            if m.scores.shape != (h, w):
                raise ContractError(f"mask shape {m.scores.shape} does not match feature map {(h, w)}")
            scores[i, :, :, col[m.class_id]] = m.scores
    embs = pool_scores(feats, scores, phi, seq_counter, scene_ids)
    for e in embs:
        e.class_id = class_ids[e.class_id]
    return embs
