"""Two-model co-training with supervised, cross-supervised and density-aware losses.

total = L_sup + lambda_cross * L_cross + lambda_cl(t) * L_cl

with lambda_cl(t) a Gaussian ramp that is held at zero (and lambda_cross
at one) for the first ``warmup_gate_iters`` steps.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from ._alloc import tune_allocator
from .bank import BankSet
from .density import ClassEmbedding, Origin, density_from_ranking, rank_pool
from .errors import ConfigError, ContractError, DaclError, StageError
from .loss import positiveness, soft_contrastive_loss, uniform_positiveness
from .metrics import evaluate
from .model import SegModel
from .prototypes import pool_scores
from .sampler import (SampleSets, cluster_center, sample_anchors, sample_negatives,
                      sample_positives, sample_random)

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5
CKPT_MAGIC = b"DACLCKPT"
CKPT_VERSION = 1


def warmup_lambda(t, t_max, base=0.1, sharpness=5.0):
    if t_max <= 0:
        raise ConfigError(f"t_max must be positive, got {t_max}")
    if not 0 <= t <= t_max:
        raise ContractError(f"step {t} outside [0, {t_max}]")
    return base * math.exp(-sharpness * (1.0 - t / t_max) ** 2)


def loss_weights(t, config):
    """(lambda_cross, lambda_cl) in effect at step ``t``."""
    if t < config.warmup_gate_iters:
        return 1.0, 0.0
    if config.lambda_cl is not None:
        return config.lambda_cross, float(config.lambda_cl)
    t_eff = min(t, config.horizon)
    return config.lambda_cross, warmup_lambda(t_eff, config.horizon, config.warmup_base,
                                              config.warmup_sharpness)


# ----------------------------------------------------------------------------
# segmentation losses


def _flat(logits):
    n = logits.shape[-1]
    return logits.reshape(-1, n)


def _onehot(labels, n):
    labels = np.asarray(labels).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ContractError(f"labels outside [0, {n}) for a {n}-class output")
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, labels):
    """Pixel-mean cross-entropy of (..., N) logits against integer labels."""
    flat = _flat(logits)
    if np.asarray(labels).size != flat.shape[0]:
        raise ContractError(f"{np.asarray(labels).size} labels for {flat.shape[0]} pixels")
    oh = T.Tensor(_onehot(labels, flat.shape[1]))
    return T.neg(T.tsum(T.mul(oh, T.log_softmax_lastdim(flat)))) * (1.0 / flat.shape[0])


def soft_dice_loss(logits, labels):
    flat = _flat(logits)
    n = flat.shape[1]
    oh = _onehot(labels, n)
    probs = T.softmax_lastdim(flat)
    inter = T.tsum(T.mul(probs, T.Tensor(oh)), axis=0)
    denom = T.tsum(probs, axis=0) + T.Tensor(oh.sum(axis=0) + DICE_SMOOTH)
    dice = (inter * 2.0 + DICE_SMOOTH) / denom
    return 1.0 - T.mean(dice)


def supervised_loss(logits_a, logits_b, labels):
    """Mean over both models of 0.5 * (cross-entropy + soft Dice)."""
    per_model = [(cross_entropy(lg, labels) + soft_dice_loss(lg, labels)) * 0.5
                 for lg in (logits_a, logits_b)]
    return (per_model[0] + per_model[1]) * 0.5


def cross_supervised_loss(logits_a, logits_b):
    """Each model fits the other's hard (argmax) prediction."""
    if logits_a.shape != logits_b.shape:
        raise ContractError(f"logit shapes differ: {logits_a.shape} vs {logits_b.shape}")
    pseudo_b = np.argmax(logits_b.data, axis=-1)
    pseudo_a = np.argmax(logits_a.data, axis=-1)
    return cross_entropy(logits_a, pseudo_b) + cross_entropy(logits_b, pseudo_a)


# ----------------------------------------------------------------------------
# training step


@dataclass
class Batch:
    labeled_images: np.ndarray      # (NL, H, W)
    labels: np.ndarray              # (NL, H, W)
    unlabeled_images: np.ndarray    # (NU, H, W)
    scene_ids: list = field(default_factory=list)

    @property
    def images(self):
        if len(self.unlabeled_images) == 0:
            return self.labeled_images
        return np.concatenate([self.labeled_images, self.unlabeled_images])


@dataclass
class StepState:
    """Mutable per-run state threaded through train_step."""

    seq: itertools.count = field(default_factory=itertools.count)
    neg_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    optimizers: list = field(default_factory=list)


def _mask_scores(batch, probs_other, n_classes):
    """(B, H, W, N) activation stack: one-hot labels, then the counterpart's softmax."""
    nl = len(batch.labels)
    onehot = (batch.labels[..., None] == np.arange(n_classes)).astype(np.float64)
    return np.concatenate([onehot, probs_other[nl:]], axis=0)


def estimate_densities(batch_feats, bank, config):
    """Stamp each batch embedding with its density over bank U batch.

    Embeddings with no candidate neighbor at all are left unstamped.
    """
    scales = config.scales
    if config.single_scale:
        scales = (scales[len(scales) // 2],)
    qv = np.stack([e.vector for e in batch_feats])
    qi = np.array([e.seq_id for e in batch_feats], dtype=np.int64)
    if config.no_bank or len(bank) == 0:
        pv, pi = qv, qi
    else:
        bv, _, bi = bank.arrays()
        pv, pi = np.concatenate([bv, qv]), np.concatenate([bi, qi])
    ranking = rank_pool(qv, qi, pv, pi, check=False)
    ok = ranking.available > 0
    if not ok.any():
        return
    if not ok.all():
        ranking.order, ranking.sims, ranking.available = (ranking.order[ok], ranking.sims[ok],
                                                          ranking.available[ok])
    dens = density_from_ranking(ranking, scales)
    for e, d in zip((e for e, k in zip(batch_feats, ok) if k), dens):
        e.density = float(d)


def _sample_class(cls, feats, bank, config, rng):
    if config.pcl_random_sampling:
        anchors, positives = sample_random(feats, config.n_q, config.n_p_plus, rng)
    else:
        feats = [e for e in feats if e.density is not None]
        anchors = sample_anchors(feats, config.n_q)
        if config.no_bank:
            bank_view = ()
        else:
            vecs, dens, ids = bank.arrays()
            bank_view = (vecs, dens, ids, cls)
        positives = sample_positives(feats, bank_view, config.n_p_plus, exclude=anchors)
    return SampleSets(cls, anchors, positives, cluster_center(positives))


def contrastive_term(embeddings, banks, config, rng):
    """Sample per-class sets and build the soft contrastive loss on the tape."""
    by_class = {}
    for e in embeddings:
        by_class.setdefault(e.class_id, []).append(e)
    sets = {c: _sample_class(c, by_class[c], banks[c], config, rng) for c in sorted(by_class)}
    if config.negatives_from_all:
        neg_source = {c: by_class[c] for c in by_class}
    else:
        neg_source = {c: s.anchors for c, s in sets.items()}
    weights = {}
    for c, s in sets.items():
        s.negatives = sample_negatives(neg_source, c, config.n_p_minus, rng)
        if s.anchors and s.center is not None:
            if config.uniform_w:
                weights[c] = uniform_positiveness(len(s.anchors), c)
            else:
                weights[c] = positiveness(s.anchors, s.center, config.gamma, c)
    terms = soft_contrastive_loss(sets, weights, config.tau, config.infonce_denominator)
    return terms, sets


def train_step(models, banks, batch, config, t, state):
    """One optimisation step of both models; returns the step's log record."""
    model_a, model_b = models
    n_cls = model_a.n_classes
    stage = "forward"
    try:
        images = batch.images
        nl = len(batch.labels)
        logits_a, proj_a = model_a.forward(images, train=True)
        logits_b, proj_b = model_b.forward(images, train=True)

        stage = "supervised"
        loss_sup = supervised_loss(logits_a[:nl], logits_b[:nl], batch.labels)
        loss_cross = cross_supervised_loss(logits_a, logits_b)
        lam_cross, lam_cl = loss_weights(t, config)
        total = loss_sup + loss_cross * lam_cross

        contrastive_on = config.lambda_cl is None or config.lambda_cl != 0
        embeddings = []
        loss_cl_value = 0.0
        anchors_per_class = [0] * n_cls
        if contrastive_on:
            stage = "prototyping"
            probs_a = T.softmax_lastdim(logits_a).data
            probs_b = T.softmax_lastdim(logits_b).data
            ids = batch.scene_ids or None
            embeddings = (pool_scores(proj_a, _mask_scores(batch, probs_b, n_cls), config.phi,
                                      state.seq, ids)
                          + pool_scores(proj_b, _mask_scores(batch, probs_a, n_cls), config.phi,
                                        state.seq, ids))
            stage = "density"
            for c in range(n_cls):
                feats = [e for e in embeddings if e.class_id == c]
                if feats:
                    estimate_densities(feats, banks[c], config)
            if lam_cl > 0:
                stage = "sampling"
                terms, sets = contrastive_term(embeddings, banks, config, state.neg_rng)
                for c, s in sets.items():
                    anchors_per_class[c] = len(s.anchors) if s.usable else 0
                loss_cl_value = terms.total.item()
                if terms.total.requires_grad:
                    total = total + terms.total * lam_cl

        stage = "backward"
        T.backward(total)
        for opt in state.optimizers:
            opt.step()

        stage = "bank"
        if contrastive_on and not config.no_bank:
            for c in range(n_cls):
                banks[c].push([e.detached(Origin.BANK) for e in embeddings
                               if e.class_id == c and e.density is not None])
    except DaclError as exc:
        raise StageError(stage, exc) from exc

    return {
        "t": t,
        "loss_total": total.item(),
        "loss_sup": loss_sup.item(),
        "loss_cross": loss_cross.item(),
        "loss_cl": loss_cl_value,
        "lambda_cl": lam_cl,
        "bank_fill": banks.fill(),
        "anchors_per_class": anchors_per_class,
    }


# ----------------------------------------------------------------------------
# runs


def _augment(arrays, rng):
    """Apply one random rot90 / flip to every (B, H, W) array alike."""
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    out = []
    for a in arrays:
        a = np.rot90(a, k, axes=(1, 2))
        if flip:
            a = a[:, :, ::-1]
        out.append(np.ascontiguousarray(a))
    return out


class Trainer:
    def __init__(self, config, split):
        tune_allocator()
        self.config = config.validate()
        self.split = split
        n_cls = split.config.n_classes
        seed = config.seed
        mk = dict(c1=config.conv1_channels, c2=config.conv2_channels,
                  proj_hidden=config.proj_hidden, d_proj=config.d_proj)
        self.models = (SegModel(n_cls, seed=[seed, 1], **mk),
                       SegModel(n_cls, seed=[seed, 2], dropout=config.decoder_dropout, **mk))
        self.banks = BankSet(n_cls, config.bank_size, config.d_proj)
        opts = [T.SGD(m.parameters(), config.lr, config.momentum, config.weight_decay)
                for m in self.models]
        self.state = StepState(neg_rng=np.random.default_rng([seed, 3]), optimizers=opts)
        self.batch_rng = np.random.default_rng([seed, 4])
        self.t = 0
        self._lab_x = np.stack([s.image for s in split.labeled])
        self._lab_y = np.stack([s.label for s in split.labeled]).astype(np.int64)
        self._lab_ids = [s.scene_id for s in split.labeled]
        self._unl_x = (np.stack([s.image for s in split.unlabeled]) if split.unlabeled
                       else np.zeros((0,) + self._lab_x.shape[1:]))
        self._unl_ids = [s.scene_id for s in split.unlabeled]

    def _draw(self, n, size):
        return self.batch_rng.choice(n, size=size, replace=n < size)

    def next_batch(self):
        cfg = self.config
        li = self._draw(len(self._lab_x), cfg.batch_labeled)
        ui = (self._draw(len(self._unl_x), cfg.batch_unlabeled)
              if len(self._unl_x) and cfg.batch_unlabeled else np.zeros(0, dtype=np.int64))
        lx, ly, ux = self._lab_x[li], self._lab_y[li], self._unl_x[ui]
        if cfg.augment:
            lx, ly, ux = _augment([lx, ly, ux], self.batch_rng)
        ids = [self._lab_ids[i] for i in li] + [self._unl_ids[i] for i in ui]
        return Batch(lx, ly, ux, ids)

    def step(self):
        rec = train_step(self.models, self.banks, self.next_batch(), self.config, self.t, self.state)
        self.t += 1
        return rec

    def predict(self, images):
        pa = self.models[0].predict_proba(images)
        pb = self.models[1].predict_proba(images)
        return np.argmax(pa + pb, axis=-1)

    def evaluate(self, scenes=None):
        scenes = scenes if scenes is not None else self.split.test
        images = np.stack([s.image for s in scenes])
        preds = self.predict(images)
        return evaluate(list(preds), [s.label for s in scenes], self.split.config.n_classes)

    def run(self, log_path=None, eval_every=0, iterations=None):
        total = iterations if iterations is not None else self.config.iterations
        fh = open(log_path, "w") if log_path else None
        try:
            while self.t < total:
                rec = self.step()
                if eval_every and self.t % eval_every == 0:
                    rec["test_dice"] = self.evaluate().macro["dice"]
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        finally:
            if fh:
                fh.close()
        return self.evaluate()


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, trainer):
    cfg = trainer.config
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(cfg.digest())
        fh.write(struct.pack("<Q", trainer.t))
        text = cfg.to_text().encode()
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for model in trainer.models:
            params = model.parameters()
            fh.write(struct.pack("<I", len(params)))
            for p in params:
                fh.write(struct.pack("<I", p.ndim))
                fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
                fh.write(struct.pack("<Q", p.size))
                fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Return (config_text, t, [model_a_arrays, model_b_arrays])."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    digest = buf[off:off + 32]
    off += 32
    (t,) = struct.unpack_from("<Q", buf, off)
    off += 8
    (n_text,) = struct.unpack_from("<I", buf, off)
    off += 4
    text = buf[off:off + n_text].decode()
    off += n_text
    models = []
    for _ in range(2):
        (n_params,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = []
        for _ in range(n_params):
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            (size,) = struct.unpack_from("<Q", buf, off)
            off += 8
            arrays.append(np.frombuffer(buf, "<f8", count=size, offset=off).reshape(shape).copy())
            off += 8 * size
        models.append(arrays)
    return text, digest, t, models


def embeddings_for(trainer, scenes, phi):
    """Per-(scene, class) prototypes of model a over ground-truth masks.

    Each class's embeddings are stamped with multi-scale densities computed
    among themselves.
    """
    from .density import density_multi_scale

    model = trainer.models[0]
    images = np.stack([s.image for s in scenes])
    with T.no_grad():
        _, proj = model.forward(images)
    n_cls = model.n_classes
    scores = np.stack([(s.label[..., None] == np.arange(n_cls)).astype(np.float64) for s in scenes])
    with T.no_grad():
        out = pool_scores(proj, scores, phi, itertools.count(), [s.scene_id for s in scenes])
    for e in out:
        e.tensor, e.row = None, None
    for c in range(n_cls):
        members = [e for e in out if e.class_id == c]
        if len(members) > 1:
            dens = density_multi_scale(members, members, trainer.config.scales)
            for e, d in zip(members, dens):
                e.density = float(d)
    return out


__all__ = ["warmup_lambda", "loss_weights", "cross_entropy", "soft_dice_loss", "supervised_loss",
           "cross_supervised_loss", "train_step", "Trainer", "Batch", "StepState",
           "save_checkpoint", "load_checkpoint", "embeddings_for", "ClassEmbedding"]
