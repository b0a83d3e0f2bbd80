"""Fast invariant checks run by ``dacl selftest``.

Each check returns (ok, observed, expected). Checks are small enough that the
whole suite finishes in a few seconds.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bank import ClassMemoryBank
from .config import TrainConfig
from .cotrain import loss_weights, warmup_lambda
from .density import ClassEmbedding, ScaleSet, density_multi_scale
from .loss import claim1_verify, soft_contrastive_loss
from .metrics import asd, dice_jaccard
from .sampler import SampleSets


@dataclass
class CheckResult:
    module: str
    invariant: str
    ok: bool
    observed: object
    expected: object

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        text = f"{status}  {self.module}:{self.invariant}"
        if not self.ok:
            text += f"  observed={self.observed!r} expected={self.expected!r}"
        return text


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def check_claim1():
    got = claim1_verify([1.0, 2.0, 3.0])
    want = np.array([1 / 6, 1 / 3, 1 / 2])
    return bool(np.max(np.abs(got - want)) < 1e-4), np.round(got, 4).tolist(), np.round(want, 4).tolist()


def check_density_oracle():
    rng = np.random.default_rng(11)
    vecs = _unit(rng, 40, 8)
    embs = [ClassEmbedding(v, 1, seq_id=i) for i, v in enumerate(vecs)]
    scales = ScaleSet((4, 8, 16))
    got = density_multi_scale(embs, embs, scales)
    sims = vecs @ vecs.T
    want = []
    for i in range(len(vecs)):
        others = sorted((-sims[i, j], j) for j in range(len(vecs)) if j != i)
        want.append(np.mean([np.mean([-s for s, _ in others[:k]]) for k in scales]))
    err = float(np.max(np.abs(got - np.array(want))))
    return err < 1e-12, err, "< 1e-12"


def check_loss_gradient():
    rng = np.random.default_rng(5)
    a = _unit(rng, 3, 6)
    center = _unit(rng, 1, 6)[0]
    negs = [ClassEmbedding(v, 2, seq_id=10 + i) for i, v in enumerate(_unit(rng, 4, 6))]

    def loss_of(arr, grad=False):
        t = T.Tensor(arr, requires_grad=grad)
        anchors = [ClassEmbedding(arr[i], 1, seq_id=i, tensor=t, row=i) for i in range(len(arr))]
        ss = SampleSets(1, anchors, [], center, negs)
        return soft_contrastive_loss([ss], None, 0.4).total, t

    total, t = loss_of(a, grad=True)
    T.backward(total)
    fd = np.zeros_like(a)
    h = 1e-5
    for idx in np.ndindex(*a.shape):
        up, dn = a.copy(), a.copy()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (loss_of(up)[0].item() - loss_of(dn)[0].item()) / (2 * h)
    rel = float(np.max(np.abs(t.grad - fd)) / max(np.max(np.abs(fd)), 1e-12))
    return rel < 1e-4, rel, "< 1e-4"


def check_warmup():
    cfg = TrainConfig(iterations=3000)
    end = warmup_lambda(3000, 3000)
    gated = loss_weights(999, cfg)
    ok = end == 0.1 and gated == (1.0, 0.0)
    return ok, (end, gated), (0.1, (1.0, 0.0))


def check_fifo():
    rng = np.random.default_rng(3)
    bank = ClassMemoryBank(0, 7, 2)
    window = deque(maxlen=7)
    seq = 0
    for _ in range(60):
        batch = []
        for _ in range(int(rng.integers(0, 4))):
            batch.append(ClassEmbedding(_unit(rng, 1, 2)[0], 0, density=0.5, seq_id=seq))
            window.append(seq)
            seq += 1
        bank.push(batch)
        if bank.arrays()[2].tolist() != list(window):
            return False, bank.arrays()[2].tolist(), list(window)
    return True, len(window), 7


def check_metrics():
    a = np.zeros((5, 5), dtype=np.uint8)
    b = np.zeros((5, 5), dtype=np.uint8)
    a[2, 0] = 1
    b[2, 3] = 1
    d_single = asd(a, b, 1)
    a[:] = 0
    b[:] = 0
    a[0, :2] = 1
    b[0, 1:3] = 1
    dj = dice_jaccard(a, b, 1)
    dice, jac = dj["dice"], dj["jaccard"]
    ok = d_single == 3.0 and math.isclose(dice, 50.0) and math.isclose(jac, 100 / 3)
    return ok, (d_single, dice, jac), (3.0, 50.0, 100 / 3)


CHECKS = [
    ("dacl-loss", "claim1-simplex-optimum", check_claim1),
    ("geometry-density", "multi-scale-oracle", check_density_oracle),
    ("dacl-loss", "anchor-gradient-fd", check_loss_gradient),
    ("cotrain-framework", "warmup-endpoints", check_warmup),
    ("memory-bank", "fifo-window", check_fifo),
    ("metrics", "dice-jaccard-asd", check_metrics),
]


def run_selftest():
    results = []
    for module, name, fn in CHECKS:
        try:
            ok, observed, expected = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, observed, expected = False, f"{type(exc).__name__}: {exc}", "no exception"
        results.append(CheckResult(module, name, bool(ok), observed, expected))
    return results
