"""Small 2-D segmentation network built on the tape engine.

encoder: 3x3 conv -> relu -> 2x2 average pool -> 3x3 conv -> relu
decoder: nearest 2x upsample, concatenated with the full-resolution conv
         features, then a 1x1 conv to class logits
projection head: per-pixel two-layer perceptron on the decoder features

Convolutions are matmuls over unfolded 3x3 patches.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def unfold3x3(x):
    """(B, H, W, C) -> (B*H*W, 9*C) zero-padded 3x3 patches."""
    x = T.as_tensor(x)
    b, h, w, c = x.shape
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([padded[:, dy:dy + h, dx:dx + w, :]
                           for dy in range(3) for dx in range(3)], axis=-1)

    def bw(g):
        g = g.reshape(b, h, w, 9, c)
        gp = np.zeros((b, h + 2, w + 2, c))
        for k in range(9):
            dy, dx = divmod(k, 3)
            gp[:, dy:dy + h, dx:dx + w, :] += g[:, :, :, k, :]
        return (gp[:, 1:-1, 1:-1, :],)

    return T.Tensor.from_op(cols.reshape(b * h * w, 9 * c), (x,), bw, "unfold3x3")


def avgpool2(x):
    b, h, w, c = x.shape
    return T.mean(x.reshape(b, h // 2, 2, w // 2, 2, c), axis=(2, 4))


def upsample2(x):
    x = T.as_tensor(x)
    b, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (b, h, 2, w, 2, c)).reshape(b, 2 * h, 2 * w, c)

    def bw(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return T.Tensor.from_op(out, (x,), bw, "upsample2")


def standardize(images):
    """Zero-mean, unit-variance per image; the network has no normalization layers."""
    axes = tuple(range(1, images.ndim))
    mu = images.mean(axis=axes, keepdims=True)
    sd = images.std(axis=axes, keepdims=True)
    return (images - mu) / np.maximum(sd, 1e-6)


def _he(rng, fan_in, fan_out):
    return T.Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), requires_grad=True)


def _zeros(n):
    return T.Tensor(np.zeros(n), requires_grad=True)


class SegModel:
    """Encoder, decoder and projection head with parameters in declaration order."""

    PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dec_w", "dec_b",
                   "proj1_w", "proj1_b", "proj2_w", "proj2_b")

    def __init__(self, n_classes, in_channels=1, c1=8, c2=16, proj_hidden=16, d_proj=16,
                 seed=0, dropout=0.0):
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.d_proj = d_proj
        self.dropout = dropout
        self._drop_rng = np.random.default_rng([seed, 7])
        feat = c1 + c2
        self.conv1_w = _he(rng, 9 * in_channels, c1)
        self.conv1_b = _zeros(c1)
        self.conv2_w = _he(rng, 9 * c1, c2)
        self.conv2_b = _zeros(c2)
        self.dec_w = _he(rng, feat, n_classes)
        self.dec_b = _zeros(n_classes)
        self.proj1_w = _he(rng, feat, proj_hidden)
        self.proj1_b = _zeros(proj_hidden)
        self.proj2_w = _he(rng, proj_hidden, d_proj)
        self.proj2_b = _zeros(d_proj)

    def parameters(self):
        return [getattr(self, n) for n in self.PARAM_NAMES]

    def features(self, images):
        x = T.as_tensor(images)
        if x.ndim == 3:
            x = x.reshape(*x.shape, 1)
        b, h, w, _ = x.shape
        c1 = self.conv1_b.shape[0]
        h1 = T.relu(unfold3x3(x) @ self.conv1_w + self.conv1_b).reshape(b, h, w, c1)
        p1 = avgpool2(h1)
        c2 = self.conv2_b.shape[0]
        h2 = T.relu(unfold3x3(p1) @ self.conv2_w + self.conv2_b).reshape(b, h // 2, w // 2, c2)
        f = T.concat([h1, upsample2(h2)], axis=-1)
        return f.reshape(b * h * w, c1 + c2)

    def forward(self, images, train=False):
        """Return (logits (B,H,W,N), projections (B,H,W,D))."""
        images = standardize(np.asarray(images, dtype=np.float64))
        b, h, w = images.shape[:3]
        f = self.features(images)
        dec_in = f
        if train and self.dropout > 0:
            keep = self._drop_rng.random(f.shape[1]) >= self.dropout
            dec_in = f * T.Tensor(keep / (1.0 - self.dropout))
        logits = (dec_in @ self.dec_w + self.dec_b).reshape(b, h, w, self.n_classes)
        j = T.relu(f @ self.proj1_w + self.proj1_b) @ self.proj2_w + self.proj2_b
        return logits, j.reshape(b, h, w, self.d_proj)

    def predict_proba(self, images):
        with T.no_grad():
            logits, _ = self.forward(images)
            return T.softmax_lastdim(logits).data

    def state(self):
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays):
        for p, a in zip(self.parameters(), arrays):
            if p.shape != a.shape:
                raise ValueError(f"parameter shape {a.shape} does not match {p.shape}")
            p.data = np.array(a, dtype=np.float64)
