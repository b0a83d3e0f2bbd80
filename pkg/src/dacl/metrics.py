"""Dice, Jaccard and average surface distance for label maps."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UndefinedMetricError

log = logging.getLogger(__name__)


def _masks(pred, gt, class_id):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred == class_id, gt == class_id


def dice_jaccard(pred, gt, class_id):
    """Percentages; both empty scores 100, exactly one empty scores 0."""
    p, g = _masks(pred, gt, class_id)
    inter = int(np.logical_and(p, g).sum())
    ps, gs = int(p.sum()), int(g.sum())
    if ps == 0 and gs == 0:
        log.debug("class %d absent from both masks; scoring 100", class_id)
        return {"dice": 100.0, "jaccard": 100.0}
    union = ps + gs - inter
    return {"dice": 200.0 * inter / (ps + gs), "jaccard": 100.0 * inter / union}


def boundary(mask):
    """Mask pixels with a 4-neighbor outside the mask or on the image edge."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _nearest_sq(src, dst):
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
    return d2.min(axis=1)


def asd(pred, gt, class_id):
    """Mean over both boundary point sets of the distance to the other set.

    Raises UndefinedMetricError when either mask is empty.
    """
    p, g = _masks(pred, gt, class_id)
    if not p.any() or not g.any():
        raise UndefinedMetricError(f"ASD undefined: class {class_id} empty in "
                                   f"{'prediction' if not p.any() else 'ground truth'}")
    bp = np.argwhere(boundary(p)).astype(np.int64)
    bg = np.argwhere(boundary(g)).astype(np.int64)
    d2 = np.concatenate([_nearest_sq(bp, bg), _nearest_sq(bg, bp)])
    return math.fsum(math.sqrt(int(v)) for v in d2) / len(d2)


@dataclass
class EvalReport:
    per_class: dict = field(default_factory=dict)
    macro: dict = field(default_factory=dict)
    n_cases: int = 0
    undefined_asd: dict = field(default_factory=dict)
    mean_std_over_seeds: dict | None = None

    def to_dict(self):
        out = {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "macro": self.macro,
            "n_cases": self.n_cases,
            "undefined_asd": {str(k): v for k, v in sorted(self.undefined_asd.items())},
        }
        if self.mean_std_over_seeds is not None:
            out["mean_std_over_seeds"] = self.mean_std_over_seeds
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(preds, gts, n_classes):
    """Per-case metrics averaged per class, then macro-averaged over foreground."""
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions for {len(gts)} cases")
    per_class, undefined = {}, {}
    for c in range(1, n_classes):
        dices, jacs, asds = [], [], []
        for p, g in zip(preds, gts):
            dj = dice_jaccard(p, g, c)
            dices.append(dj["dice"])
            jacs.append(dj["jaccard"])
            try:
                asds.append(asd(p, g, c))
            except UndefinedMetricError:
                pass
        undefined[c] = len(preds) - len(asds)
        per_class[c] = {
            "dice": float(np.mean(dices)),
            "jaccard": float(np.mean(jacs)),
            "asd": float(np.mean(asds)) if asds else None,
        }
    macro = {}
    for key in ("dice", "jaccard", "asd"):
        vals = [v[key] for v in per_class.values() if v[key] is not None]
        macro[key] = float(np.mean(vals)) if vals else None
    return EvalReport(per_class, macro, len(preds), undefined)


def aggregate_runs(reports):
    """Mean and sample standard deviation (n-1) of the macro metrics."""
    if not reports:
        raise ContractError("aggregate_runs needs at least one report")
    macros = [r.macro if isinstance(r, EvalReport) else r for r in reports]
    out = {}
    for key in macros[0]:
        vals = [m[key] for m in macros if m.get(key) is not None]
        if not vals:
            continue
        entry = {"mean": float(np.mean(vals)), "n": len(vals)}
        if len(vals) >= 2:
            entry["std"] = float(np.std(vals, ddof=1))
        out[key] = entry
    return out
