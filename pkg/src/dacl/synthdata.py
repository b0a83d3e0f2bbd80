"""Procedural multi-class 2-D segmentation scenes.

Each scene holds a large ellipse, a medium ring and a small disc (classes
1..3, background 0) with low intensity contrast, blurred boundaries and
additive noise. Shapes are parametric so labels are exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, GenerationError

SCENE_MAGIC = b"DACLSCN"
MAX_PLACEMENT_TRIES = 200


@dataclass
class SceneConfig:
    width: int = 32
    height: int = 32
    n_classes: int = 4
    min_organ_px: int = 8
    blur: float = 1.0
    noise_sigma: float = 0.1
    background_level: float = 0.3
    class_levels: tuple = (0.45, 0.55, 0.65)
    level_jitter: float = 0.04


@dataclass
class ToyScene:
    scene_id: int
    image: np.ndarray          # (H, W) in [0, 1]
    label: np.ndarray          # (H, W) uint8 in [0, N)
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    test: list
    config: SceneConfig = field(default_factory=SceneConfig)


def _shape_mask(kind, yy, xx, cy, cx, rng):
    if kind == "ellipse":
        a, b = rng.uniform(6.5, 9.5), rng.uniform(4.0, 6.0)
        th = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0, {"kind": kind, "a": a, "b": b, "theta": th}
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    if kind == "ring":
        ro = rng.uniform(4.5, 6.0)
        ri = ro - rng.uniform(1.8, 2.5)
        return (r2 <= ro ** 2) & (r2 > ri ** 2), {"kind": kind, "outer": ro, "inner": ri}
    r = rng.uniform(1.8, 2.8)
    return r2 <= r ** 2, {"kind": "disc", "radius": r}


def _kinds(n_fg):
    base = ["ellipse", "ring", "disc"]
    return [base[i] if i < 3 else "disc" for i in range(n_fg)]


def generate_scene(seed, config=None, scene_id=0):
    cfg = config or SceneConfig()
    if cfg.n_classes < 2:
        raise ConfigError(f"need at least 2 classes (background + 1), got {cfg.n_classes}")
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    label = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    shapes = []
    for cls, kind in enumerate(_kinds(cfg.n_classes - 1), start=1):
        for _ in range(MAX_PLACEMENT_TRIES):
            cy, cx = rng.uniform(3, h - 3), rng.uniform(3, w - 3)
            mask, desc = _shape_mask(kind, yy, xx, cy, cx, rng)
            if kind == "ring":
                # the hole stays background but must not host other organs
                footprint = (yy - cy) ** 2 + (xx - cx) ** 2 <= desc["outer"] ** 2
            else:
                footprint = mask
            grown = gaussian_filter(footprint.astype(float), 1.0) > 0.05
            if mask.sum() >= cfg.min_organ_px and not (grown & occupied).any():
                break
        else:
            raise GenerationError(f"could not place class {cls} ({kind}) after {MAX_PLACEMENT_TRIES} tries")
        label[mask] = cls
        occupied |= footprint
        shapes.append(dict(desc, cy=cy, cx=cx, cls=cls))

    levels = list(cfg.class_levels) + [cfg.class_levels[-1]] * (cfg.n_classes - 1 - len(cfg.class_levels))
    bg = cfg.background_level + rng.normal(0, cfg.level_jitter)
    lv = [bg] + [levels[c] + rng.normal(0, cfg.level_jitter) for c in range(cfg.n_classes - 1)]
    image = np.asarray(lv)[label]
    if cfg.blur > 0:
        image = gaussian_filter(image, cfg.blur, mode="nearest")
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    meta = {"shapes": shapes, "noise_sigma": cfg.noise_sigma, "blur": cfg.blur,
            "levels": [float(v) for v in lv], "seed": int(seed) if np.isscalar(seed) else str(seed)}
    return ToyScene(scene_id, image, label, meta)


def scene_seed(seed, scene_id):
    return int(np.random.SeedSequence([int(seed), int(scene_id)]).generate_state(1)[0])


def split_counts(n_scenes, labeled_fraction):
    if not 0 < labeled_fraction <= 1:
        raise ConfigError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    n_test = int(math.floor(0.2 * n_scenes + 0.5))
    n_train = n_scenes - n_test
    if n_test < 1 or n_train < 1:
        raise ConfigError(f"{n_scenes} scenes cannot fill both a train and a test split")
    n_lab = max(1, int(math.floor(labeled_fraction * n_train + 0.5)))
    return n_lab, n_train - n_lab, n_test


def make_split(n_scenes, labeled_fraction, seed, config=None):
    """Shuffle scene ids, carve 20% test first, then label a fraction of the rest."""
    cfg = config or SceneConfig()
    n_lab, n_unl, n_test = split_counts(n_scenes, labeled_fraction)
    perm = np.random.default_rng(seed).permutation(n_scenes)
    test_ids = sorted(perm[:n_test].tolist())
    lab_ids = sorted(perm[n_test:n_test + n_lab].tolist())
    unl_ids = sorted(perm[n_test + n_lab:].tolist())

    def scenes(ids):
        return [generate_scene(scene_seed(seed, i), cfg, scene_id=i) for i in ids]

    return DatasetSplit(scenes(lab_ids), scenes(unl_ids), scenes(test_ids), cfg)


# ----------------------------------------------------------------------------
# on-disk format


def write_scene(path, scene, n_classes):
    h, w = scene.label.shape
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<III", w, h, n_classes))
        fh.write(scene.image.astype("<f8").tobytes())
        fh.write(scene.label.astype(np.uint8).tobytes())


def read_scene(path, scene_id):
    buf = Path(path).read_bytes()
    if buf[:7] != SCENE_MAGIC:
        raise ConfigError(f"{path}: not a scene file")
    w, h, _n = struct.unpack_from("<III", buf, 7)
    off = 19
    image = np.frombuffer(buf, dtype="<f8", count=w * h, offset=off).reshape(h, w).astype(np.float64)
    off += 8 * w * h
    label = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).copy()
    return ToyScene(scene_id, image, label)


def write_dataset(out_dir, split, seed, labeled_fraction):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = split.config
    for scene in split.labeled + split.unlabeled + split.test:
        write_scene(out / f"scene_{scene.scene_id}.bin", scene, cfg.n_classes)
    manifest = {
        "seed": int(seed),
        "labeled_fraction": labeled_fraction,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "splits": {
            "labeled": [s.scene_id for s in split.labeled],
            "unlabeled": [s.scene_id for s in split.unlabeled],
            "test": [s.scene_id for s in split.test],
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(data_dir):
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    raw = manifest["config"]
    cfg = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})

    def load(ids):
        return [read_scene(root / f"scene_{i}.bin", i) for i in ids]

    sp = manifest["splits"]
    return DatasetSplit(load(sp["labeled"]), load(sp["unlabeled"]), load(sp["test"]), cfg)
