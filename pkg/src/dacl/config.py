"""Training configuration and the plain-text ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class TrainConfig:
    # sampling / loss
    n_q: int = 256
    n_p_plus: int = 512
    n_p_minus: int = 512
    tau: float = 0.4
    phi: float = 0.5
    gamma: float = 1.0
    bank_size: int = 1000
    scales: tuple = (4, 8, 16)
    # loss weights and schedule
    lambda_cross: float = 1.0
    lambda_cl: float | None = None      # None -> Gaussian warm-up schedule
    warmup_base: float = 0.1
    warmup_sharpness: float = 5.0
    t_max: int | None = None            # None -> iterations
    warmup_gate_iters: int = 1000
    # optimiser
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # run
    iterations: int = 3000
    batch_labeled: int = 2
    batch_unlabeled: int = 6
    labeled_fraction: float = 0.05
    seed: int = 0
    eval_every: int = 0
    augment: bool = True
    # network
    conv1_channels: int = 8
    conv2_channels: int = 16
    proj_hidden: int = 16
    d_proj: int = 16
    decoder_dropout: float = 0.0
    # ablation toggles
    pcl_random_sampling: bool = False
    single_scale: bool = False
    no_bank: bool = False
    uniform_w: bool = False
    infonce_denominator: bool = False
    negatives_from_all: bool = False

    @property
    def batch_size(self):
        return self.batch_labeled + self.batch_unlabeled

    @property
    def horizon(self):
        return self.t_max if self.t_max is not None else self.iterations

    def validate(self):
        problems = []
        for name in ("n_q", "n_p_plus", "n_p_minus", "bank_size", "iterations", "batch_labeled",
                     "conv1_channels", "conv2_channels", "proj_hidden", "d_proj"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be positive, got {getattr(self, name)}")
        if self.batch_unlabeled < 0:
            problems.append(f"batch_unlabeled: must be >= 0, got {self.batch_unlabeled}")
        if self.tau <= 0:
            problems.append(f"tau: must be positive, got {self.tau}")
        if not 0 <= self.phi < 1:
            problems.append(f"phi: must lie in [0, 1), got {self.phi}")
        if self.gamma <= 0:
            problems.append(f"gamma: must be positive, got {self.gamma}")
        if not 0 < self.labeled_fraction <= 1:
            problems.append(f"labeled_fraction: must lie in (0, 1], got {self.labeled_fraction}")
        if self.horizon <= 0:
            problems.append(f"t_max: must be positive, got {self.horizon}")
        if self.lr <= 0:
            problems.append(f"lr: must be positive, got {self.lr}")
        if not 0 <= self.decoder_dropout < 1:
            problems.append(f"decoder_dropout: must lie in [0, 1), got {self.decoder_dropout}")
        ks = tuple(self.scales)
        if not ks or any(k < 1 for k in ks) or any(b <= a for a, b in zip(ks, ks[1:])):
            problems.append(f"scales: must be strictly increasing positive ints, got {ks}")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).digest()


# Ablation rows I..VI, keyed by the component each row adds last.
ABLATIONS = {
    "baseline": dict(lambda_cl=0.0),
    "pcl": dict(pcl_random_sampling=True, single_scale=True, no_bank=True, uniform_w=True),
    "da": dict(pcl_random_sampling=False, single_scale=True, no_bank=True, uniform_w=True),
    "ms": dict(pcl_random_sampling=False, single_scale=False, no_bank=True, uniform_w=True),
    "bank": dict(pcl_random_sampling=False, single_scale=False, no_bank=False, uniform_w=True),
    "none": dict(pcl_random_sampling=False, single_scale=False, no_bank=False, uniform_w=False),
}
ABLATION_ROWS = {"I": "baseline", "II": "pcl", "III": "da", "IV": "ms", "V": "bank", "VI": "none"}


# Desk-scale settings shared by every ablation row. Sampling sizes shrink with
# the batch: a 2+2 batch yields at most 8 prototypes per class across both
# models, so N_q must stay well below that for positives to exist. The toy
# network has no normalization layers and needs a larger step than 0.01.
DESK_SCALE = dict(
    batch_labeled=2,
    batch_unlabeled=2,
    n_q=4,
    n_p_plus=8,
    n_p_minus=8,
    conv2_channels=8,
    lr=0.1,
)


def desk_config(**overrides):
    return TrainConfig(**{**DESK_SCALE, **overrides}).validate()


def apply_ablation(config, name):
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return config.replace(**ABLATIONS[name])


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _field_types():
    return {f.name: f for f in fields(TrainConfig)}


def parse_value(name, raw):
    """Coerce a textual value to the type of TrainConfig field ``name``."""
    fdef = _field_types().get(name)
    if fdef is None:
        raise ConfigError(f"{name}: unknown config key")
    raw = raw.strip()
    default = fdef.default
    try:
        if name == "scales":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if raw.lower() == "none" and name in ("lambda_cl", "t_max"):
            return None
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int) or name == "t_max":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def parse_text(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        out[key] = parse_value(key, raw)
    return out


def load_config(path=None, overrides=None, base=None):
    """Defaults, then the config file, then explicit overrides."""
    cfg = base or TrainConfig()
    if path is not None:
        with open(path) as fh:
            cfg = cfg.replace(**parse_text(fh.read()))
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg.validate()


__all__ = ["TrainConfig", "DESK_SCALE", "desk_config", "ABLATIONS", "ABLATION_ROWS", "apply_ablation", "load_config",
           "parse_text", "parse_value"]
