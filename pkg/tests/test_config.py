import pytest

from dacl.config import (ABLATIONS, ABLATION_ROWS, TrainConfig, apply_ablation, load_config, parse_text)
from dacl.errors import ConfigError


def test_defaults_validate():
    cfg = TrainConfig().validate()
    assert cfg.batch_size == cfg.batch_labeled + cfg.batch_unlabeled
    assert cfg.horizon == cfg.iterations


def test_validation_names_every_bad_field():
    with pytest.raises(ConfigError) as info:
        TrainConfig(tau=0.0, phi=1.0, scales=(8, 4)).validate()
    msg = str(info.value)
    for name in ("tau", "phi", "scales"):
        assert name in msg


def test_text_round_trip():
    cfg = TrainConfig(lambda_cl=0.05, scales=(2, 4), single_scale=True, t_max=500)
    assert TrainConfig(**parse_text(cfg.to_text())) == cfg


def test_parse_errors():
    with pytest.raises(ConfigError):
        parse_text("no_such_key = 1")
    with pytest.raises(ConfigError):
        parse_text("tau 0.4")
    with pytest.raises(ConfigError):
        parse_text("uniform_w = maybe")


def test_file_then_override_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\ntau = 0.2\nn_q = 3\n")
    cfg = load_config(path, overrides={"n_q": 5})
    assert cfg.tau == 0.2 and cfg.n_q == 5


def test_ablation_rows_are_cumulative():
    order = [ABLATION_ROWS[r] for r in ("II", "III", "IV", "V", "VI")]
    flags = ("pcl_random_sampling", "single_scale", "no_bank", "uniform_w")
    # every toggle switches a component off, so count the components left on
    on = [sum(not getattr(apply_ablation(TrainConfig(), a), f) for f in flags) for a in order]
    assert on == sorted(on) and on[-1] == 4 and on[0] == 0
    assert apply_ablation(TrainConfig(), "baseline").lambda_cl == 0.0
    assert set(ABLATIONS) == set(ABLATION_ROWS.values())
    with pytest.raises(ConfigError):
        apply_ablation(TrainConfig(), "nope")


def test_digest_tracks_content():
    assert TrainConfig().digest() == TrainConfig().digest()
    assert TrainConfig().digest() != TrainConfig(seed=1).digest()


def test_desk_config_file_mirrors_code():
    from pathlib import Path

    from dacl.config import desk_config

    path = Path(__file__).resolve().parents[1] / "configs" / "desk_scale.cfg"
    assert load_config(path) == desk_config()
