import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dacl import tensor as T
from dacl.bank import BankSet
from dacl.config import TrainConfig, apply_ablation
from dacl.cotrain import (Batch, StepState, Trainer, cross_entropy, cross_supervised_loss, load_checkpoint,
                          loss_weights, save_checkpoint, soft_dice_loss, train_step, warmup_lambda)
from dacl.errors import ConfigError, ContractError, StageError
from dacl.model import SegModel
from dacl.synthdata import make_split

from conftest import central_diff

SMALL = dict(iterations=40, warmup_gate_iters=10, batch_labeled=1, batch_unlabeled=1, n_q=2,
             n_p_plus=4, n_p_minus=4, conv1_channels=4, conv2_channels=4, proj_hidden=4, d_proj=4,
             bank_size=16, scales=(1, 2, 4), lr=0.1)


@pytest.fixture(scope="module")
def split():
    return make_split(10, 0.2, 0)


def test_warmup_values():
    assert warmup_lambda(3000, 3000) == 0.1
    assert warmup_lambda(0, 3000) == pytest.approx(6.737946999085467e-04, rel=1e-12)
    assert warmup_lambda(1500, 3000) == pytest.approx(0.1 * math.exp(-1.25), abs=1e-12)
    assert warmup_lambda(1000, 3000) == pytest.approx(0.1 * math.exp(-5 * (2 / 3) ** 2), abs=1e-15)


@given(st.integers(0, 2999))
def test_warmup_is_increasing_and_bounded(t):
    a, b = warmup_lambda(t, 3000), warmup_lambda(t + 1, 3000)
    assert 0 < a < b <= 0.1


def test_warmup_errors():
    with pytest.raises(ConfigError):
        warmup_lambda(0, 0)
    with pytest.raises(ContractError):
        warmup_lambda(5, 4)


def test_gate_and_fixed_lambda():
    cfg = TrainConfig()
    assert loss_weights(999, cfg) == (1.0, 0.0)
    assert loss_weights(1000, cfg)[1] == pytest.approx(0.1 * math.exp(-5 * (2 / 3) ** 2))
    assert loss_weights(2000, cfg.replace(lambda_cl=0.3)) == (1.0, 0.3)


def test_uniform_logits_cross_entropy_is_log_n():
    ce = cross_entropy(T.Tensor(np.zeros((2, 3, 3, 4))), np.zeros((2, 3, 3), dtype=int))
    assert ce.item() == pytest.approx(math.log(4), abs=1e-12)


def test_perfect_prediction_has_near_zero_dice_loss():
    labels = np.array([[0, 1], [2, 3]])
    logits = np.eye(4)[labels] * 40.0
    assert soft_dice_loss(T.Tensor(logits), labels).item() < 1e-6


def test_loss_gradients_match_finite_differences(rng):
    labels = rng.integers(0, 3, size=(1, 3, 3))
    x = rng.normal(size=(1, 3, 3, 3))
    for fn in (lambda t: cross_entropy(t, labels), lambda t: soft_dice_loss(t, labels),
               lambda t: cross_supervised_loss(t, T.Tensor(x[..., ::-1].copy()))):
        t = T.Tensor(x.copy(), requires_grad=True)
        T.backward(fn(t))
        fd = central_diff(lambda a: fn(T.Tensor(a)).item(), x.copy())
        np.testing.assert_allclose(t.grad, fd, atol=1e-7)


def test_label_range_checked():
    with pytest.raises(ContractError):
        cross_entropy(T.Tensor(np.zeros((1, 2, 2, 3))), np.full((1, 2, 2), 3))


def test_model_shapes():
    m = SegModel(4, c1=4, c2=4, proj_hidden=4, d_proj=6, seed=0)
    logits, proj = m.forward(np.random.default_rng(0).random((2, 8, 8)))
    assert logits.shape == (2, 8, 8, 4) and proj.shape == (2, 8, 8, 6)


def _step_once(split, **over):
    cfg = TrainConfig(**{**SMALL, **over}).validate()
    models = (SegModel(4, c1=4, c2=4, proj_hidden=4, d_proj=4, seed=1),
              SegModel(4, c1=4, c2=4, proj_hidden=4, d_proj=4, seed=2))
    opts = [T.SGD(m.parameters(), cfg.lr) for m in models]
    state = StepState(neg_rng=np.random.default_rng(0), optimizers=opts)
    banks = BankSet(4, cfg.bank_size, cfg.d_proj)
    lab = split.labeled[0]
    batch = Batch(lab.image[None], lab.label[None].astype(np.int64), split.unlabeled[0].image[None],
                  [lab.scene_id, split.unlabeled[0].scene_id])
    return train_step(models, banks, batch, cfg, 20, state), banks


def test_step_record_and_bank_growth(split):
    rec, banks = _step_once(split)
    assert set(rec) >= {"t", "loss_total", "loss_sup", "loss_cross", "loss_cl", "lambda_cl", "bank_fill"}
    assert rec["lambda_cl"] > 0 and rec["loss_cl"] != 0.0
    assert sum(banks.fill()) > 0


def test_zero_lambda_skips_contrastive_work(split):
    rec, banks = _step_once(split, lambda_cl=0.0)
    assert rec["loss_cl"] == 0.0
    assert banks.fill() == [0, 0, 0, 0]


def test_no_bank_toggle_leaves_banks_empty(split):
    _, banks = _step_once(split, no_bank=True)
    assert banks.fill() == [0, 0, 0, 0]


def test_stage_errors_name_the_stage(split):
    cfg = TrainConfig(**SMALL).validate()
    models = (SegModel(4, c1=4, c2=4, proj_hidden=4, d_proj=4), SegModel(4, c1=4, c2=4, proj_hidden=4, d_proj=4))
    lab = split.labeled[0]
    bad = Batch(lab.image[None], np.full((1, 32, 32), 9), lab.image[None], [])
    with pytest.raises(StageError) as info:
        train_step(models, BankSet(4, 16, 4), bad, cfg, 20, StepState())
    assert info.value.stage == "supervised"


def test_training_runs_are_deterministic(split):
    cfg = apply_ablation(TrainConfig(**SMALL), "none")
    logs = []
    for _ in range(2):
        tr = Trainer(cfg, split)
        logs.append([tr.step() for _ in range(25)])
        logs[-1].append(tr.evaluate().to_json())
    assert logs[0] == logs[1]


def test_checkpoint_round_trip(split, tmp_path):
    cfg = TrainConfig(**SMALL)
    tr = Trainer(cfg, split)
    for _ in range(3):
        tr.step()
    save_checkpoint(tmp_path / "c.bin", tr)
    text, digest, t, states = load_checkpoint(tmp_path / "c.bin")
    assert text == cfg.to_text() and digest == cfg.digest() and t == 3
    for model, arrays in zip(tr.models, states):
        for p, a in zip(model.parameters(), arrays):
            np.testing.assert_array_equal(p.data, a)
