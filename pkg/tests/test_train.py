import csv
import math

import numpy as np
import pytest

from tarnet import tensor as tn
from tarnet.blocks import Parameter
from tarnet.data import split, synth_corpus
from tarnet.encoder import EncoderConfig
from tarnet.errors import DataError, NumericError, UsageError
from tarnet.frontend import FrontendConfig
from tarnet.gradcheck import check_gradients
from tarnet.model import ModelConfig, TarnetModel
from tarnet.tensor import Tensor
from tarnet.train import LOG_FIELDS, TrainConfig, TrainState, cross_entropy, evaluate, sgd_step, train_loop

FCFG = FrontendConfig(n_mels=8)


def tiny_model(seed=0):
    enc = EncoderConfig(channels=4, fusion=8, hidden=8, dilations_s=[1], dilations_m=[2], dilations_l=[4], repeats=1)
    return TarnetModel(ModelConfig(n_mels=8, n_speakers=3, embed_dim=8, attention_hidden=8, encoder=enc), seed)


@pytest.fixture(scope="module")
def splits():
    corpus = synth_corpus(n_speakers=3, utt_per_spk=10, dur=0.4, seed=2)
    return split(corpus, seed=0)


def tiny_cfg(**kw):
    base = dict(lr=0.05, epochs=2, batch_size=4, crop_seconds=0.25, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_uniform_logits_give_log_k():
    assert cross_entropy(Tensor(np.zeros((4, 7))), [0, 3, 6, 2]).item() == pytest.approx(math.log(7))


def test_confident_logits_example():
    loss = cross_entropy(Tensor([[10.0, -10.0]]), [0]).item()
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_large_logits_stay_finite():
    assert np.isfinite(cross_entropy(Tensor([[1000.0, -1000.0, 0.0]]), [1]).item())


def test_cross_entropy_gradient():
    logits = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    (r,) = check_gradients(lambda: cross_entropy(logits, [0, 2, 1, 2]), [("logits", logits)])
    assert r.passed, r.error


def test_cross_entropy_bad_label():
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])


def test_sgd_weight_decay_example():
    p = Parameter([1.0])
    p.grad = np.zeros(1)
    sgd_step([p], TrainConfig(lr=0.001, weight_decay=5e-4))
    assert p.data[0] == pytest.approx(0.9999995, abs=1e-15)


def test_sgd_quadratic_example():
    p = Parameter([1.0])
    tn.backward(tn.tsum(p * p) * 0.5)
    sgd_step([p], TrainConfig(lr=0.001, weight_decay=0.0))
    assert p.data[0] == pytest.approx(1 - 0.001, abs=1e-15)


def test_sgd_fixed_point_and_decay_exemption():
    p, b = Parameter([2.0]), Parameter([3.0], decay=False)
    p.grad, b.grad = np.zeros(1), np.zeros(1)
    sgd_step([p, b], TrainConfig(weight_decay=0.0))
    assert p.data[0] == 2.0
    sgd_step([p, b], TrainConfig(weight_decay=0.1, lr=0.1))
    assert b.data[0] == 3.0 and p.data[0] < 2.0


def test_sgd_momentum():
    p = Parameter([0.0])
    vel = {}
    cfg = TrainConfig(lr=0.1, weight_decay=0.0, momentum=0.5)
    for _ in range(2):
        p.grad = np.ones(1)
        sgd_step([p], cfg, velocity=vel)
    assert p.data[0] == pytest.approx(-0.1 - 0.15)


def test_sgd_nan_gradient_names_step():
    p = Parameter([1.0])
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="step 7"):
        sgd_step([p], TrainConfig(), step=7)


def test_train_config_validation():
    for bad in (dict(lr=-1), dict(batch_size=0), dict(weight_decay=-1), dict(momentum=1.0)):
        with pytest.raises(UsageError):
            TrainConfig(**bad)


def params_of(model):
    return [p.data.copy() for p in model.parameters()]


def test_zero_epochs_leaves_model_untouched(splits):
    train, val, _ = splits
    m = tiny_model()
    before = params_of(m)
    state = train_loop(m, train, val, tiny_cfg(epochs=0), FCFG)
    assert state.epoch == 0 and state.history == []
    assert all(np.array_equal(a, b) for a, b in zip(before, params_of(m)))


def test_lr_zero_keeps_parameters(splits):
    train, val, _ = splits
    m = tiny_model()
    before = params_of(m)
    train_loop(m, train, val, tiny_cfg(lr=0.0, epochs=2), FCFG)
    assert all(np.array_equal(a, b) for a, b in zip(before, params_of(m)))


def test_same_seed_same_trajectory(splits):
    train, val, _ = splits
    s1 = train_loop(tiny_model(), train, val, tiny_cfg(), FCFG)
    s2 = train_loop(tiny_model(), train, val, tiny_cfg(), FCFG)
    assert [h["train_loss"] for h in s1.history] == [h["train_loss"] for h in s2.history]
    assert all(np.array_equal(a, b) for a, b in zip(params_of(s1.model), params_of(s2.model)))


def test_empty_split_is_usage_error(splits):
    train, _, _ = splits
    with pytest.raises(UsageError):
        train_loop(tiny_model(), train, [], tiny_cfg(), FCFG)


@pytest.mark.parametrize("momentum", [0.0, 0.9])
def test_resume_is_bit_exact(splits, tmp_path, momentum):
    train, val, _ = splits
    cfg = tiny_cfg(epochs=4, momentum=momentum)
    full = train_loop(tiny_model(), train, val, cfg, FCFG, out_dir=tmp_path / "a", save_every=2)
    state, _ = TrainState.load(tmp_path / "a" / "epoch_002.ckpt")
    assert state.epoch == 2
    resumed = train_loop(state, train, val, cfg, FCFG, out_dir=tmp_path / "b")
    assert resumed.epoch == 4
    for a, b in zip(full.model.parameters(), resumed.model.parameters()):
        assert np.array_equal(a.data, b.data)
    assert [h["train_loss"] for h in full.history] == [h["train_loss"] for h in resumed.history]


def test_outputs_written(splits, tmp_path):
    train, val, _ = splits
    train_loop(tiny_model(), train, val, tiny_cfg(epochs=2), FCFG, out_dir=tmp_path)
    for name in ("initial.ckpt", "last.ckpt", "best.ckpt", "epochs.csv"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "epochs.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_FIELDS
    assert [r[0] for r in rows[1:]] == ["1", "2"]


def test_loss_decreases_on_synthetic_task(splits):
    train, val, _ = splits
    m = tiny_model()
    initial = train_loop(tiny_model(), train, val, tiny_cfg(lr=0.0, epochs=1), FCFG).history[0]["train_loss"]
    state = train_loop(m, train, val, tiny_cfg(epochs=10), FCFG)
    losses = [h["train_loss"] for h in state.history]
    assert np.median(losses) < initial


def test_evaluate_full_length_utterances(splits):
    _, _, test = splits
    rep = evaluate(tiny_model(), test, FCFG, batch=2)
    assert rep.scores.shape == (len(test), 3)
    assert 0 <= rep.top1 <= rep.top5 <= 1
