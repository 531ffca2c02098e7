import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from abcnet.checkpoint import (BadMagic, CheckpointError, TruncatedPayload, VersionMismatch,
                               load_checkpoint, save_checkpoint)
from abcnet.data import SceneSpec, generate_dataset
from abcnet.gradcheck import grad_check
from abcnet.model import ABC, ABCConfig
from abcnet.tensor import Tensor
from abcnet.train import (AdamWState, NumericalError, TrainConfig, adamw_step, deep_supervision_loss,
                          fit, poly_lr, soft_iou_loss)


def loss_value(logits, target, eps=1.0):
    return soft_iou_loss(Tensor(logits), target, eps).item()


# -- soft IoU ------------------------------------------------------------------

def test_soft_iou_perfect_prediction():
    t = np.zeros((1, 1, 4, 4))
    t.flat[:5] = 1
    assert loss_value(np.where(t > 0, 40.0, -40.0), t) == pytest.approx(0.0, abs=1e-3)


def test_soft_iou_empty_prediction():
    t = np.zeros((1, 1, 4, 4))
    t.flat[:9] = 1
    assert loss_value(np.full(t.shape, -40.0), t) == pytest.approx(0.9, abs=1e-3)


def test_soft_iou_half_probability():
    t = np.zeros((1, 1, 2, 2))
    t[0, 0, 0, 0] = 1
    assert loss_value(np.zeros(t.shape), t) == pytest.approx(1 - 1.5 / 3.5, abs=1e-6)


def test_soft_iou_rejects_non_binary_target():
    with pytest.raises(ValueError, match="binary"):
        soft_iou_loss(Tensor(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5))


def test_soft_iou_gradient_4x4(rng):
    for _ in range(5):
        logits = Tensor(rng.normal(size=(1, 1, 4, 4)) * 2)
        target = (rng.random((1, 1, 4, 4)) < 0.4).astype(np.float32)
        assert grad_check(lambda p: soft_iou_loss(p, target), logits) < 1e-3


@given(st.integers(0, 2**31 - 1), st.integers(0, 15))
def test_soft_iou_in_range_and_monotone_per_pixel(seed, pixel):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(1, 1, 4, 4)) * 2
    target = (r.random((1, 1, 4, 4)) < 0.5).astype(np.float32)
    base = loss_value(logits, target)
    assert 0.0 <= base < 1.0
    step = logits.copy()
    # push one logit toward its target
    step.flat[pixel] += 1.0 if target.flat[pixel] else -1.0
    assert loss_value(step, target) < base


# -- deep supervision ------------------------------------------------------------

def test_deep_supervision_mean(rng):
    main = Tensor(rng.normal(size=(1, 1, 4, 4)))
    t = (rng.random((1, 1, 4, 4)) < 0.3).astype(np.float32)
    single = soft_iou_loss(main, t).item()
    assert deep_supervision_loss(main, [], t).item() == pytest.approx(single)
    assert deep_supervision_loss(main, [main, main, main], t).item() == pytest.approx(single, rel=1e-6)


def test_deep_supervision_arithmetic_mean():
    # build logits whose losses are known: a single-pixel target and an all-negative map gives 1 - 1/2
    t = np.zeros((1, 1, 1, 2))
    t[0, 0, 0, 0] = 1
    losses = {}
    for name, lg in {"a": [40.0, -40.0], "b": [-40.0, -40.0], "c": [40.0, 40.0]}.items():
        losses[name] = loss_value(np.array(lg).reshape(t.shape), t)
    mixed = deep_supervision_loss(Tensor(np.array([40.0, -40.0]).reshape(t.shape)),
                                  [Tensor(np.array(v).reshape(t.shape)) for v in ([-40.0, -40.0], [40.0, 40.0])],
                                  t).item()
    assert mixed == pytest.approx(np.mean([losses["a"], losses["b"], losses["c"]]), abs=1e-6)


# -- optimiser / schedule --------------------------------------------------------

def test_adamw_zero_grad_no_decay_leaves_params():
    p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    before = p["w"].copy()
    adamw_step(p, {"w": np.zeros(2, dtype=np.float32)}, AdamWState(), lr=0.1, weight_decay=0.0)
    assert np.array_equal(p["w"], before)


def test_adamw_first_step_closed_form():
    p = {"w": np.array([0.5], dtype=np.float32)}
    adamw_step(p, {"w": np.array([1.0], dtype=np.float32)}, AdamWState(), lr=1e-3, weight_decay=0.0)
    assert p["w"][0] == pytest.approx(0.5 - 1e-3, abs=1e-6)


def test_adamw_pure_decay():
    p = {"w": np.array([1.0], dtype=np.float32)}
    adamw_step(p, {"w": np.array([0.0], dtype=np.float32)}, AdamWState(), lr=0.1, weight_decay=0.01)
    assert p["w"][0] == pytest.approx(0.999, abs=1e-7)


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adamw_step({"w": np.zeros(2, np.float32)}, {"w": np.zeros(3, np.float32)}, AdamWState(), lr=0.1)


def test_poly_lr_examples():
    assert poly_lr(3e-4, 0, 100) == 3e-4
    assert poly_lr(3e-4, 100, 100) == 0.0
    assert poly_lr(3e-4, 50, 100, 0.9) == pytest.approx(1.608e-4, rel=1e-3)
    assert poly_lr(3e-4, 150, 100) == 0.0


@given(st.integers(1, 500), st.floats(0.1, 3.0))
def test_poly_lr_non_increasing(max_iter, power):
    lrs = [poly_lr(1.0, i, max_iter, power) for i in range(max_iter + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(base_lr=-1.0)


# -- fit ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(SceneSpec(resolution=(16, 16), seed=3), 4)


def tiny_model(seed=0):
    return ABC(ABCConfig(input_dim=2, input_resolution=(16, 16)), seed=seed)


def test_fit_lr_zero_no_decay_is_bitwise_noop(tiny_data):
    model = tiny_model()
    before = {k: p.data.copy() for k, p in model.named_parameters()}
    fit(model, tiny_data, TrainConfig(epochs=1, base_lr=0.0, weight_decay=0.0, batch_size=4))
    for k, p in model.named_parameters():
        assert np.array_equal(p.data, before[k]), k


def test_fit_deterministic(tiny_data, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, seed=5, hflip=True)
    a, b = tiny_model(), tiny_model()
    ra = fit(a, tiny_data, cfg, log_path=tmp_path / "a.csv")
    rb = fit(b, tiny_data, cfg, log_path=tmp_path / "b.csv")
    assert [r.mean_loss for r in ra] == [r.mean_loss for r in rb]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data)


def test_fit_log_format(tiny_data, tmp_path):
    fit(tiny_model(), tiny_data, TrainConfig(epochs=1, batch_size=4), log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert len(lines) == 1
    epoch, loss, lr, iou = lines[0].split(",")
    assert epoch == "1" and 0 <= float(loss) <= 1 and 0 <= float(iou) <= 1


def test_fit_loss_decreases(tiny_data):
    recs = fit(tiny_model(), tiny_data, TrainConfig(epochs=15, batch_size=4, base_lr=1e-3))
    assert recs[-1].mean_loss < recs[0].mean_loss


def test_fit_resolution_mismatch(tiny_data):
    model = ABC(ABCConfig(input_dim=2, input_resolution=(32, 32)))
    with pytest.raises(ValueError, match="resolution"):
        fit(model, tiny_data, TrainConfig(epochs=1))


def test_fit_aborts_on_nan(tiny_data):
    model = tiny_model()
    model.head.bias.data[...] = np.nan
    with pytest.raises(NumericalError):
        fit(model, tiny_data, TrainConfig(epochs=1))


def test_fit_checkpoint_cadence(tiny_data, tmp_path):
    fit(tiny_model(), tiny_data, TrainConfig(epochs=4, batch_size=4, checkpoint_every=2,
                                             checkpoint_dir=str(tmp_path)))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["best.abck", "epoch_0002.abck", "epoch_0004.abck"]


# -- checkpoints ----------------------------------------------------------------------

def trained(tiny_data):
    model, state = tiny_model(), AdamWState()
    fit(model, tiny_data, TrainConfig(epochs=1, batch_size=2), state=state)
    return model, state


def test_checkpoint_round_trip_bitwise(tiny_data, tmp_path):
    model, state = trained(tiny_data)
    save_checkpoint(model, state, tmp_path / "m.abck")
    loaded, lstate = load_checkpoint(tmp_path / "m.abck")
    assert loaded.config == model.config
    for (na, a), (nb, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()
    assert lstate.step == state.step
    for k in state.m:
        assert state.m[k].tobytes() == lstate.m[k].tobytes()
        assert state.v[k].tobytes() == lstate.v[k].tobytes()


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(tiny_model(), AdamWState(step=9), tmp_path / "m.abck")
    raw = (tmp_path / "m.abck").read_bytes()
    assert raw[:4] == b"ABCK"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[-8:], "little") == 9


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.abck"
    save_checkpoint(tiny_model(), AdamWState(), path)
    raw = path.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-20])
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "ver").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(TruncatedPayload) as e:
        load_checkpoint(tmp_path / "trunc")
    assert e.value.code == "truncated_payload"
    with pytest.raises(BadMagic) as e:
        load_checkpoint(tmp_path / "magic")
    assert e.value.code == "bad_magic"
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "ver")
    assert issubclass(TruncatedPayload, CheckpointError)


def test_resume_with_zero_lr_is_bitwise_noop(tiny_data, tmp_path):
    model, state = trained(tiny_data)
    save_checkpoint(model, state, tmp_path / "m.abck")
    resumed, rstate = load_checkpoint(tmp_path / "m.abck")
    fit(resumed, tiny_data, TrainConfig(epochs=2, base_lr=0.0, weight_decay=0.0, batch_size=2), state=rstate)
    for (_, a), (_, b) in zip(model.named_parameters(), resumed.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert math.isfinite(rstate.step) and rstate.step == state.step + 4
