import numpy as np
import pytest

from multico3d import diffkernel as dk
from multico3d.diffkernel import DimensionError
from multico3d.gradsuite import check_model
from multico3d.model import (Checkpoint, CheckpointError, ModelConfig, SegModel, axis_channel_order, input_slices,
                             load_checkpoint, lwf_init, predict_volume, save_checkpoint)

import oracles

CFG = ModelConfig(in_channels=9, widths=(4, 6), n_base=3, n_novel=0, dropout=0.4)


@pytest.fixture
def base():
    return SegModel(CFG, seed=3)


def _x(seed=0, shape=(9, 8, 12)):
    return np.random.default_rng(seed).normal(size=shape)


def test_output_shapes_single_slice():
    model = SegModel(ModelConfig(widths=(4, 6), n_base=3, n_novel=2), seed=0)
    b, n, e = model.forward(_x())
    assert b.shape == (3, 8, 12) and n.shape == (2, 8, 12) and e.shape == (6, 8, 12)


def test_output_shapes_batch(base):
    b, n, e = base.forward(np.stack([_x(0), _x(1)]))
    assert b.shape == (2, 3, 8, 12) and n is None and e.shape == (2, 6, 8, 12)


def test_zero_weights_give_half_everywhere(base):
    for p in base.params.values():
        p.value = np.zeros_like(p.value)
    assert np.all(base.forward(_x())[0].value == 0.5)


def test_heads_stay_in_unit_interval(base):
    out = base.forward(_x(2) * 50)[0].value
    assert np.all((out >= 0) & (out <= 1)) and np.all(np.isfinite(out))


def test_fixed_seed_fixed_input_bit_identical():
    a = SegModel(CFG, seed=9).forward(_x(1))[0].value
    b = SegModel(CFG, seed=9).forward(_x(1))[0].value
    assert a.tobytes() == b.tobytes()


def test_dropout_only_with_rng(base):
    x = _x(4)
    assert base.forward(x)[0].value.tobytes() == base.forward(x)[0].value.tobytes()
    assert not np.array_equal(base.forward(x, rng=np.random.default_rng(0))[0].value, base.forward(x)[0].value)


def test_bad_extents_and_channels(base):
    with pytest.raises(DimensionError, match="divisible"):
        base.forward(_x(shape=(9, 6, 8)))
    with pytest.raises(DimensionError, match="channels"):
        base.forward(_x(shape=(4, 8, 8)))


def test_lwf_init_copies_base_and_adds_fresh_head(base):
    frozen, novel = lwf_init(base, n_novel=2, seed=0)
    x = _x(5)
    assert novel.forward(x)[0].value.tobytes() == frozen.forward(x)[0].value.tobytes()
    assert novel.forward(x)[0].value.tobytes() == base.forward(x)[0].value.tobytes()
    base_values = [p.value for p in base.params.values()]
    for name, p in novel.component("decoder_novel").items():
        if name.endswith(".b"):
            continue  # biases start at zero in every head
        assert not any(p.value.shape == v.shape and np.array_equal(p.value, v) for v in base_values), name
    assert not any(p.trainable for p in frozen.params.values())


def test_lwf_init_rejects_step_t_model():
    with pytest.raises(CheckpointError):
        lwf_init(SegModel(ModelConfig(widths=(4, 6), n_base=3, n_novel=1)), 1)


def test_frozen_model_untouched_by_novel_update(base):
    frozen, novel = lwf_init(base, n_novel=1)
    before = {k: v.tobytes() for k, v in frozen.state().items()}
    x = _x(6)
    out_before = frozen.forward(x)[0].value.copy()
    b, n, _ = novel.forward(x)
    root = dk.add(dk.mean(b), dk.mean(n))
    grads = dk.backward(root)
    for p in novel.trainable():
        p.value = p.value - 0.1 * grads[p.name]
    assert {k: v.tobytes() for k, v in frozen.state().items()} == before
    assert frozen.forward(x)[0].value.tobytes() == out_before.tobytes()
    assert novel.forward(x)[0].value.tobytes() != out_before.tobytes()


def test_axis_channel_order():
    assert axis_channel_order(0) == [0, 1, 2, 3, 4, 5, 6, 7, 8]
    assert axis_channel_order(1) == [1, 0, 2, 4, 3, 5, 7, 6, 8]
    assert axis_channel_order(2) == [2, 0, 1, 5, 3, 4, 8, 6, 7]
    assert input_slices(np.zeros((9, 4, 8, 12)), 2).shape == (12, 9, 4, 8)


def test_predict_volume_matches_slice_stack_oracle():
    model = SegModel(ModelConfig(widths=(2, 3), n_base=2, n_novel=1, dropout=0.4), seed=1)
    vol = np.random.default_rng(0).normal(size=(9, 4, 8, 4))
    got = predict_volume(model, vol)
    ref = oracles.slice_stack_average(lambda s: model.predict(s[None])[0], vol)
    assert got.shape == (3, 4, 8, 4)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_predict_volume_constant_half():
    model = SegModel(ModelConfig(widths=(2,), n_base=2), seed=0)
    for p in model.params.values():
        p.value = np.zeros_like(p.value)
    assert np.all(predict_volume(model, np.ones((9, 4, 4, 6))) == 0.5)


def test_predict_volume_rejects_bad_extent(base):
    with pytest.raises(DimensionError):
        predict_volume(base, np.zeros((9, 4, 6, 4)))


def test_checkpoint_round_trip(tmp_path, base):
    save_checkpoint(Checkpoint.of(base, step=0, note="x"), tmp_path / "m.ckpt")
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.meta == {"note": "x"} and ck.config == CFG
    x = _x(7)
    assert ck.build().forward(x)[0].value.tobytes() == base.forward(x)[0].value.tobytes()


def test_checkpoint_bytes_are_stable(tmp_path, base):
    save_checkpoint(Checkpoint.of(base, 0), tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_renamed_parameter_is_named_in_error(base):
    params = base.state()
    params["encoder.0.weight"] = params.pop("encoder.0.w")
    with pytest.raises(CheckpointError, match="encoder.0.w"):
        Checkpoint(CFG, params).build()


def test_cross_step_load_keeps_base_head(tmp_path, base):
    save_checkpoint(Checkpoint.of(base, 0), tmp_path / "b.ckpt")
    frozen, novel = lwf_init(load_checkpoint(tmp_path / "b.ckpt").build(), 2)
    x = _x(8)
    assert novel.forward(x)[0].value.tobytes() == base.forward(x)[0].value.tobytes()


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")


def test_truncated_checkpoint(tmp_path, base):
    save_checkpoint(Checkpoint.of(base, 0), tmp_path / "t")
    raw = (tmp_path / "t").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t")


def test_model_gradient_check_small():
    assert check_model(instances=2).passed
