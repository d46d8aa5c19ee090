"""Network assembly: shapes, presets, checkpoints, inference helpers."""

import warnings
from dataclasses import replace

import numpy as np
import pytest

from stfocal.backbone import (PRESETS, FocalVideoNetwork, NetworkConfig,
                              load_checkpoint, load_into,
                              multi_view_inference, np_softmax, preset_config,
                              save_checkpoint)
from stfocal.modulation import (SpatialFocalModulation,
                                SpatioTemporalFocalModulation,
                                TemporalFocalModulation)
from stfocal.nn import drop_path, trunc_normal
from stfocal.tensor import ConfigError, ShapeError, Tensor, UsageError, no_grad

warnings.filterwarnings("ignore", message="focal kernel")

TINY = preset_config("tiny", num_classes=4, in_channels=1, frames=4,
                     height=32, width=32, drop_path_rate=0.0)


def small_video(batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch, TINY.frames, TINY.height, TINY.width,
                                TINY.in_channels))


def test_preset_table():
    assert PRESETS["t"]["blocks_per_stage"] == (2, 2, 6, 2)
    assert PRESETS["s"]["blocks_per_stage"] == (2, 2, 18, 2)
    assert PRESETS["b"]["embed_dim"] == 128
    cfg = preset_config("s", num_classes=10)
    assert cfg.embed_dim == 96 and cfg.num_classes == 10
    with pytest.raises(ConfigError):
        preset_config("xl", num_classes=10)


def test_config_validation():
    with pytest.raises(ConfigError):
        replace(TINY, height=30)  # not divisible by 32
    with pytest.raises(ConfigError):
        replace(TINY, embedding="tubelet_2", frames=5)  # odd frame count
    with pytest.raises(ConfigError):
        replace(TINY, embedding="voxels")
    with pytest.raises(ConfigError):
        replace(TINY, precision="float16")
    with pytest.raises(ConfigError):
        replace(TINY, blocks_per_stage=(1, 1, 1))
    with pytest.raises(ConfigError):
        replace(TINY, mlp_ratio=0.0)
    with pytest.raises(ConfigError):
        replace(TINY, drop_path_rate=1.5)


def test_stage_widths_double():
    assert TINY.stage_widths == (32, 64, 128, 256)
    cfg = preset_config("b", num_classes=2)
    assert cfg.stage_widths == (128, 256, 512, 1024)


def test_forward_shape_and_determinism():
    net = FocalVideoNetwork(TINY, seed=3)
    x = small_video()
    with no_grad():
        a = net.forward(x).data
        b = net.forward(x).data
    assert a.shape == (2, 4)
    np.testing.assert_array_equal(a, b)


def test_seed_controls_initialization():
    p1 = dict(FocalVideoNetwork(TINY, seed=1).named_parameters())
    p2 = dict(FocalVideoNetwork(TINY, seed=1).named_parameters())
    p3 = dict(FocalVideoNetwork(TINY, seed=2).named_parameters())
    assert all(np.array_equal(p1[k].data, p2[k].data) for k in p1)
    assert any(not np.array_equal(p1[k].data, p3[k].data) for k in p1)


def test_input_shape_validation():
    net = FocalVideoNetwork(TINY, seed=0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 4, 32, 32)))  # missing channel axis
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 8, 32, 32, 1)))  # wrong frame count
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 4, 64, 32, 1)))  # wrong height
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 4, 32, 32, 3)))  # wrong channels


def test_tubelet_embedding_halves_frames():
    cfg = replace(TINY, embedding="tubelet_2")
    assert cfg.token_frames == 2
    net = FocalVideoNetwork(cfg, seed=0)
    with no_grad():
        out = net.forward(small_video())
    assert out.shape == (2, 4)


def test_factorized_encoder_role_split():
    cfg = replace(TINY, variant="c_factorized_encoder")
    net = FocalVideoNetwork(cfg, seed=0)
    kinds = [type(b.mod) for b in net.iter_blocks()]
    # 5 blocks: ceil half spatial, floor half temporal.
    assert kinds[:3] == [SpatialFocalModulation] * 3
    assert kinds[3:] == [TemporalFocalModulation] * 2
    assert all(b.mod_t is None for b in net.iter_blocks())


def test_alternating_design_has_paired_sublayers():
    cfg = replace(TINY, variant="d_alternating")
    net = FocalVideoNetwork(cfg, seed=0)
    for block in net.iter_blocks():
        assert isinstance(block.mod, SpatialFocalModulation)
        assert isinstance(block.mod_t, TemporalFocalModulation)


def test_parallel_design_single_fused_layer():
    net = FocalVideoNetwork(replace(TINY, variant="e_parallel"), seed=0)
    for block in net.iter_blocks():
        assert isinstance(block.mod, SpatioTemporalFocalModulation)
        assert block.mod_t is None


def test_float32_precision_propagates():
    cfg = replace(TINY, precision="float32")
    net = FocalVideoNetwork(cfg, seed=0)
    assert all(p.dtype == np.float32 for _, p in net.named_parameters())
    with no_grad():
        out = net.forward(small_video().astype(np.float32))
    assert out.dtype == np.float32


def test_drop_path_semantics():
    x = Tensor(np.ones((8, 3)), requires_grad=True)
    assert drop_path(x, 1.0, True, None) is x
    assert drop_path(x, 0.4, False, None) is x
    rng = np.random.default_rng(0)
    out = drop_path(x, 0.5, True, rng).data
    rows = out[:, 0]
    assert set(np.round(rows, 6)) <= {0.0, 2.0}  # kept rows scaled by 1/keep
    with pytest.raises(ConfigError):
        drop_path(x, 0.0, True, rng)
    with pytest.raises(ConfigError):
        drop_path(x, 0.5, True, None)


def test_trunc_normal_bounds():
    rng = np.random.default_rng(0)
    w = trunc_normal(rng, (4000,), std=0.02, dtype=np.float64)
    assert np.abs(w).max() <= 2 * 0.02 + 1e-12
    assert abs(w.mean()) < 0.002


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = FocalVideoNetwork(TINY, seed=5)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net)
    state = load_checkpoint(path)
    for name, p in net.named_parameters():
        assert state[name].dtype == np.float64
        assert np.array_equal(state[name], p.data)

    twin = FocalVideoNetwork(TINY, seed=99)
    load_into(twin, state)
    x = small_video()
    with no_grad():
        a = net.forward(x).data
        b = twin.forward(x).data
    np.testing.assert_array_equal(a, b)


def test_checkpoint_mismatch_errors(tmp_path):
    net = FocalVideoNetwork(TINY, seed=0)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net)
    state = load_checkpoint(path)

    other = FocalVideoNetwork(replace(TINY, variant="d_alternating"), seed=0)
    with pytest.raises(ConfigError):
        load_into(other, state)

    bad = dict(state)
    key = next(iter(bad))
    bad[key] = np.zeros((1, 1))
    with pytest.raises(ConfigError):
        load_into(FocalVideoNetwork(TINY, seed=0), bad)


def test_checkpoint_malformed_file_errors(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(OSError):
        load_checkpoint(path)
    path.write_bytes(b"STFCKPT1 2\nw 2,2 0\n")
    with pytest.raises(OSError):
        load_checkpoint(path)  # manifest promises more entries


def test_multi_view_single_equals_softmax_forward():
    net = FocalVideoNetwork(TINY, seed=1)
    clip = small_video(batch=1)[0]
    probs = multi_view_inference(net, [clip])
    with no_grad():
        logits = net.forward(clip[None]).data[0]
    np.testing.assert_allclose(probs, np_softmax(logits), rtol=0, atol=0)
    assert probs.sum() == pytest.approx(1.0, rel=1e-12)


def test_multi_view_averages_probabilities():
    net = FocalVideoNetwork(TINY, seed=1)
    a = small_video(batch=1, seed=2)[0]
    b = small_video(batch=1, seed=3)[0]
    pa = multi_view_inference(net, [a])
    pb = multi_view_inference(net, [b])
    both = multi_view_inference(net, [a, b])
    np.testing.assert_allclose(both, 0.5 * (pa + pb), rtol=1e-12, atol=1e-15)


def test_multi_view_rejects_empty():
    net = FocalVideoNetwork(TINY, seed=1)
    with pytest.raises(UsageError):
        multi_view_inference(net, [])


def test_multi_view_accepts_single_array():
    net = FocalVideoNetwork(TINY, seed=1)
    clip = small_video(batch=1)[0]
    np.testing.assert_array_equal(multi_view_inference(net, clip),
                                  multi_view_inference(net, [clip]))
