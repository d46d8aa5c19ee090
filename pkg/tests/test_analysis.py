"""Cost model vs the op recorder, comparator math, heatmap export."""

from dataclasses import replace

import numpy as np
import pytest

import stfocal.functional as F
from stfocal.analysis import (attention_crossover, cost_report, count_flops,
                              count_params, export_modulator_maps,
                              modulation_flops, modulation_params,
                              normalize_unit, read_pgm, self_attention_flops,
                              write_pgm)
from stfocal.backbone import FocalVideoNetwork, preset_config
from stfocal.modulation import (FUSIONS, VARIANTS, FocalModulationConfig,
                                build_modulation)
from stfocal.tensor import ConfigError, FlopCounter, Tensor, UsageError, no_grad

TINY = preset_config("tiny", num_classes=4, in_channels=1, frames=4,
                     height=32, width=32, drop_path_rate=0.0)


def layer_arms():
    for variant in VARIANTS:
        fusions = FUSIONS if variant == "e_parallel" else ("multiply",)
        roles = ("spatial", "temporal") if variant in (
            "c_factorized_encoder", "d_alternating") else ("default",)
        for fusion in fusions:
            for role in roles:
                yield variant, fusion, role


def test_modulation_layer_costs_match_recorder_exactly():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 4, 4, 8)))
    for variant, fusion, role in layer_arms():
        cfg = FocalModulationConfig(channels=8, fusion=fusion, variant=variant)
        layer = build_modulation(cfg, np.random.default_rng(0), np.float64,
                                 role=role)
        layer.eval()
        with no_grad(), FlopCounter() as fc:
            layer(x)
        assert fc.total == modulation_flops(cfg, tokens=2 * 3 * 4 * 4,
                                            role=role), (variant, fusion, role)
        measured = sum(p.size for _, p in layer.named_parameters())
        assert measured == modulation_params(cfg, role=role), (variant, role)


def test_modulation_flops_linear_in_tokens():
    cfg = FocalModulationConfig(channels=16)
    unit = modulation_flops(cfg, tokens=1)
    for tokens in (2, 17, 1000, 56 * 56 * 8):
        assert modulation_flops(cfg, tokens=tokens) == unit * tokens


def runtime_rows(net, video):
    """Per-module recorder totals in the cost_report row layout."""
    rows = {}
    net.eval()
    with no_grad():
        x = net._as_input(video)
        with FlopCounter() as fc:
            x = net.patch_embed(x)
        rows["embed"] = fc.total
        for s, blocks in enumerate(net.stages):
            for j, block in enumerate(blocks):
                with FlopCounter() as fc:
                    x = block(x)
                rows[f"stage{s}.block{j}"] = fc.total
            if s < 3:
                with FlopCounter() as fc:
                    x = net.downsamples[s](x)
                rows[f"downsample{s}"] = fc.total
        with FlopCounter() as fc:
            x = net.norm(x)
            frames = F.global_avg_pool(x, axes=(2, 3))
            clip = F.global_avg_pool(frames, axes=(1,))
            net.head(clip)
        rows["head"] = fc.total
    return rows


@pytest.mark.parametrize("variant", VARIANTS)
def test_network_cost_rows_match_recorder(variant):
    cfg = replace(TINY, variant=variant,
                  fusion="learned_projection" if variant == "e_parallel"
                  else "multiply")
    net = FocalVideoNetwork(cfg, seed=0)
    video = np.random.default_rng(0).standard_normal((1, 4, 32, 32, 1))
    measured = runtime_rows(net, video)
    report = cost_report(cfg, (4, 32, 32))
    assert set(measured) == {r.name for r in report.rows}
    for row in report.rows:
        assert measured[row.name] == row.flops, row.name
    params = sum(p.size for _, p in net.named_parameters())
    assert params == report.total_params


def test_network_cost_batch_scaling():
    r1 = cost_report(TINY, (4, 32, 32), batch=1)
    r3 = cost_report(TINY, (4, 32, 32), batch=3)
    assert r3.total_flops == 3 * r1.total_flops
    assert r3.total_params == r1.total_params


def test_tubelet_embedding_costs_match():
    cfg = replace(TINY, embedding="tubelet_2")
    net = FocalVideoNetwork(cfg, seed=0)
    video = np.random.default_rng(0).standard_normal((1, 4, 32, 32, 1))
    measured = runtime_rows(net, video)
    for row in cost_report(cfg, (4, 32, 32)).rows:
        assert measured[row.name] == row.flops, row.name


def test_count_params_and_flops_wrappers():
    assert count_params(TINY).total_params == cost_report(TINY).total_params
    assert count_flops(TINY, (4, 32, 32)).total_flops == \
        cost_report(TINY, (4, 32, 32)).total_flops


def test_cost_report_shape_validation():
    with pytest.raises(ConfigError):
        cost_report(TINY, (4, 30, 32))
    with pytest.raises(ConfigError):
        cost_report(replace(TINY, embedding="tubelet_2"), (5, 32, 32))


def test_csv_layout():
    text = cost_report(TINY, (4, 32, 32)).to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "layer,params,flops"
    assert lines[1].startswith("embed,")
    assert lines[-1].startswith("total,")
    body = [ln.split(",") for ln in lines[1:]]
    assert all(len(cols) == 3 for cols in body)
    totals = body[-1]
    assert int(totals[1]) == sum(int(c[1]) for c in body[:-1])
    assert int(totals[2]) == sum(int(c[2]) for c in body[:-1])


def test_preset_params_increase_and_flop_ratio():
    reports = {name: cost_report(preset_config(name, num_classes=400),
                                 (8, 224, 224)) for name in ("t", "s", "b")}
    assert reports["t"].total_params < reports["s"].total_params \
        < reports["b"].total_params
    ratio = reports["s"].total_flops / reports["t"].total_flops
    assert ratio == pytest.approx(1.97, rel=0.2)


def test_self_attention_formula():
    assert self_attention_flops(10, 4) == 4 * 10 * 16 + 4 * 100 * 4
    with pytest.raises(ConfigError):
        self_attention_flops(0, 4)


def test_attention_crossover_is_tight():
    cfg = FocalModulationConfig(channels=96)
    n_star = attention_crossover(cfg)
    assert 1 < n_star < 56 * 56
    assert self_attention_flops(n_star, 96) > modulation_flops(cfg, n_star)
    if n_star > 1:
        assert self_attention_flops(n_star - 1, 96) <= \
            modulation_flops(cfg, n_star - 1)
    for n in (n_star + 1, 2 * n_star, 100 * n_star):
        assert self_attention_flops(n, 96) > modulation_flops(cfg, n)


def test_normalize_unit():
    a = np.array([[2.0, 4.0], [6.0, 2.0]])
    out = normalize_unit(a)
    assert out.min() == 0.0 and out.max() == 1.0
    np.testing.assert_allclose(out, (a - 2.0) / 4.0)
    np.testing.assert_array_equal(normalize_unit(np.full((3, 3), 5.0)),
                                  np.zeros((3, 3)))


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0.0, 1.0, 35).reshape(5, 7)
    path = tmp_path / "m.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.shape == (5, 7)
    np.testing.assert_array_equal(back, np.round(img * 255).astype(np.uint8))
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n")
    with pytest.raises(UsageError):
        write_pgm(tmp_path / "bad.pgm", img * 2.0)


def test_export_modulator_maps_two_streams(tmp_path):
    net = FocalVideoNetwork(TINY, seed=0)
    clip = np.random.default_rng(1).standard_normal((4, 32, 32, 1))
    paths = export_modulator_maps(net, clip, tmp_path / "maps")
    names = sorted(p.split("/")[-1] for p in paths)
    t_tok = 4  # patch_1 keeps the frame count
    assert len(paths) == 2 * t_tok
    assert names[0] == "frame00_spatial.pgm"
    assert f"frame{t_tok - 1:02d}_temporal.pgm" in names
    for p in paths:
        img = read_pgm(p)
        assert img.shape == (8, 8)  # stage-0 grid of a 32x32 input


def test_export_modulator_maps_spatial_only_variant(tmp_path):
    net = FocalVideoNetwork(replace(TINY, variant="a_spatial_avg"), seed=0)
    clip = np.random.default_rng(1).standard_normal((4, 32, 32, 1))
    paths = export_modulator_maps(net, clip, tmp_path / "maps")
    assert len(paths) == 4
    assert all(p.endswith("_spatial.pgm") for p in paths)


def test_export_modulator_maps_alternating_variant(tmp_path):
    net = FocalVideoNetwork(replace(TINY, variant="d_alternating"), seed=0)
    clip = np.random.default_rng(1).standard_normal((4, 32, 32, 1))
    paths = export_modulator_maps(net, clip, tmp_path / "maps", stage=1,
                                  block=0)
    assert len(paths) == 8
    for p in paths:
        assert read_pgm(p).shape == (4, 4)  # stage-1 grid


def test_export_modulator_maps_validation(tmp_path):
    net = FocalVideoNetwork(TINY, seed=0)
    with pytest.raises(UsageError):
        export_modulator_maps(net, np.zeros((4, 32, 32)), tmp_path)
    with pytest.raises(ConfigError):
        export_modulator_maps(net, np.zeros((4, 32, 32, 1)), tmp_path,
                              stage=0, block=9)
    assert net.stages  # capture flags were reset even after the failure
    assert not any(layer.capture_modulators
                   for layer in net.modulation_layers())
