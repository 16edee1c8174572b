"""Model assembly tests: config validation, parameter inventory against a
closed-form count, the guided-fusion laws, shape contracts, ablation wiring,
a gradient-footprint probe of the dilated stack, and checkpoint round-trips."""

import dataclasses
import json

import numpy as np
import pytest

from uwrestore import autodiff as ad
from uwrestore import network as nw
from uwrestore.errors import ConfigError, ShapeError
from uwrestore.network import (
    MTURConfig,
    build,
    describe,
    forward,
    fuse,
    load_checkpoint,
    save_checkpoint,
)


def tiny(**kw):
    return MTURConfig.tiny(**kw)


def rand_input(seed, n=1, h=64, w=64, dtype=np.float32):
    return ad.Tensor(np.random.default_rng(seed).uniform(0, 1, (n, 3, h, w)).astype(dtype))


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError, match="base_channels"):
        tiny(base_channels=0).validate()
    with pytest.raises(ConfigError, match="dilations"):
        tiny(drb_dilations=()).validate()
    with pytest.raises(ConfigError, match="dilations"):
        tiny(drb_dilations=(1, 0, 2)).validate()
    with pytest.raises(ConfigError, match="fusion point"):
        tiny(fusion_points=(11,)).validate()
    with pytest.raises(ConfigError, match="mt_encoder_blocks"):
        tiny(mt_encoder_blocks=1).validate()


def test_config_roundtrip_through_dict():
    cfg = tiny(fusion_points=(2, 5), use_final_concat=False)
    assert MTURConfig.from_dict(cfg.to_dict()) == cfg


def test_downsample_factor():
    assert tiny().downsample_factor == 32
    assert tiny(mt_encoder_blocks=2).downsample_factor == 8


def test_group_count_reduction():
    cfg = tiny(groups_gn=8)
    assert cfg.gn_groups_for(4) == 4  # fewer channels than groups
    assert cfg.gn_groups_for(16) == 8
    with pytest.raises(ConfigError, match="divisible"):
        cfg.gn_groups_for(12)


def test_build_rejects_bad_dtype():
    with pytest.raises(ConfigError):
        build(tiny(), seed=0, dtype="f16")


# ---------------------------------------------------------------------------
# parameter inventory
# ---------------------------------------------------------------------------


def expected_param_count(cfg):
    """Closed-form parameter total, written independently of build()."""

    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    def gn(c):
        return 2 * c

    c = cfg.base_channels
    enc = [c * 2**i for i in range(cfg.mt_encoder_blocks + 1)]
    total = conv(3, enc[0], 3) + gn(enc[0])  # stem
    for i in range(cfg.mt_encoder_blocks):
        total += conv(enc[i], enc[i + 1], 3) + gn(enc[i + 1])
    dec = list(reversed(enc))
    for i in range(cfg.mt_encoder_blocks):
        total += conv(dec[i], dec[i + 1], 3) + gn(dec[i + 1])
    total += conv(enc[0], 1, 1)  # mt head
    stream = 2 * c
    total += conv(enc[0], stream, 3)  # entry
    total += len(cfg.drb_dilations) * 2 * conv(stream, stream, 3)
    if cfg.use_mt_guidance and cfg.use_skip_connection:
        total += len(cfg.fusion_points) * conv(stream, stream, 1)
    head_in = stream + 1 if (cfg.use_mt_guidance and cfg.use_final_concat) else stream
    if cfg.use_conv_after_concat:
        total += conv(head_in, c, 3) + conv(c, 3, 3)
    else:
        total += conv(head_in, 3, 1)
    return total


def test_tiny_param_count_frozen():
    model = build(tiny(), seed=0)
    assert model.param_count() == expected_param_count(tiny()) == 246732


@pytest.mark.parametrize(
    "cfg",
    [
        tiny(),
        tiny(use_skip_connection=False),
        tiny(use_final_concat=False),
        tiny(use_conv_after_concat=False),
        tiny(use_mt_guidance=False),
        tiny(base_channels=4, mt_encoder_blocks=2, drb_dilations=(1, 2, 1), fusion_points=(2,)),
    ],
)
def test_param_count_matches_formula(cfg):
    assert build(cfg, seed=1).param_count() == expected_param_count(cfg)


def test_build_deterministic():
    a = build(tiny(), seed=7)
    b = build(tiny(), seed=7)
    assert set(a.params) == set(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data), name
    c = build(tiny(), seed=8)
    assert any(
        not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params
    )


def test_biases_and_norm_affine_start_neutral():
    model = build(tiny(), seed=0)
    for name, p in model.params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert not p.data.any(), name
        if name.endswith(".gamma"):
            assert np.all(p.data == 1.0), name


def test_ablation_parameter_names():
    full = set(build(tiny(), seed=0).params)
    assert "lateral.4.weight" in full and "lateral.8.weight" in full
    assert "head.conv1.weight" in full and "head.conv1x1.weight" not in full

    no_guid = build(tiny(use_mt_guidance=False), seed=0)
    assert not any(n.startswith("lateral.") for n in no_guid.params)
    # concat is dead without guidance, so the head sees only stream channels
    assert no_guid.params["head.conv1.weight"].shape[1] == 16

    no_skip = build(tiny(use_skip_connection=False), seed=0)
    assert not any(n.startswith("lateral.") for n in no_skip.params)

    no_cat = build(tiny(use_final_concat=False), seed=0)
    assert no_cat.params["head.conv1.weight"].shape[1] == 16

    one_conv = build(tiny(use_conv_after_concat=False), seed=0)
    assert "head.conv1x1.weight" in one_conv.params
    assert "head.conv1.weight" not in one_conv.params
    assert one_conv.params["head.conv1x1.weight"].shape == (3, 17, 1, 1)


# ---------------------------------------------------------------------------
# fusion laws
# ---------------------------------------------------------------------------


def test_fuse_zero_map_is_identity():
    o = ad.Tensor(np.random.default_rng(0).normal(size=(2, 5, 6, 6)))
    t = ad.Tensor(np.zeros((2, 1, 6, 6)))
    assert np.array_equal(fuse(o, t).data, o.data)


def test_fuse_unit_map_doubles():
    o = ad.Tensor(np.random.default_rng(1).normal(size=(2, 5, 6, 6)))
    t = ad.Tensor(np.ones((2, 1, 6, 6)))
    assert np.array_equal(fuse(o, t).data, 2.0 * o.data)


def test_fuse_scalar_arithmetic():
    o = ad.Tensor(np.full((1, 1, 2, 2), 0.5))
    t = ad.Tensor(np.full((1, 1, 2, 2), 0.5))
    assert np.allclose(fuse(o, t).data, 0.75, atol=1e-15)


def test_fuse_resamples_smaller_map():
    o = ad.Tensor(np.random.default_rng(2).normal(size=(1, 4, 8, 8)))
    t_small = ad.Tensor(np.full((1, 1, 4, 4), 1.0))
    # constant map survives bilinear resampling exactly, so doubling holds
    assert np.allclose(fuse(o, t_small).data, 2.0 * o.data, atol=1e-12)


def test_fuse_rejects_multichannel_map():
    o = ad.Tensor(np.zeros((1, 4, 8, 8)))
    with pytest.raises(ShapeError):
        fuse(o, ad.Tensor(np.zeros((1, 2, 8, 8))))


# ---------------------------------------------------------------------------
# forward contract
# ---------------------------------------------------------------------------


def test_forward_shapes_64():
    model = build(tiny(), seed=0)
    enh, mt = forward(model, rand_input(0))
    assert enh.shape == (1, 3, 64, 64)
    assert mt.shape == (1, 1, 64, 64)


def test_mt_output_strictly_inside_unit_interval():
    model = build(tiny(), seed=0)
    _, mt = forward(model, rand_input(1))
    assert np.all(mt.data > 0.0) and np.all(mt.data < 1.0)


def test_forward_rejects_non_divisible_without_padding():
    model = build(tiny(), seed=0)
    with pytest.raises(ShapeError, match="divisible"):
        forward(model, rand_input(2, h=80, w=80))


def test_forward_pads_and_crops():
    model = build(tiny(), seed=0)
    enh, mt = forward(model, rand_input(3, h=80, w=70), pad_to_multiple=True)
    assert enh.shape == (1, 3, 80, 70)
    assert mt.shape == (1, 1, 80, 70)


def test_forward_deterministic():
    model = build(tiny(), seed=0)
    x = rand_input(4)
    a = forward(model, ad.Tensor(x.data.copy()))[0].data
    b = forward(model, ad.Tensor(x.data.copy()))[0].data
    assert np.array_equal(a, b)


def test_forward_batch_consistency():
    # Each batch item is processed independently of its neighbors.
    model = build(tiny(), seed=0, dtype="f64")
    x = rand_input(5, n=2, dtype=np.float64)
    both, _ = forward(model, x)
    solo, _ = forward(model, ad.Tensor(x.data[:1].copy()))
    assert np.allclose(both.data[0], solo.data[0], atol=1e-12)


ABLATIONS = {
    "no_guidance": tiny(use_mt_guidance=False),
    "no_skip": tiny(use_skip_connection=False),
    "no_concat": tiny(use_final_concat=False),
    "one_head_conv": tiny(use_conv_after_concat=False),
}


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_ablation_changes_output(name):
    x = rand_input(6)
    full = forward(build(tiny(), seed=0), ad.Tensor(x.data.copy()))[0].data
    cut = forward(build(ABLATIONS[name], seed=0), ad.Tensor(x.data.copy()))[0].data
    assert np.abs(full - cut).max() > 0.0


# ---------------------------------------------------------------------------
# dilated stack
# ---------------------------------------------------------------------------


def test_drb_identity_init_passes_input_through():
    model = build(tiny(), seed=0, dtype="f64", drb_identity_init=True)
    stream = model.params["enh_entry.conv.weight"].shape[0]
    entry = ad.Tensor(np.random.default_rng(7).normal(size=(1, stream, 9, 9)))
    zero_feat = ad.Tensor(np.zeros((1, stream, 9, 9)))
    outs = []
    with ad.no_grad():
        nw._run_drbs(model, entry, zero_feat, collect=outs)
    assert len(outs) == len(model.config.drb_dilations)
    for j, x in enumerate(outs):
        assert np.array_equal(x.data, entry.data), f"block {j}"


def footprint_width(arr):
    cols = np.nonzero(np.abs(arr).sum(axis=(0, 1, 2)))[0]
    return int(cols[-1] - cols[0] + 1)


def test_receptive_field_matches_footprint_probe():
    # Positive weights and zero biases turn the nonzero support of each
    # block's output into its influence footprint; compare the measured
    # widths to the composed receptive fields reported by describe().
    dil = (1, 2, 4, 2)
    cfg = tiny(drb_dilations=dil, fusion_points=(2,), use_mt_guidance=False)
    model = build(cfg, seed=0, dtype="f64")
    for name, p in model.params.items():
        if name.startswith("drb.") and name.endswith("weight"):
            p.data = np.abs(p.data) + 0.01
    stream = model.params["enh_entry.conv.weight"].shape[0]
    side = 1 + 4 * sum(dil) + 8
    x = np.zeros((1, stream, side, side))
    x[0, :, side // 2, side // 2] = 1.0
    outs = []
    with ad.no_grad():
        nw._run_drbs(model, ad.Tensor(x), ad.Tensor(np.zeros_like(x)), collect=outs)
    widths = [footprint_width(o.data) for o in outs]
    running = np.cumsum(dil)
    assert widths == [1 + 4 * s for s in running]

    # stem + entry map a stream-level width w onto 3 + 4w input pixels
    reported = describe(model)["drb_receptive_field"]
    assert reported == [3 + 4 * w for w in widths]


def test_describe_contents():
    model = build(tiny(), seed=0)
    info = describe(model, input_hw=(64, 64))
    assert info["drb_dilations"] == [1, 1, 2, 2, 4, 8, 4, 2, 2, 1]
    rf = info["drb_receptive_field"]
    assert all(b >= a for a, b in zip(rf, rf[1:]))
    assert info["param_count"] == 246732
    assert info["config"]["base_channels"] == 8


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = build(tiny(), seed=3)
    path = tmp_path / "model.mttb"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert set(loaded.params) == set(model.params)
    for name in model.params:
        assert np.array_equal(loaded.params[name].data, model.params[name].data)
    enh_a = forward(model, rand_input(8))[0].data
    enh_b = forward(loaded, rand_input(8))[0].data
    assert np.array_equal(enh_a, enh_b)


def test_checkpoint_bytes_deterministic(tmp_path):
    a, b = tmp_path / "a.mttb", tmp_path / "b.mttb"
    save_checkpoint(build(tiny(), seed=3), a)
    save_checkpoint(build(tiny(), seed=3), b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_mismatch_detected(tmp_path):
    model = build(tiny(), seed=0)
    path = tmp_path / "model.mttb"
    save_checkpoint(model, path)
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text())
    meta["config"]["base_channels"] = 16
    sidecar.write_text(json.dumps(meta))
    with pytest.raises(ConfigError, match="shape"):
        load_checkpoint(path)


def test_checkpoint_missing_sidecar(tmp_path):
    model = build(tiny(), seed=0)
    path = tmp_path / "model.mttb"
    save_checkpoint(model, path)
    path.with_name(path.name + ".json").unlink()
    with pytest.raises(ConfigError, match="sidecar"):
        load_checkpoint(path)
