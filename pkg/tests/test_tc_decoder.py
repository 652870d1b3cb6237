import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fvsr.errors import ConfigError, DimensionError
from fvsr.tc_decoder import (
    DecoderConfig,
    DecoderState,
    DecoderWeights,
    balanced_unconditional,
    decode,
    param_count,
    wan_scale_config,
    weight_shapes,
)

SMALL = DecoderConfig(channels=(12, 10, 8, 6))


def inputs(seed, T=2, H=2, W=3, cfg=SMALL):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((T, H, W, cfg.latent_channels)).astype(np.float32)
    lr = rng.standard_normal((4 * T, 8 * H, 8 * W, cfg.lr_channels)).astype(np.float32)
    return z, lr


def test_reference_shape():
    cfg = DecoderConfig(channels=(16, 12, 8, 8))
    z, lr = inputs(0, 2, 12, 22, cfg)
    assert decode(z, lr, cfg, DecoderWeights.init(cfg, 0)).shape == (8, 96, 176, 3)


@settings(max_examples=10)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.booleans(), st.integers(0, 999))
def test_shape_law(T, H, W, conditional, seed):
    cfg = replace(SMALL, conditional=conditional)
    z, lr = inputs(seed, T, H, W, cfg)
    assert decode(z, lr, cfg, DecoderWeights.init(cfg, seed)).shape == (4 * T, 8 * H, 8 * W, 3)


def test_alignment_checked():
    z, lr = inputs(0)
    with pytest.raises(DimensionError):
        decode(z, lr[:-1], SMALL, DecoderWeights.init(SMALL))
    with pytest.raises(DimensionError):
        decode(z[..., :3], lr, SMALL, DecoderWeights.init(SMALL))


def test_zero_weights_zero_output():
    z, lr = inputs(1)
    assert not decode(z, lr, SMALL, DecoderWeights.zeros(SMALL)).any()


@pytest.mark.parametrize("seed", range(10))
def test_lr_sensitivity_classifies_variant(seed):
    z, lr = inputs(seed)
    lr2 = lr + np.random.default_rng(seed + 50).standard_normal(lr.shape).astype(np.float32)
    unc = balanced_unconditional(SMALL)
    for cfg, expect in ((SMALL, True), (unc, False)):
        w = DecoderWeights.init(cfg, seed)
        changed = not np.array_equal(decode(z, lr, cfg, w), decode(z, lr2, cfg, w))
        assert changed is expect


def test_streaming_equals_batch_and_causal():
    z, lr = inputs(2, T=3)
    w = DecoderWeights.init(SMALL, 2)
    full = decode(z, lr, SMALL, w)
    st_ = DecoderState()
    parts = [decode(z[i : i + 1], lr[4 * i : 4 * i + 4], SMALL, w, st_) for i in range(3)]
    assert np.array_equal(np.concatenate(parts), full)
    z2, lr2 = z.copy(), lr.copy()
    z2[1] += 1
    lr2[5] -= 1
    pert = decode(z2, lr2, SMALL, w)
    assert np.array_equal(pert[:4], full[:4]) and not np.array_equal(pert[4:], full[4:])


def test_param_count_matches_shapes():
    assert param_count(SMALL) == sum(int(np.prod(s)) for s in weight_shapes(SMALL).values())
    assert sum(a.size for a in DecoderWeights.init(SMALL).tensors.values()) == param_count(SMALL)


def test_doubling_widths_roughly_quadruples():
    base = DecoderConfig()
    double = replace(base, channels=tuple(2 * c for c in base.channels))
    assert 3.5 < param_count(double) / param_count(base) < 4.1


def test_parity_and_size_ratio():
    cond = DecoderConfig()
    unc = balanced_unconditional(cond)
    assert not unc.conditional
    assert abs(param_count(unc) - param_count(cond)) / param_count(cond) < 0.01
    assert param_count(cond) / param_count(wan_scale_config()) < 0.10


def test_unconditional_trunk_has_no_lr_inputs():
    unc = balanced_unconditional(DecoderConfig())
    shapes = weight_shapes(unc)
    assert shapes["up0.w"][3] == unc.channels[0]


def test_config_validation():
    with pytest.raises(ConfigError):
        DecoderConfig(channels=(8, 8, 8))


def test_weights_round_trip(tmp_path):
    w = DecoderWeights.init(SMALL, 5)
    manifest = w.save(tmp_path)
    entries = json.loads(manifest.read_text())["tensors"]
    assert {e["name"] for e in entries} == set(weight_shapes(SMALL))
    assert all(e["shape"] == list(weight_shapes(SMALL)[e["name"]]) for e in entries)
    back = DecoderWeights.load(tmp_path, SMALL)
    assert all(np.array_equal(back.tensors[n], w.tensors[n]) for n in w.tensors)
    with pytest.raises(DimensionError):
        DecoderWeights.load(tmp_path, DecoderConfig())
