"""Network assembly: extractor, encoder, full forward, checkpoints."""

import numpy as np
import pytest

from ecaformer.attention import FeaturePair
from ecaformer.network import (
    EncoderTaps,
    Model,
    ModelConfig,
    build_model,
    config_from_text,
    config_to_text,
    encode,
    encoder_stage,
    extract_visual_semantic,
    forward,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from ecaformer.tensor import (
    ConfigError,
    DimensionError,
    Tensor,
    add,
    backward,
    finite_diff_check,
    mul,
    sum_all,
    tape,
)


def small_cfg(**kw):
    base = dict(base_channels=4, heads_per_stage=(2, 2, 2), seed=11)
    base.update(kw)
    return ModelConfig(**base)


def in_range_image(shape, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0.1, 0.9, shape).astype(dtype))


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_defaults():
    cfg = ModelConfig()
    assert cfg.base_channels == 8
    assert cfg.heads_per_stage == (2, 2, 2)
    assert cfg.stages == 2
    assert cfg.bottleneck_blocks == 2
    assert cfg.input_channels == 3
    assert cfg.posemb_enabled and not cfg.norm_enabled
    assert cfg.vsf_enabled and cfg.dmsa_enabled


def test_config_validation():
    with pytest.raises(ConfigError, match="entries"):
        ModelConfig(heads_per_stage=(2, 2))
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(heads_per_stage=(3, 2, 2))
    with pytest.raises(ConfigError, match="stages"):
        ModelConfig(stages=0, heads_per_stage=(2,))
    with pytest.raises(ConfigError, match="seed"):
        ModelConfig(seed=-1)


def test_norm_flag_rejected_at_build():
    with pytest.raises(ConfigError, match="norm_enabled"):
        build_model(ModelConfig(norm_enabled=True))


def test_config_text_roundtrip():
    cfg = small_cfg(seed=99, posemb_enabled=False, bottleneck_blocks=1)
    assert config_from_text(config_to_text(cfg)) == cfg
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_text(config_to_text(cfg) + "extra=1\n")
    with pytest.raises(ConfigError, match="missing key"):
        config_from_text("base_channels=8\n")


# ---------------------------------------------------------------------------
# extractor
# ---------------------------------------------------------------------------

def test_extractor_shape_contract():
    m = build_model(ModelConfig(seed=3))
    pair = extract_visual_semantic(in_range_image((1, 3, 16, 16)), m.vsc)
    assert pair.visual.shape == (1, 8, 16, 16)
    assert pair.semantic.shape == (1, 8, 16, 16)


def test_extractor_constant_semantic_when_second_conv_zeroed():
    m = build_model(small_cfg())
    v = np.arange(4, dtype=np.float32) * 0.25 + 0.1
    for name in ("dsc1_dw", "dsc1_pw", "dsc2_dw", "dsc2_pw"):
        getattr(m.vsc, name).data[:] = 0.0
    m.vsc.dsc1_b.data[:] = 0.0
    m.vsc.dsc2_b.data[:] = v
    for seed in (0, 1):
        pair = extract_visual_semantic(in_range_image((1, 3, 8, 8), seed), m.vsc)
        assert np.array_equal(pair.semantic.data,
                              np.broadcast_to(v[:, None, None], (1, 4, 8, 8)))


def test_extractor_receptive_fields():
    # a one-pixel impulse must leak at most 1 pixel into the visual stream
    # (one 3x3 conv) and at most 3 into the semantic one (three stacked 3x3).
    m = build_model(small_cfg(), dtype=np.float64)
    base = Tensor(np.zeros((1, 3, 21, 21)))
    poked = Tensor(np.zeros((1, 3, 21, 21)))
    poked.data[0, 1, 10, 10] = 1.0
    p0 = extract_visual_semantic(base, m.vsc)
    p1 = extract_visual_semantic(poked, m.vsc)
    for stream, radius in (("visual", 1), ("semantic", 3)):
        diff = np.abs(getattr(p1, stream).data - getattr(p0, stream).data)
        inside = diff[:, :, 10 - radius:10 + radius + 1, 10 - radius:10 + radius + 1]
        assert inside.max() > 0
        mask = np.ones_like(diff, dtype=bool)
        mask[:, :, 10 - radius:10 + radius + 1, 10 - radius:10 + radius + 1] = False
        assert np.all(diff[mask] == 0.0)


def test_extractor_input_errors():
    m = build_model(small_cfg())
    with pytest.raises(DimensionError, match="8x8"):
        extract_visual_semantic(in_range_image((1, 3, 6, 12)), m.vsc)
    with pytest.raises(ConfigError, match="channels"):
        extract_visual_semantic(in_range_image((1, 4, 8, 8)), m.vsc)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def test_encoder_stage_shapes_and_tap_identity():
    m = build_model(ModelConfig(seed=5))
    pair = extract_visual_semantic(in_range_image((2, 3, 16, 16)), m.vsc)
    down, tap = encoder_stage(pair, m.encoder[0])
    assert down is tap
    assert down.shape == (2, 16, 8, 8)
    down2, _ = encoder_stage(down, m.encoder[1])
    assert down2.shape == (2, 32, 4, 4)


def test_encoder_stage_odd_extent_error():
    m = build_model(small_cfg())
    rng = np.random.default_rng(0)
    pair = FeaturePair(Tensor(rng.standard_normal((1, 4, 7, 8)).astype(np.float32)),
                       Tensor(rng.standard_normal((1, 4, 7, 8)).astype(np.float32)))
    with pytest.raises(DimensionError, match="even"):
        encoder_stage(pair, m.encoder[0])


def test_encoder_taps_scales():
    m = build_model(ModelConfig(seed=5))
    pair = extract_visual_semantic(in_range_image((1, 3, 16, 16)), m.vsc)
    deepest, taps = encode(pair, m)
    assert isinstance(taps, EncoderTaps) and len(taps) == 3
    assert taps[0].shape == (1, 8, 16, 16)
    assert taps[1].shape == (1, 16, 8, 8)
    assert taps[2].shape == (1, 32, 4, 4)
    assert deepest is taps[2]


def test_encoder_stage_gradients():
    m = build_model(small_cfg(), dtype=np.float64)
    rng = np.random.default_rng(42)
    sem = Tensor(rng.standard_normal((1, 4, 4, 4)))
    proj = rng.standard_normal((1, 8, 2, 2))

    def f(x):
        down, _ = encoder_stage(FeaturePair(x, sem), m.encoder[0])
        return sum_all(mul(add(down.visual, down.semantic), Tensor(proj)))

    x = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    assert finite_diff_check(f, x) < 1e-4


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("size", [(8, 8), (16, 16), (20, 20), (9, 13), (32, 24), (12, 10)])
def test_forward_identity_at_init(size):
    m = build_model(small_cfg())
    img = in_range_image((1, 3) + size, seed=sum(size))
    out = forward(img, m)
    assert out.data.shape == img.data.shape
    assert np.array_equal(out.data, img.data)


def test_forward_nonidentity_after_random_head():
    m = build_model(small_cfg())
    rng = np.random.default_rng(1)
    m.map_w.data[:] = rng.uniform(-0.05, 0.05, m.map_w.data.shape).astype(np.float32)
    img = in_range_image((2, 3, 12, 20))
    out = forward(img, m)
    assert out.data.shape == (2, 3, 12, 20)
    assert not np.array_equal(out.data, img.data)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_forward_out_of_range_warns_and_clamps():
    m = build_model(small_cfg())
    img = in_range_image((1, 3, 8, 8))
    img.data[0, 0, 0, 0] = -0.2
    img.data[0, 1, 2, 3] = 1.7
    with pytest.warns(UserWarning, match="outside"):
        out = forward(img, m)
    assert np.array_equal(out.data, np.clip(img.data, 0.0, 1.0))


def test_forward_input_errors():
    m = build_model(small_cfg())
    with pytest.raises(DimensionError, match="too small"):
        forward(in_range_image((1, 3, 7, 16)), m)
    with pytest.raises(ConfigError, match="channels"):
        forward(in_range_image((1, 1, 8, 8)), m)
    with pytest.raises(TypeError, match="dtype"):
        forward(in_range_image((1, 3, 8, 8), dtype=np.float64), m)


def test_forward_determinism():
    m = build_model(small_cfg(seed=21))
    img = in_range_image((1, 3, 12, 12), seed=4)
    assert np.array_equal(forward(img, m).data, forward(img, m).data)


def test_build_determinism():
    a = build_model(small_cfg(seed=31))
    b = build_model(small_cfg(seed=31))
    c = build_model(small_cfg(seed=32))
    names = [n for n, _ in a.named_parameters()]
    assert names == [n for n, _ in b.named_parameters()]
    assert all(np.array_equal(ta.data, tb.data)
               for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()))
    diffs = [not np.array_equal(ta.data, tc.data)
             for (_, ta), (_, tc) in zip(a.named_parameters(), c.named_parameters())]
    assert any(diffs)


def test_forward_parameter_gradient_sample():
    # the init model has a zero output head, which silences every upstream
    # gradient; give the head small real values so the probe sees the whole
    # depth, and keep the image interior so the output clamp stays inactive.
    m = build_model(small_cfg(seed=13), dtype=np.float64)
    rng = np.random.default_rng(77)
    m.map_w.data[:] = rng.uniform(-1e-3, 1e-3, m.map_w.data.shape)
    img = in_range_image((1, 3, 12, 12), seed=9, dtype=np.float64)

    probe = forward(img, m)
    assert probe.data.min() > 0.0 and probe.data.max() < 1.0

    with tape() as tp:
        loss = sum_all(forward(img, m))
    backward(loss, tp)

    # key-projection biases shift every logit in a softmax row equally and
    # so have identically zero gradient; a relative metric on them would
    # only amplify rounding noise.
    live = [(n, t) for n, t in m.named_parameters()
            if t.requires_grad and not n.endswith(".bk")]
    h = 1e-4
    checked = 0
    for i in rng.choice(len(live), size=12, replace=False):
        name, t = live[i]
        flat = int(rng.integers(t.data.size))
        idx = np.unravel_index(flat, t.data.shape)
        analytic = t.grad[idx]
        keep = t.data[idx]
        t.data[idx] = keep + h
        up = sum_all(forward(img, m)).item()
        t.data[idx] = keep - h
        down = sum_all(forward(img, m)).item()
        t.data[idx] = keep
        central = (up - down) / (2 * h)
        rel = abs(analytic - central) / max(abs(analytic), abs(central), 1e-8)
        assert rel < 1e-4, f"{name}[{idx}]: analytic {analytic} central {central}"
        checked += 1
    assert checked == 12


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def test_parameter_count_default_config():
    # hand tally for C0=8, heads (2,2,2), 2 stages, 2 bottleneck blocks:
    #   attention params at C channels, h heads: 4C^2 + 13C + h
    #   vsc 512; enc1 4852; enc2 18916; bottleneck 18056; dec2 23272;
    #   dec1 6264; head 435
    m = build_model(ModelConfig())
    assert parameter_count(m) == 72307
    assert parameter_count(m) < 200_000


def test_parameter_count_monotone_in_width():
    counts = [parameter_count(build_model(small_cfg(base_channels=c)))
              for c in (4, 8, 16)]
    assert counts[0] < counts[1] < counts[2]


def test_parameter_count_drops_with_ablations():
    full = parameter_count(build_model(small_cfg()))
    assert parameter_count(build_model(small_cfg(vsf_enabled=False))) < full
    assert parameter_count(build_model(small_cfg(posemb_enabled=False))) < full


# ---------------------------------------------------------------------------
# ablation wiring
# ---------------------------------------------------------------------------

def test_vsf_off_feeds_visual_twice():
    m = build_model(small_cfg(vsf_enabled=False))
    pair = extract_visual_semantic(in_range_image((1, 3, 8, 8)), m.vsc)
    assert pair.semantic is pair.visual
    img = in_range_image((1, 3, 10, 14))
    assert np.array_equal(forward(img, m).data, img.data)


def test_dmsa_off_freezes_scales():
    m = build_model(small_cfg(dmsa_enabled=False))
    zetas = [t for n, t in m.named_parameters() if n.endswith(".zeta")]
    assert zetas and all(not t.requires_grad for t in zetas)
    img = in_range_image((1, 3, 8, 8))
    assert np.array_equal(forward(img, m).data, img.data)


def test_posemb_off_drops_positional_weights():
    m = build_model(small_cfg(posemb_enabled=False))
    assert not any(n.endswith(".pos") for n, _ in m.named_parameters())
    img = in_range_image((1, 3, 8, 8))
    assert np.array_equal(forward(img, m).data, img.data)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def randomized_model(seed=17):
    m = build_model(small_cfg(seed=seed))
    rng = np.random.default_rng(seed)
    for _, t in m.named_parameters():
        t.data[:] = rng.uniform(-0.05, 0.05, t.data.shape).astype(np.float32)
    return m


def test_checkpoint_roundtrip(tmp_path):
    m = randomized_model()
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path,
                    arrays={"opt.m.map_w": np.full((3, 8, 3, 3), 0.5, np.float32)},
                    scalars={"iter": "42"})
    m2, arrays, scalars = load_checkpoint(path)
    assert scalars == {"iter": "42"}
    assert np.array_equal(arrays["opt.m.map_w"], np.full((3, 8, 3, 3), 0.5, np.float32))
    for (na, ta), (nb, tb) in zip(m.named_parameters(), m2.named_parameters()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)
    img = in_range_image((1, 3, 12, 12))
    assert np.array_equal(forward(img, m).data, forward(img, m2).data)


def test_checkpoint_config_mismatch_names_first_key(tmp_path):
    m = build_model(small_cfg(seed=1))
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    with pytest.raises(ConfigError, match="seed"):
        load_checkpoint(path, config=small_cfg(seed=2))
    # both width and seed differ; width is declared first and must be named
    with pytest.raises(ConfigError, match="base_channels"):
        load_checkpoint(path, config=small_cfg(base_channels=8, seed=2))
    # matching config loads fine
    load_checkpoint(path, config=small_cfg(seed=1))


def test_checkpoint_corrupt_files(tmp_path):
    m = build_model(small_cfg())
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint\n" + blob[20:])
    with pytest.raises(ConfigError, match="magic"):
        load_checkpoint(bad)

    short = tmp_path / "short.ckpt"
    short.write_bytes(blob[:len(blob) - 64])
    with pytest.raises(Exception):
        load_checkpoint(short)


def test_checkpoint_missing_parameter(tmp_path):
    m = build_model(small_cfg())
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    blob = path.read_bytes()
    head, payload = blob.split(b"\n[payload]\n", 1)
    lines = [ln for ln in head.split(b"\n") if not ln.startswith(b"vsc.conv1_b\t")]
    (tmp_path / "cut.ckpt").write_bytes(b"\n".join(lines) + b"\n[payload]\n" + payload)
    with pytest.raises(ConfigError, match="missing parameter vsc.conv1_b"):
        load_checkpoint(tmp_path / "cut.ckpt")
