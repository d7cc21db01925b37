"""Optimizer, schedule, patch pipeline, and training-loop behavior."""

import json
import math
import os

import numpy as np
import pytest

from ecaformer.network import ModelConfig, build_model, load_checkpoint
from ecaformer.objectives import LossWeights
from ecaformer.seeding import STREAM_AUGMENT, STREAM_CROP, stream_rng
from ecaformer.tensor import ConfigError, DimensionError, Tensor
from ecaformer.training import (
    CHECKPOINT_NAME,
    LOG_NAME,
    AdamState,
    Schedule,
    TrainOptions,
    adam_step,
    augment,
    clip_gradients,
    cosine_lr,
    dihedral,
    dihedral_inverse,
    sample_patch,
    train,
)


def toy_params(values, requires_grad=True):
    return {n: Tensor(np.asarray(v, np.float64), requires_grad=requires_grad)
            for n, v in values.items()}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    rng = np.random.default_rng(0)
    g = rng.uniform(0.5, 2.0, (4, 3)) * np.sign(rng.standard_normal((4, 3)))
    params = toy_params({"w": np.zeros((4, 3))})
    params["w"].grad = g.copy()
    adam_step(params, AdamState(params), lr=0.01)
    assert np.abs(params["w"].data + 0.01 * np.sign(g)).max() < 0.01 * 1e-6


def test_adam_zero_gradient_no_move():
    params = toy_params({"w": np.full((3,), 0.7)})
    params["w"].grad = np.zeros(3)
    adam_step(params, AdamState(params), lr=0.5)
    assert np.array_equal(params["w"].data, np.full((3,), 0.7))


def test_adam_zero_lr_no_move():
    params = toy_params({"w": np.full((3,), 0.7)})
    st = AdamState(params)
    params["w"].grad = np.ones(3)
    adam_step(params, st, lr=0.0)
    assert np.array_equal(params["w"].data, np.full((3,), 0.7))
    assert params["w"].grad is None and st.t == 1


def test_adam_matches_scalar_oracle():
    # independent plain-float Adam on f(x) = x^2, grad 2x
    b1, b2, eps = 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    expect = []
    for t in range(1, 11):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= 0.1 * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        expect.append(x)

    params = toy_params({"x": 1.0})
    st = AdamState(params)
    for t in range(10):
        params["x"].grad = 2.0 * params["x"].data
        adam_step(params, st, lr=0.1)
        assert abs(float(params["x"].data) - expect[t]) <= 1e-9


def test_adam_missing_grad_names_parameter():
    params = toy_params({"a": np.ones(2), "enc1.wq": np.ones(2)})
    params["a"].grad = np.ones(2)
    with pytest.raises(ValueError, match="enc1.wq"):
        adam_step(params, AdamState(params), lr=0.1)


def test_adam_skips_frozen():
    params = toy_params({"w": np.ones(2)})
    params["frozen"] = Tensor(np.ones(2), requires_grad=False)
    params["w"].grad = np.ones(2)
    adam_step(params, AdamState(params), lr=0.1)
    assert np.array_equal(params["frozen"].data, np.ones(2))


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_cosine_endpoints_and_midpoint():
    s = Schedule()
    assert cosine_lr(0, s) == 2e-4
    assert cosine_lr(2000, s) == 1e-6
    assert cosine_lr(5000, s) == 1e-6
    assert cosine_lr(1000, s) == pytest.approx(1.005e-4, rel=1e-12)


def test_cosine_monotone_nonincreasing():
    s = Schedule()
    vals = [cosine_lr(t, s) for t in range(s.total_iters + 1)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_cosine_rejects_negative_t():
    with pytest.raises(ValueError, match="t must be"):
        cosine_lr(-1, Schedule())


def test_schedule_validation():
    with pytest.raises(ConfigError, match="total_iters"):
        Schedule(total_iters=-1)
    with pytest.raises(ConfigError, match="lr_end"):
        Schedule(lr_start=1e-6, lr_end=2e-4)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def pair_of(shape, seed=0):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.uniform(0, 1, shape).astype(np.float32)),
            Tensor(rng.uniform(0, 1, shape).astype(np.float32)))


def test_sample_patch_full_size_is_identity():
    low, ref = pair_of((3, 9, 9))
    lo, re = sample_patch(low, ref, 9, np.random.default_rng(1))
    assert np.array_equal(lo.data, low.data) and np.array_equal(re.data, ref.data)


def test_sample_patch_same_window_and_deterministic():
    low, ref = pair_of((3, 20, 20), seed=2)
    a = sample_patch(low, ref, 8, np.random.default_rng(3))
    b = sample_patch(low, ref, 8, np.random.default_rng(3))
    assert np.array_equal(a[0].data, b[0].data)
    # crops must come from the same window: matching offsets recover both
    for top in range(13):
        for left in range(13):
            if np.array_equal(low.data[:, top:top + 8, left:left + 8], a[0].data):
                assert np.array_equal(
                    ref.data[:, top:top + 8, left:left + 8], a[1].data)
    assert a[0].shape == (3, 8, 8)


def test_sample_patch_uniform_offsets():
    size = 5
    low, ref = pair_of((3, size + 3, size + 3), seed=4)
    rng = np.random.default_rng(7)
    counts = np.zeros((4, 4), np.int64)
    for _ in range(10_000):
        lo, _ = sample_patch(low, ref, size, rng)
        for top in range(4):
            for left in range(4):
                if np.array_equal(
                        low.data[:, top:top + size, left:left + size], lo.data):
                    counts[top, left] += 1
    assert counts.sum() == 10_000
    expected = 10_000 / 16
    sigma = math.sqrt(10_000 * (1 / 16) * (15 / 16))
    assert np.abs(counts - expected).max() < 3 * sigma


def test_sample_patch_too_small_suggests_flag():
    low, ref = pair_of((3, 6, 6))
    with pytest.raises(DimensionError, match="--patch"):
        sample_patch(low, ref, 7, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def test_dihedral_identity_and_involutions():
    x = np.random.default_rng(5).uniform(0, 1, (3, 6, 6)).astype(np.float32)
    assert np.array_equal(dihedral(x, 0), x)
    for code in (4, 5, 6, 7):
        assert np.array_equal(dihedral(dihedral(x, code), code), x)


def test_dihedral_group_inverse_sweep():
    x = np.random.default_rng(6).uniform(0, 1, (3, 7, 7)).astype(np.float32)
    seen = set()
    for code in range(8):
        y = dihedral(x, code)
        seen.add(y.tobytes())
        assert np.array_equal(dihedral(y, dihedral_inverse(code)), x)
    assert len(seen) == 8  # all eight transforms genuinely distinct


def test_dihedral_rejects_rotating_non_square():
    x = np.zeros((3, 4, 6), np.float32)
    with pytest.raises(DimensionError, match="square"):
        dihedral(x, 1)
    assert dihedral(x, 2).shape == (3, 4, 6)
    assert dihedral(x, 4).shape == (3, 4, 6)


def test_augment_same_transform_both_halves():
    low = np.zeros((3, 5, 5), np.float32)
    ref = np.zeros((3, 5, 5), np.float32)
    low[1, 0, 2] = 7.0
    ref[1, 0, 2] = 7.0
    rng = np.random.default_rng(8)
    for _ in range(20):
        lo, re = augment((Tensor(low), Tensor(ref)), rng)
        assert np.array_equal(np.argwhere(lo.data == 7.0),
                              np.argwhere(re.data == 7.0))


def test_augment_deterministic():
    pair = pair_of((3, 5, 5), seed=9)
    a = augment(pair, np.random.default_rng(10))
    b = augment(pair, np.random.default_rng(10))
    assert np.array_equal(a[0].data, b[0].data)


def test_crop_stream_independent_of_augment_stream():
    # drawing from the augment stream must not advance the crop stream
    crop_before = stream_rng(0, STREAM_CROP, 3).integers(0, 100, 8)
    stream_rng(0, STREAM_AUGMENT, 3).integers(0, 8, 50)
    crop_after = stream_rng(0, STREAM_CROP, 3).integers(0, 100, 8)
    assert np.array_equal(crop_before, crop_after)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def tiny_cfg(seed=21):
    return ModelConfig(base_channels=4, heads_per_stage=(2, 2, 2),
                       bottleneck_blocks=1, seed=seed)


def synth_pairs(n, size=40, seed=30):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ref = rng.uniform(0.15, 0.95, (3, size, size))
        low = np.clip(0.3 * ref ** 2.2 + rng.normal(0, 0.02, ref.shape), 0, 1)
        out.append((Tensor(low.astype(np.float32)),
                    Tensor(ref.astype(np.float32))))
    return out


def opts(**kw):
    # patch 32 is the smallest the five-stage feature pyramid accepts
    base = dict(batch=2, patch=32, seed=5, ckpt_every=100, eval_every=100)
    base.update(kw)
    return TrainOptions(**base)


def read_log(out_dir):
    with open(os.path.join(out_dir, LOG_NAME), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


def test_train_zero_iters_initial_metrics_only(tmp_path):
    model = build_model(tiny_cfg())
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    rep = train(model, synth_pairs(2), Schedule(total_iters=0), LossWeights(),
                str(tmp_path), opts())
    assert rep.iter == 0 and rep.psnr_db is not None and rep.ssim is not None
    lines = read_log(str(tmp_path))
    assert len(lines) == 1 and lines[0]["iter"] == 0
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n])
    assert os.path.exists(os.path.join(str(tmp_path), CHECKPOINT_NAME))


def test_train_runs_logs_and_checkpoints(tmp_path):
    model = build_model(tiny_cfg())
    rep = train(model, synth_pairs(3), Schedule(total_iters=6), LossWeights(),
                str(tmp_path), opts())
    assert rep.iter == 6 and rep.psnr_db is not None
    lines = read_log(str(tmp_path))
    assert [ln["iter"] for ln in lines] == [0, 1, 2, 3, 4, 5, 6]
    for ln in lines[1:]:
        assert math.isfinite(ln["loss_total"]) and ln["loss_total"] > 0
        assert ln["loss_total"] == pytest.approx(
            0.2 * ln["loss_p"] + 0.8 * ln["loss_c"], rel=1e-5)
    assert lines[1]["lr"] == 2e-4
    _, arrays, scalars = load_checkpoint(
        os.path.join(str(tmp_path), CHECKPOINT_NAME), config=tiny_cfg())
    assert scalars["iter"] == "6" and scalars["adam_t"] == "6"
    assert any(k.startswith("opt.m.") for k in arrays)


def test_train_determinism_bitwise(tmp_path):
    ckpts = []
    for run in ("a", "b"):
        out = tmp_path / run
        model = build_model(tiny_cfg())
        train(model, synth_pairs(3), Schedule(total_iters=4), LossWeights(),
              str(out), opts())
        with open(out / CHECKPOINT_NAME, "rb") as fh:
            ckpts.append(fh.read())
    assert ckpts[0] == ckpts[1]


def test_train_resume_matches_uninterrupted(tmp_path):
    straight = tmp_path / "straight"
    model = build_model(tiny_cfg())
    train(model, synth_pairs(3), Schedule(total_iters=8), LossWeights(),
          str(straight), opts())

    # same 8-iteration schedule, interrupted after 4, then resumed
    split = tmp_path / "split"
    model2 = build_model(tiny_cfg())
    train(model2, synth_pairs(3), Schedule(total_iters=8), LossWeights(),
          str(split), opts(max_iters=4))
    model3 = build_model(tiny_cfg())
    train(model3, synth_pairs(3), Schedule(total_iters=8), LossWeights(),
          str(split), opts(resume_from=str(split / CHECKPOINT_NAME)))

    with open(straight / CHECKPOINT_NAME, "rb") as a:
        with open(split / CHECKPOINT_NAME, "rb") as b:
            assert a.read() == b.read()
    for (n, p), (_, q) in zip(model.named_parameters(), model3.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_train_l1_only_skips_feature_loss(tmp_path):
    model = build_model(tiny_cfg())
    train(model, synth_pairs(2), Schedule(total_iters=2), LossWeights(),
          str(tmp_path), opts(l1_only=True))
    for ln in read_log(str(tmp_path))[1:]:
        assert ln["loss_p"] == 0.0 and ln["loss_c"] > 0


def test_clip_gradients_scales_to_bound():
    params = toy_params({"a": np.zeros(2), "b": np.zeros(1)})
    params["a"].grad = np.array([3.0, 0.0])
    params["b"].grad = np.array([4.0])
    pre = clip_gradients(params, 1.0)
    assert pre == pytest.approx(5.0, rel=1e-12)
    # direction preserved, joint norm brought down to the bound
    assert params["a"].grad[0] == pytest.approx(0.6, rel=1e-12)
    assert params["b"].grad[0] == pytest.approx(0.8, rel=1e-12)


def test_clip_gradients_noop_below_bound():
    params = toy_params({"a": np.zeros(2)})
    params["a"].grad = np.array([0.3, 0.4])
    assert clip_gradients(params, 1.0) == pytest.approx(0.5, rel=1e-12)
    assert np.array_equal(params["a"].grad, np.array([0.3, 0.4]))


def test_train_aborts_on_non_finite_loss(tmp_path):
    model = build_model(tiny_cfg())
    good = synth_pairs(1)[0]
    pairs = [(Tensor(np.full_like(good[0].data, np.nan)), good[1])]
    with pytest.raises(RuntimeError, match="iteration 1"):
        train(model, pairs, Schedule(total_iters=3), LossWeights(),
              str(tmp_path), opts())


def test_train_empty_dataset_rejected(tmp_path):
    with pytest.raises(ConfigError, match="empty"):
        train(build_model(tiny_cfg()), [], Schedule(total_iters=1),
              LossWeights(), str(tmp_path), opts())


def test_train_options_validation():
    with pytest.raises(ConfigError, match="batch"):
        TrainOptions(batch=0)
    with pytest.raises(ConfigError, match="clip_norm"):
        TrainOptions(clip_norm=-1.0)
