"""Runnable property suites: gradients, reduction, structure, losses.

Each check raises on violation; the runner prints one [PASS]/[FAIL] line
per check. The suites mirror the package's core correctness contracts and
finish in well under three minutes on one desktop core.
"""

import math
import os
import tempfile
import time

import numpy as np

from . import attention as A
from .network import ModelConfig, build_model, forward
from .objectives import (
    LossWeights,
    build_feature_net,
    charbonnier,
    perceptual,
    psnr,
    ssim,
    total_loss,
)
from .tensor import (
    Tensor,
    backward,
    concat_channels,
    conv2d,
    depthwise_separable_conv,
    finite_diff_check,
    mul,
    resample_down,
    resample_up,
    set_grad_fault,
    slice_channels,
    softmax_lastdim,
    sum_all,
    tape,
)
from .training import (
    CHECKPOINT_NAME,
    Schedule,
    TrainOptions,
    dihedral,
    dihedral_inverse,
    train,
)

FD_TOL = 1e-4


def _rng(seed):
    return np.random.default_rng(seed)


def _rt(shape, seed, lo=-1.0, hi=1.0):
    return Tensor(_rng(seed).uniform(lo, hi, shape))


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------

def _grad_conv2d_input():
    w = _rt((4, 3, 3, 3), 1)
    b = _rt((4,), 2)
    x = Tensor(_rng(3).uniform(-1, 1, (1, 3, 6, 6)), requires_grad=True)
    err = finite_diff_check(lambda t: sum_all(conv2d(t, w, b, pad=1)), x)
    assert err < FD_TOL, f"rel err {err:.3g}"


def _grad_conv2d_weight():
    x = _rt((1, 3, 6, 6), 4)
    b = _rt((4,), 5)
    w = Tensor(_rng(6).uniform(-1, 1, (4, 3, 3, 3)), requires_grad=True)
    err = finite_diff_check(lambda t: sum_all(conv2d(x, t, b, pad=1)), w)
    assert err < FD_TOL, f"rel err {err:.3g}"


def _grad_depthwise_separable():
    pw = _rt((4, 4, 1, 1), 7)
    b = _rt((4,), 8)
    x = _rt((1, 4, 5, 5), 9)
    dw = Tensor(_rng(10).uniform(-1, 1, (4, 1, 3, 3)), requires_grad=True)
    err = finite_diff_check(
        lambda t: sum_all(depthwise_separable_conv(x, t, pw, b)), dw)
    assert err < FD_TOL, f"rel err {err:.3g}"


def _grad_resample():
    for name, fn, w_shape in (
            ("down", resample_down, (8, 4, 4, 4)),
            ("up", resample_up, (2, 4, 1, 1))):
        w = _rt(w_shape, 11)
        b = _rt((w_shape[0],), 12)
        x = Tensor(_rng(13).uniform(-1, 1, (1, 4, 6, 6)), requires_grad=True)
        err = finite_diff_check(lambda t: sum_all(fn(t, w, b)), x)
        assert err < FD_TOL, f"resample {name} rel err {err:.3g}"


def _grad_mhsa():
    p = A.init_attn_params(4, 2, _rng(14), np.float64)
    x = Tensor(_rng(15).uniform(-1, 1, (1, 4, 3, 3)), requires_grad=True)
    err = finite_diff_check(lambda t: sum_all(A.mhsa(t, p)), x)
    assert err < FD_TOL, f"rel err {err:.3g}"


def _grad_dmsa_block():
    pv = A.init_attn_params(4, 2, _rng(16), np.float64)
    ps = A.init_attn_params(4, 2, _rng(17), np.float64)
    sem = _rt((1, 4, 3, 3), 18)
    x = Tensor(_rng(19).uniform(-1, 1, (1, 4, 3, 3)), requires_grad=True)

    def f(t):
        out = A.dmsa_block(A.FeaturePair(t, sem), pv, ps)
        return sum_all(mul(out.visual, out.semantic))

    err = finite_diff_check(f, x)
    assert err < FD_TOL, f"rel err {err:.3g}"


def _grad_csdmsa():
    cp = A.init_cross_scale_params(4, 2, _rng(20), np.float64)
    mid_s = _rt((1, 4, 4, 4), 21)
    res = A.FeaturePair(_rt((1, 4, 4, 4), 22), _rt((1, 4, 4, 4), 23))
    x = Tensor(_rng(24).uniform(-1, 1, (1, 4, 4, 4)), requires_grad=True)

    def f(t):
        out = A.csdmsa(A.FeaturePair(t, mid_s), res, cp)
        return sum_all(mul(out.visual, out.semantic))

    err = finite_diff_check(f, x)
    assert err < FD_TOL, f"rel err {err:.3g}"


def _grad_losses():
    # keep |pred - ref| well above the charbonnier floor everywhere; inside
    # the floor the curvature scales like 1/eps^2 and central differences at
    # h=1e-4 become truncation-limited
    ref = _rt((1, 3, 32, 32), 25, lo=0.55, hi=0.95)
    x = Tensor(_rng(26).uniform(0.05, 0.45, (1, 3, 32, 32)), requires_grad=True)
    err = finite_diff_check(lambda t: charbonnier(t, ref), x)
    assert err < FD_TOL, f"charbonnier rel err {err:.3g}"
    net = build_feature_net(0, np.float64)
    ref2 = _rt((1, 3, 32, 32), 11)
    x2 = Tensor(_rng(12).uniform(0.0, 1.0, (1, 3, 32, 32)), requires_grad=True)
    err = finite_diff_check(lambda t: perceptual(t, ref2, net), x2)
    assert err < FD_TOL, f"perceptual rel err {err:.3g}"


def _grad_forward_sample():
    # the init model's zero output head silences upstream gradients, so give
    # it small real values before sampling parameters
    model = build_model(ModelConfig(base_channels=4, seed=31), np.float64)
    rng = _rng(27)
    model.map_w.data[:] = rng.uniform(-1e-3, 1e-3, model.map_w.data.shape)
    img = Tensor(rng.uniform(0.1, 0.9, (1, 3, 12, 12)))

    with tape() as tp:
        loss = sum_all(forward(img, model))
    backward(loss, tp)

    # key-projection biases have identically zero gradient (softmax rows are
    # shift invariant), so a relative metric on them is meaningless
    live = [(n, p) for n, p in model.named_parameters()
            if p.requires_grad and not n.endswith(".bk")]
    h = 1e-4
    for i in rng.choice(len(live), size=4, replace=False):
        name, p = live[int(i)]
        idx = np.unravel_index(int(rng.integers(p.data.size)), p.data.shape)
        ana = p.grad[idx]
        keep = p.data[idx]
        p.data[idx] = keep + h
        up = sum_all(forward(img, model)).item()
        p.data[idx] = keep - h
        down = sum_all(forward(img, model)).item()
        p.data[idx] = keep
        num = (up - down) / (2 * h)
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        pos = tuple(int(v) for v in idx)
        assert rel < FD_TOL, f"{name}[{pos}] rel err {rel:.3g}"


# ---------------------------------------------------------------------------
# reduction suite
# ---------------------------------------------------------------------------

def _reduction_identity():
    for seed in range(20):
        rng = _rng(500 + seed)
        heads = int(rng.integers(1, 5))
        d = int(rng.integers(2, 9))
        T = int(rng.integers(3, 14))
        q, k, v = (Tensor(rng.standard_normal((2, heads, T, d))) for _ in range(3))
        zeta = Tensor(np.full(heads, 1.0 / math.sqrt(d)))
        got = A.dmsa_core(q, k, v, zeta).data
        want = A.attention_composed(q, k, v, 1.0 / math.sqrt(d)).data
        diff = np.abs(got - want).max()
        assert diff < 1e-6, f"config {seed}: max abs diff {diff:.3g}"


# ---------------------------------------------------------------------------
# structural suite
# ---------------------------------------------------------------------------

def _structural_softmax_rows():
    for seed, shape in ((1, (2, 2, 9, 9)), (2, (1, 3, 17, 17)), (3, (1, 1, 4, 4))):
        x = _rt(shape, seed, lo=-30, hi=30)
        sums = softmax_lastdim(x).data.sum(axis=-1)
        assert np.abs(sums - 1.0).max() < 1e-6


def _structural_concat_slice():
    a = _rt((2, 3, 4, 5), 4)
    b = _rt((2, 2, 4, 5), 5)
    cat = concat_channels(a, b)
    assert np.array_equal(slice_channels(cat, 0, 3).data, a.data)
    assert np.array_equal(slice_channels(cat, 3, 5).data, b.data)


def _structural_dihedral():
    x = _rng(6).uniform(0, 1, (3, 7, 7)).astype(np.float32)
    for code in range(8):
        assert np.array_equal(dihedral(dihedral(x, code), dihedral_inverse(code)), x)


def _structural_csdmsa_stepwise():
    cp = A.init_cross_scale_params(4, 2, _rng(7), np.float64)
    mid = A.FeaturePair(_rt((1, 4, 4, 4), 8), _rt((1, 4, 4, 4), 9))
    res = A.FeaturePair(_rt((1, 4, 4, 4), 10), _rt((1, 4, 4, 4), 11))
    fused = A.csdmsa(mid, res, cp)
    iv, isem = A.csdmsa_interact(mid, res, cp)
    agg = A.csdmsa_fuse(iv, isem, mid, cp)
    step = A.csdmsa_resample(agg, cp)
    assert np.array_equal(fused.visual.data, step.visual.data)
    assert np.array_equal(fused.semantic.data, step.semantic.data)


def _structural_identity_at_init():
    for seed, (H, W) in ((1, (8, 8)), (2, (17, 13)), (3, (24, 32))):
        model = build_model(ModelConfig(base_channels=4, seed=40 + seed))
        img = Tensor(_rng(seed).uniform(0.05, 0.95, (1, 3, H, W)).astype(np.float32))
        out = forward(img, model)
        assert np.abs(out.data - img.data).max() == 0.0, f"size {H}x{W}"


# ---------------------------------------------------------------------------
# loss suite
# ---------------------------------------------------------------------------

def _loss_identities():
    x = _rt((1, 3, 32, 32), 12, lo=0.0, hi=1.0)
    same = Tensor(x.data.copy())
    n = x.data.size
    # equal inputs make every summand exactly eps; the sum itself may round
    assert abs(charbonnier(x, same).item() - n * 1e-3) < 1e-12
    net = build_feature_net(0, np.float64)
    assert perceptual(x, same, net).item() == 0.0
    other = _rt((1, 3, 32, 32), 13, lo=0.0, hi=1.0)
    t0, _ = total_loss(x, other, LossWeights(blend=0.0), net)
    assert t0.item() == charbonnier(x, other).item()
    t1, _ = total_loss(x, other, LossWeights(blend=1.0), net)
    assert t1.item() == perceptual(x, other, net).item()


def _loss_metrics():
    a = Tensor(np.full((1, 3, 16, 16), 0.5))
    b = Tensor(np.full((1, 3, 16, 16), 0.4))
    assert abs(psnr(a, b) - 20.0) < 1e-6
    assert psnr(a, a) == 99.0
    x = _rt((1, 3, 16, 16), 14, lo=0.0, hi=1.0)
    assert ssim(x, x) == 1.0


# ---------------------------------------------------------------------------
# determinism suite
# ---------------------------------------------------------------------------

def _determinism_build_forward():
    cfg = ModelConfig(base_channels=4, seed=77)
    m1, m2 = build_model(cfg), build_model(cfg)
    for (n, p), (_, q) in zip(m1.named_parameters(), m2.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    img = Tensor(_rng(15).uniform(0.1, 0.9, (1, 3, 16, 16)).astype(np.float32))
    assert np.array_equal(forward(img, m1).data, forward(img, m2).data)


def _determinism_short_train():
    rng = _rng(16)
    pairs = []
    for _ in range(2):
        ref = rng.uniform(0.15, 0.95, (3, 40, 40))
        low = np.clip(0.3 * ref ** 2.2, 0, 1)
        pairs.append((Tensor(low.astype(np.float32)),
                      Tensor(ref.astype(np.float32))))
    blobs = []
    for _ in range(2):
        model = build_model(ModelConfig(base_channels=4, seed=5))
        with tempfile.TemporaryDirectory() as out:
            train(model, pairs, Schedule(total_iters=2), LossWeights(), out,
                  TrainOptions(batch=2, patch=32, seed=3))
            with open(os.path.join(out, CHECKPOINT_NAME), "rb") as fh:
                blobs.append(fh.read())
    assert blobs[0] == blobs[1]


SUITES = [
    ("gradient-fd", [
        ("conv2d input gradient", _grad_conv2d_input),
        ("conv2d weight gradient", _grad_conv2d_weight),
        ("depthwise-separable gradient", _grad_depthwise_separable),
        ("resample gradients", _grad_resample),
        ("self-attention gradient", _grad_mhsa),
        ("dual-attention block gradient", _grad_dmsa_block),
        ("cross-scale block gradient", _grad_csdmsa),
        ("loss gradients", _grad_losses),
        ("full forward parameter sample", _grad_forward_sample),
    ]),
    ("reduction", [
        ("dual attention equals baseline at frozen scale", _reduction_identity),
    ]),
    ("structural", [
        ("softmax rows are stochastic", _structural_softmax_rows),
        ("concat/slice round-trip", _structural_concat_slice),
        ("dihedral inverses", _structural_dihedral),
        ("cross-scale block equals stepwise composition", _structural_csdmsa_stepwise),
        ("identity at initialization", _structural_identity_at_init),
    ]),
    ("loss-identities", [
        ("exact loss values", _loss_identities),
        ("metric fixed points", _loss_metrics),
    ]),
    ("determinism", [
        ("build and forward reproducible", _determinism_build_forward),
        ("short training run reproducible", _determinism_short_train),
    ]),
]


def run_verify(plant_grad_bug: bool = False) -> int:
    """Run every suite; returns 0 iff every check passed."""
    t0 = time.perf_counter()
    failures = 0
    if plant_grad_bug:
        print("fault injection: conv2d weight gradient deliberately wrong")
    for suite, checks in SUITES:
        for name, fn in checks:
            label = f"{suite}: {name}"
            try:
                if plant_grad_bug and suite == "gradient-fd":
                    set_grad_fault(True)
                fn()
                print(f"[PASS] {label}")
            except Exception as exc:  # noqa: BLE001 - report, never crash
                failures += 1
                print(f"[FAIL] {label}: {exc}")
            finally:
                set_grad_fault(False)
    status = "ok" if failures == 0 else f"{failures} failed"
    print(f"verify: {sum(len(c) for _, c in SUITES)} checks, {status}, "
          f"{time.perf_counter() - t0:.1f}s")
    return 0 if failures == 0 else 1
