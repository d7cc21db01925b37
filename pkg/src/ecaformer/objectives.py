"""Training losses and evaluation metrics.

The loss is a convex blend of a robust pixel term and a feature-space term.
The pixel term is a Charbonnier penalty, a smooth L1 whose gradient is
bounded and defined everywhere. The feature term compares the two images
through a small frozen convolutional pyramid and penalizes squared
differences per stage, each stage normalized by its own element count.

The pyramid deliberately uses frozen random weights instead of a
pretrained classifier backbone: it keeps the package dependency-free and
bit-reproducible while preserving the structure of the loss (multi-scale
feature MSE). ``load_feature_weights`` accepts externally supplied weights
for anyone who wants to swap in a trained extractor.

PSNR and SSIM are plain numpy evaluation code, not differentiable ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeding import STREAM_FEATURE, stream_rng
from .tensor import (
    ConfigError,
    DimensionError,
    Tensor,
    add,
    conv2d,
    load_tensor,
    mul,
    pad2d,
    relu,
    save_tensor,
    sqrt_t,
    sub,
    sum_all,
)


@dataclass
class LossWeights:
    """blend: weight of the feature term, in [0,1]; epsilon: Charbonnier knee."""

    blend: float = 0.2
    epsilon: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.blend <= 1.0:
            raise ConfigError(f"blend weight must lie in [0,1], got {self.blend}")
        if not self.epsilon > 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


# ---------------------------------------------------------------------------
# frozen feature pyramid
# ---------------------------------------------------------------------------

_FEAT_CHANNELS = (3, 8, 16, 16, 32, 32)


@dataclass
class FeatureNet:
    """Five conv+relu stages, 3->8->16->16->32->32, stride 2 from stage two.

    Weights are frozen (never receive gradients) and fully determined by
    the seed, so the feature loss is identical across runs and machines.
    """

    weights: list
    biases: list
    seed: int

    def named_tensors(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            yield f"feat{i}.w", w
            yield f"feat{i}.b", b


def build_feature_net(seed: int = 0, dtype=np.float32) -> FeatureNet:
    rng = stream_rng(seed, STREAM_FEATURE)
    ws, bs = [], []
    for i in range(5):
        cin, cout = _FEAT_CHANNELS[i], _FEAT_CHANNELS[i + 1]
        # relu halves expected energy, so these layers get the relu-calibrated
        # bound (twice the unit-gain variance) to keep stage scales level.
        bound = math.sqrt(6.0 / (cin * 9))
        ws.append(Tensor(rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(dtype),
                         requires_grad=False))
        bs.append(Tensor(np.zeros(cout, dtype), requires_grad=False))
    return FeatureNet(ws, bs, seed)


def save_feature_weights(net: FeatureNet, path):
    with open(path, "wb") as fh:
        for _, t in net.named_tensors():
            save_tensor(t.data, fh)


def load_feature_weights(path, dtype=np.float32) -> FeatureNet:
    """Read externally supplied pyramid weights (w1,b1,...,w5,b5 records)."""
    net = build_feature_net(0, dtype)
    with open(path, "rb") as fh:
        for name, t in net.named_tensors():
            arr = load_tensor(fh)
            if arr.shape != t.data.shape:
                raise ConfigError(
                    f"feature weights {name}: shape {arr.shape} != expected "
                    f"{t.data.shape}")
            t.data = arr.astype(dtype)
    net.seed = -1
    return net


def feature_stages(net: FeatureNet, x: Tensor):
    """The five stage outputs for one image batch (after each relu)."""
    outs = []
    cur = x
    for i in range(5):
        if i > 0:
            B, C, H, W = cur.shape
            # stride-2 conv arithmetic needs odd extents; grow by one row or
            # column of zeros where needed
            if H % 2 == 0 or W % 2 == 0:
                cur = pad2d(cur, 0, (H + 1) % 2, 0, (W + 1) % 2)
            cur = relu(conv2d(cur, net.weights[i], net.biases[i], stride=2, pad=1))
        else:
            cur = relu(conv2d(cur, net.weights[i], net.biases[i], pad=1))
        outs.append(cur)
    return outs


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def charbonnier(pred: Tensor, ref: Tensor, eps: float = 1e-3,
                mean: bool = False) -> Tensor:
    """sum(sqrt((pred - ref)^2 + eps^2)); smooth everywhere, grad bounded.

    The default reduction is the plain sum; mean=True divides by the
    element count.
    """
    if pred.shape != ref.shape:
        raise DimensionError(f"charbonnier: shapes differ: {pred.shape} vs {ref.shape}")
    if not eps > 0.0:
        raise ConfigError(f"charbonnier: eps must be positive, got {eps}")
    d = sub(pred, ref)
    out = sum_all(sqrt_t(add(mul(d, d), eps * eps)))
    if mean:
        out = mul(out, 1.0 / int(np.prod(pred.shape)))
    return out


def perceptual(pred: Tensor, ref: Tensor, net: FeatureNet) -> Tensor:
    """Sum over stages of the mean squared feature difference.

    Each stage is normalized by its own channel*height*width count (batch
    entries add up). Gradients flow into pred only; the reference branch is
    evaluated on a constant copy.
    """
    if pred.shape != ref.shape:
        raise DimensionError(f"perceptual: shapes differ: {pred.shape} vs {ref.shape}")
    B, C, H, W = pred.shape
    if H < 32 or W < 32:
        raise DimensionError(
            f"perceptual: five stride-2 stages need at least 32x32 input, got {H}x{W}")
    fp = feature_stages(net, pred)
    fr = feature_stages(net, Tensor(ref.data))
    total = None
    for a, b in zip(fp, fr):
        _, c, h, w = a.shape
        d = sub(a, Tensor(b.data))
        stage = mul(sum_all(mul(d, d)), 1.0 / (c * h * w))
        total = stage if total is None else add(total, stage)
    return total


def total_loss(pred: Tensor, ref: Tensor, w: LossWeights, net: FeatureNet):
    """blend * feature loss + (1 - blend) * pixel loss.

    Returns (loss tensor, components dict with float loss_p / loss_c).
    With blend == 0 the feature branch is skipped entirely and loss_p is
    reported as 0.0.
    """
    lc = charbonnier(pred, ref, w.epsilon)
    if w.blend == 0.0:
        lp_val = 0.0
        total = lc
    else:
        lp = perceptual(pred, ref, net)
        lp_val = lp.item()
        if w.blend == 1.0:
            total = lp
        else:
            total = add(mul(lp, w.blend), mul(lc, 1.0 - w.blend))
    return total, {"loss_p": lp_val, "loss_c": lc.item()}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 99.0


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def psnr(pred, ref) -> float:
    """10*log10(1/MSE) for unit data range; identical inputs cap at 99 dB."""
    a, b = _arr(pred), _arr(ref)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # img (B,C,H,W) -> valid-region weighted means (B,C,H-10,W-10)
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape, axis=(2, 3))
    return np.einsum("bchwij,ij->bchw", view, win, optimize=True)


def ssim(pred, ref) -> float:
    """Single-scale SSIM, 11x11 Gaussian window sigma 1.5, valid region only.

    Constants C1=(0.01)^2, C2=(0.03)^2 assume unit data range. The map is
    computed per channel and averaged over everything.
    """
    a, b = _arr(pred).astype(np.float64), _arr(ref).astype(np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise DimensionError(f"ssim: expected (B,C,H,W), got rank {a.ndim}")
    H, W = a.shape[2], a.shape[3]
    if H < 11 or W < 11:
        raise DimensionError(f"ssim: image {H}x{W} smaller than the 11x11 window")
    win = _gaussian_window()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu1 = _window_means(a, win)
    mu2 = _window_means(b, win)
    s11 = _window_means(a * a, win) - mu1 * mu1
    s22 = _window_means(b * b, win) - mu2 * mu2
    s12 = _window_means(a * b, win) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))
