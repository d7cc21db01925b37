"""Adam optimizer, cosine schedule, patch pipeline, and the training loop."""

import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .network import forward, load_checkpoint, save_checkpoint
from .objectives import build_feature_net, psnr, ssim, total_loss
from .seeding import STREAM_AUGMENT, STREAM_CROP, STREAM_PAIR, stream_rng
from .tensor import (
    ConfigError,
    DimensionError,
    Tensor,
    abs_t,
    backward,
    sub,
    sum_all,
    tape,
)


class AdamState:
    """First/second moment buffers for every trainable parameter.

    Moments are zero at construction and live in the parameter dtype so a
    checkpoint restore reproduces the in-memory state bit for bit.
    """

    def __init__(self, params):
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps_opt = 1e-8
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()
                  if p.requires_grad}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()
                  if p.requires_grad}


def adam_step(params, state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place, then clear gradients.

    Every trainable parameter must carry a gradient from a backward pass;
    a missing one is reported by name. lr == 0 leaves parameters unchanged
    (the gradient is still consumed and the moments still advance).
    """
    state.t += 1
    mc = 1.0 - state.beta1 ** state.t
    vc = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if g is None:
            raise ValueError(f"adam_step: parameter {name} has no gradient")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / mc) / (np.sqrt(v / vc) + state.eps_opt)
        p.grad = None


@dataclass
class Schedule:
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    total_iters: int = 2000

    def __post_init__(self):
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if not (0 < self.lr_end <= self.lr_start):
            raise ConfigError(
                f"need 0 < lr_end <= lr_start, got {self.lr_end} / {self.lr_start}")


def cosine_lr(t: int, s: Schedule) -> float:
    """Half-cosine decay from lr_start at t=0 to lr_end at t=total_iters.

    The endpoints return the configured rates exactly; t past the horizon
    clamps to lr_end.
    """
    if t < 0:
        raise ValueError(f"cosine_lr: t must be >= 0, got {t}")
    if t >= s.total_iters:
        return s.lr_end
    if t == 0:
        return s.lr_start
    return s.lr_end + 0.5 * (s.lr_start - s.lr_end) * (
        1.0 + math.cos(math.pi * t / s.total_iters))


# ---------------------------------------------------------------------------
# patch sampling and augmentation
# ---------------------------------------------------------------------------

def sample_patch(low: Tensor, ref: Tensor, size: int, rng):
    """Crop the same uniformly placed size x size window from both images."""
    if low.shape != ref.shape:
        raise DimensionError(f"paired shapes differ: {low.shape} vs {ref.shape}")
    if len(low.shape) != 3:
        raise DimensionError(f"expected (C, H, W) images, got {low.shape}")
    _, H, W = low.shape
    if H < size or W < size:
        raise DimensionError(
            f"image {H}x{W} is smaller than the {size}x{size} patch; "
            f"pass a smaller --patch or generate larger images")
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    win = (slice(None), slice(top, top + size), slice(left, left + size))
    return (Tensor(np.ascontiguousarray(low.data[win])),
            Tensor(np.ascontiguousarray(ref.data[win])))


_FLIP = 4  # codes 0..3 rotate by 90*code; codes 4..7 rotate then mirror


def dihedral(a: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 symmetries of the square applied to a (C, H, W) array."""
    if not 0 <= code < 8:
        raise ValueError(f"dihedral code must be in [0, 8), got {code}")
    k = code & 3
    if k % 2 == 1 and a.shape[1] != a.shape[2]:
        raise DimensionError(
            f"90/270 rotation needs a square patch, got {a.shape[1]}x{a.shape[2]}")
    out = np.rot90(a, k, axes=(1, 2))
    if code & _FLIP:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def dihedral_inverse(code: int) -> int:
    # the four mirrored codes are reflections, each its own inverse
    if code & _FLIP:
        return code
    return (-code) & 3


def augment(pair, rng):
    """Apply one random dihedral transform, the same one, to both halves."""
    code = int(rng.integers(0, 8))
    low, ref = pair
    return Tensor(dihedral(low.data, code)), Tensor(dihedral(ref.data, code))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    iter: int
    loss_total: float
    loss_p: float
    loss_c: float
    lr: float
    wall_clock_s: float
    psnr_db: float = None
    ssim: float = None

    def to_json(self) -> str:
        d = {"iter": self.iter, "loss_total": self.loss_total,
             "loss_p": self.loss_p, "loss_c": self.loss_c, "lr": self.lr,
             "wall_clock_s": round(self.wall_clock_s, 3)}
        if self.psnr_db is not None:
            d["psnr_db"] = self.psnr_db
            d["ssim"] = self.ssim
        return json.dumps(d)


@dataclass
class TrainOptions:
    batch: int = 2
    patch: int = 64
    seed: int = 0
    ckpt_every: int = 500
    log_every: int = 1
    eval_every: int = 200
    clip_norm: float = None
    augment_enabled: bool = True
    l1_only: bool = False
    resume_from: str = None
    max_iters: int = None  # stop after this many iterations this invocation

    def __post_init__(self):
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.patch < 1:
            raise ConfigError(f"patch must be >= 1, got {self.patch}")
        for f in ("ckpt_every", "log_every", "eval_every"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.max_iters is not None and self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")


CHECKPOINT_NAME = "checkpoint.ecaf"
LOG_NAME = "train_log.jsonl"


def clip_gradients(params, clip_norm: float) -> float:
    """Scale every gradient so the joint L2 norm is at most clip_norm.

    Returns the norm measured before any scaling.
    """
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    gnorm = math.sqrt(sq)
    if gnorm > clip_norm:
        scale = clip_norm / gnorm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return gnorm


def _write_checkpoint(model, params, state, out_dir, it):
    arrays = {}
    for name in state.m:
        arrays[f"opt.m.{name}"] = state.m[name]
        arrays[f"opt.v.{name}"] = state.v[name]
    scalars = {"iter": str(it), "adam_t": str(state.t)}
    path = os.path.join(out_dir, CHECKPOINT_NAME)
    tmp = path + ".tmp"
    save_checkpoint(model, tmp, arrays=arrays, scalars=scalars)
    os.replace(tmp, path)
    return path


def _restore(model, params, state, path):
    """Copy checkpoint parameters and optimizer state into place, bitwise."""
    loaded, arrays, scalars = load_checkpoint(path, config=model.config,
                                              dtype=model.dtype)
    for (name, p), (name2, q) in zip(model.named_parameters(),
                                     loaded.named_parameters()):
        assert name == name2
        p.data[...] = q.data
    for name in state.m:
        for kind, store in (("m", state.m), ("v", state.v)):
            key = f"opt.{kind}.{name}"
            if key not in arrays:
                raise ConfigError(
                    f"checkpoint lacks optimizer state {key}; cannot resume")
            store[name][...] = arrays[key]
    state.t = int(scalars.get("adam_t", "0"))
    return int(scalars.get("iter", "0"))


def _eval_metrics(model, pair):
    low = Tensor(np.ascontiguousarray(
        pair[0].data[None]).astype(model.dtype, copy=False))
    ref = np.ascontiguousarray(pair[1].data[None]).astype(model.dtype, copy=False)
    pred = forward(low, model)
    return float(psnr(pred.data, ref)), float(ssim(pred.data, ref))


def _batch(dataset, options, it, dtype):
    rng_pair = stream_rng(options.seed, STREAM_PAIR, it)
    rng_crop = stream_rng(options.seed, STREAM_CROP, it)
    rng_aug = stream_rng(options.seed, STREAM_AUGMENT, it)
    idx = rng_pair.integers(0, len(dataset), size=options.batch)
    lows, refs = [], []
    for j in idx:
        lo, re = dataset[int(j)]
        lo, re = sample_patch(lo, re, options.patch, rng_crop)
        if options.augment_enabled:
            lo, re = augment((lo, re), rng_aug)
        lows.append(lo.data)
        refs.append(re.data)
    return (Tensor(np.stack(lows).astype(dtype, copy=False)),
            Tensor(np.stack(refs).astype(dtype, copy=False)))


def train(model, dataset, schedule, weights, out_dir, options=None) -> TrainReport:
    """Run the optimization loop; returns the last emitted report.

    dataset is a nonempty sequence of (low, ref) Tensor pairs; pair 0 doubles
    as the fixed validation pair. The model is updated in place (a resume
    first restores the checkpointed parameters and optimizer state into it).
    Per-iteration randomness comes from generators derived from
    (seed, stream, iteration), so an interrupted run continues bit for bit.
    """
    options = options or TrainOptions()
    if len(dataset) == 0:
        raise ConfigError("dataset is empty; nothing to train on")
    os.makedirs(out_dir, exist_ok=True)

    params = model.param_store()
    state = AdamState(params)
    start_iter = 0
    if options.resume_from is not None:
        start_iter = _restore(model, params, state, options.resume_from)

    net = None
    if not options.l1_only and weights.blend > 0:
        net = build_feature_net(options.seed, model.dtype)

    t0 = time.perf_counter()
    val_pair = dataset[0]
    stop = schedule.total_iters
    if options.max_iters is not None:
        stop = min(stop, start_iter + options.max_iters)
    report = None

    with open(os.path.join(out_dir, LOG_NAME), "a", encoding="utf-8") as log:
        def emit(rep):
            log.write(rep.to_json() + "\n")
            log.flush()

        if start_iter == 0:
            p0, s0 = _eval_metrics(model, val_pair)
            report = TrainReport(iter=0, loss_total=0.0, loss_p=0.0, loss_c=0.0,
                                 lr=cosine_lr(0, schedule),
                                 wall_clock_s=time.perf_counter() - t0,
                                 psnr_db=p0, ssim=s0)
            emit(report)

        for it in range(start_iter + 1, stop + 1):
            lr = cosine_lr(it - 1, schedule)
            low_b, ref_b = _batch(dataset, options, it, model.dtype)
            with tape() as tp:
                pred = forward(low_b, model)
                if options.l1_only:
                    loss = sum_all(abs_t(sub(pred, ref_b)))
                    comps = {"loss_p": 0.0, "loss_c": float(loss.data)}
                else:
                    loss, comps = total_loss(pred, ref_b, weights, net)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise RuntimeError(
                    f"aborting: non-finite loss at iteration {it}, last lr {lr:.8e}")
            backward(loss, tp)

            if options.clip_norm is not None:
                clip_gradients(params, options.clip_norm)

            adam_step(params, state, lr)

            if it % options.log_every == 0 or it == stop:
                report = TrainReport(iter=it, loss_total=loss_val,
                                     loss_p=comps["loss_p"],
                                     loss_c=comps["loss_c"], lr=lr,
                                     wall_clock_s=time.perf_counter() - t0)
                if it % options.eval_every == 0 or it == stop:
                    report.psnr_db, report.ssim = _eval_metrics(model, val_pair)
                emit(report)

            if it % options.ckpt_every == 0 or it == stop:
                _write_checkpoint(model, params, state, out_dir, it)

        if stop == start_iter:
            _write_checkpoint(model, params, state, out_dir, start_iter)
        if report is None:
            # resumed at or past the horizon: nothing left to run
            p0, s0 = _eval_metrics(model, val_pair)
            report = TrainReport(iter=start_iter, loss_total=0.0, loss_p=0.0,
                                 loss_c=0.0, lr=cosine_lr(start_iter, schedule),
                                 wall_clock_s=time.perf_counter() - t0,
                                 psnr_db=p0, ssim=s0)
            emit(report)

    return report
