"""Attention operators over dual feature streams.

Three layers of machinery, lowest first:

* ``mhsa``: plain multi-head self attention with the fixed 1/sqrt(d) scale,
  deliberately composed from the matmul/softmax primitives so it can serve as
  an independent route against the fused kernel.
* ``dmsa_core`` / ``dmsa_block``: dual cross attention. Each stream queries
  with its own projection but attends against the *other* stream's keys, with
  a learnable per-head scale replacing 1/sqrt(d). A depthwise positional term
  on V is added before the output projection.
* ``csdmsa``: the cross-scale block. Per stream, a DMSA interaction between
  the skip (residual) features and the upsampled-path (mid) features; the
  interaction outputs are fused back to C channels by a 1x1 projection; one
  more DMSA across the two fused streams; finally resample to 2x spatial,
  half channels. The three steps are exported individually and ``csdmsa``
  is exactly their composition.

Tokens are flattened spatial positions; heads split the channel axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConfigError,
    DimensionError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    depthwise_conv3x3,
    matmul_batched,
    mul,
    permute,
    reshape,
    resample_up,
    scaled_dot_attention,
    softmax_lastdim,
)


@dataclass
class FeaturePair:
    """The two parallel streams every block consumes and produces."""

    visual: Tensor
    semantic: Tensor

    def __post_init__(self):
        if self.visual.shape != self.semantic.shape:
            raise DimensionError(
                f"FeaturePair: stream shapes differ: {self.visual.shape} vs {self.semantic.shape}")

    @property
    def shape(self):
        return self.visual.shape


@dataclass
class AttnParams:
    """One stream's attention parameters.

    wq/wk/wv/wo are 1x1 conv weights (C,C,1,1) with biases; pos is the
    depthwise 3x3 positional kernel (C,1,3,3), or None when the positional
    term is disabled; zeta holds one learnable scale per head, initialized
    to 1/sqrt(d).
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    pos: Tensor | None
    zeta: Tensor
    heads: int

    def named_tensors(self, prefix):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "pos", "zeta"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}.{name}", t


@dataclass
class CrossScaleParams:
    """Everything one cross-scale block owns.

    inner_v/inner_s: the residual-mid interaction params, one per stream
    (both halves of a stream's interaction share the same set). fuse_*: per
    stream 1x1 projection 2C -> C with bias. outer_v/outer_s: the final
    cross-stream DMSA. rs_*: per-stream resample-up weights (C -> C/2).
    """

    inner_v: AttnParams
    inner_s: AttnParams
    fuse_wv: Tensor
    fuse_bv: Tensor
    fuse_ws: Tensor
    fuse_bs: Tensor
    outer_v: AttnParams
    outer_s: AttnParams
    rs_wv: Tensor
    rs_bv: Tensor
    rs_ws: Tensor
    rs_bs: Tensor

    def named_tensors(self, prefix):
        yield from self.inner_v.named_tensors(f"{prefix}.inner_v")
        yield from self.inner_s.named_tensors(f"{prefix}.inner_s")
        for name in ("fuse_wv", "fuse_bv", "fuse_ws", "fuse_bs"):
            yield f"{prefix}.{name}", getattr(self, name)
        yield from self.outer_v.named_tensors(f"{prefix}.outer_v")
        yield from self.outer_s.named_tensors(f"{prefix}.outer_s")
        for name in ("rs_wv", "rs_bv", "rs_ws", "rs_bs"):
            yield f"{prefix}.{name}", getattr(self, name)


def fanin_uniform(rng, shape, dtype):
    """Uniform(-b, b) with b = sqrt(3 / fan_in); fan_in is all but axis 0.

    This bound gives a linear map unit expected L2 gain. The network stacks
    its projections without normalization layers or inner skip connections,
    so any per-layer gain off 1 would compound exponentially with depth;
    relu-calibrated bounds overdrive activations by 2x per layer here.
    """
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    bound = math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def init_attn_params(C, heads, rng, dtype=np.float32, learnable_scale=True,
                     posemb=True):
    """Fresh AttnParams: fan-in uniform weights, zero biases, zeta = 1/sqrt(d)."""
    if C % heads != 0:
        raise ConfigError(f"channels {C} not divisible by heads {heads}")
    d = C // heads

    def w11():
        return fanin_uniform(rng, (C, C, 1, 1), dtype)

    def bias():
        return Tensor(np.zeros(C, dtype), requires_grad=True)

    zeta = Tensor(np.full(heads, 1.0 / math.sqrt(d), dtype),
                  requires_grad=learnable_scale)
    return AttnParams(
        wq=w11(), bq=bias(), wk=w11(), bk=bias(), wv=w11(), bv=bias(),
        wo=w11(), bo=bias(),
        pos=fanin_uniform(rng, (C, 1, 3, 3), dtype) if posemb else None,
        zeta=zeta, heads=heads)


def init_cross_scale_params(C, heads, rng, dtype=np.float32, learnable_scale=True,
                            posemb=True):
    if C % 2 != 0:
        raise ConfigError(f"cross-scale block needs even channels, got {C}")
    mk = lambda: init_attn_params(C, heads, rng, dtype, learnable_scale, posemb)
    return CrossScaleParams(
        inner_v=mk(), inner_s=mk(),
        fuse_wv=fanin_uniform(rng, (C, 2 * C, 1, 1), dtype),
        fuse_bv=Tensor(np.zeros(C, dtype), requires_grad=True),
        fuse_ws=fanin_uniform(rng, (C, 2 * C, 1, 1), dtype),
        fuse_bs=Tensor(np.zeros(C, dtype), requires_grad=True),
        outer_v=mk(), outer_s=mk(),
        rs_wv=fanin_uniform(rng, (C // 2, C, 1, 1), dtype),
        rs_bv=Tensor(np.zeros(C // 2, dtype), requires_grad=True),
        rs_ws=fanin_uniform(rng, (C // 2, C, 1, 1), dtype),
        rs_bs=Tensor(np.zeros(C // 2, dtype), requires_grad=True))


# ---------------------------------------------------------------------------
# token layout
# ---------------------------------------------------------------------------

def to_tokens(x: Tensor, heads: int) -> Tensor:
    """(B,C,H,W) -> (B, heads, H*W, C/heads); head h owns channel block h."""
    B, C, H, W = x.shape
    if C % heads != 0:
        raise ConfigError(f"channels {C} not divisible by heads {heads}")
    t = reshape(x, (B, heads, C // heads, H * W))
    return permute(t, (0, 1, 3, 2))


def from_tokens(t: Tensor, H: int, W: int) -> Tensor:
    B, heads, T, d = t.shape
    back = permute(t, (0, 1, 3, 2))
    return reshape(back, (B, heads * d, H, W))


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def attention_composed(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """softmax(q @ k^T * scale) @ v built from primitives (the slow route)."""
    logits = matmul_batched(q, permute(k, (0, 1, 3, 2)))
    return matmul_batched(softmax_lastdim(mul(logits, scale)), v)


def mhsa(x: Tensor, p: AttnParams) -> Tensor:
    """Baseline multi-head self attention with the fixed 1/sqrt(d) scale."""
    B, C, H, W = x.shape
    d = C // p.heads
    q = to_tokens(conv2d(x, p.wq, p.bq), p.heads)
    k = to_tokens(conv2d(x, p.wk, p.bk), p.heads)
    v = to_tokens(conv2d(x, p.wv, p.bv), p.heads)
    out = attention_composed(q, k, v, 1.0 / math.sqrt(d))
    return conv2d(from_tokens(out, H, W), p.wo, p.bo)


def dmsa_core(qa: Tensor, kb: Tensor, va: Tensor, zeta: Tensor) -> Tensor:
    """Per head h: softmax(qa @ kb^T * zeta_h) @ va.

    qa/kb/va are token-layout (B, heads, T, d); zeta replaces the fixed
    1/sqrt(d) with a learnable scalar per head.
    """
    return scaled_dot_attention(qa, kb, va, zeta)


def _half_block(x_self: Tensor, x_other: Tensor, pp: AttnParams, po: AttnParams,
                cross: bool) -> Tensor:
    """One stream's output: out_proj(core(Q_self, K_other, V_self) + PosEmb(V_self)).

    Both halves of dmsa_block run this exact function, so swapping inputs
    and parameter sets swaps the outputs bitwise.
    """
    B, C, H, W = x_self.shape
    qa = to_tokens(conv2d(x_self, pp.wq, pp.bq), pp.heads)
    v_img = conv2d(x_self, pp.wv, pp.bv)
    va = to_tokens(v_img, pp.heads)
    if cross:
        kb = to_tokens(conv2d(x_other, po.wk, po.bk), po.heads)
    else:
        kb = to_tokens(conv2d(x_self, pp.wk, pp.bk), pp.heads)
    core = dmsa_core(qa, kb, va, pp.zeta)
    summed = from_tokens(core, H, W)
    if pp.pos is not None:
        summed = add(summed, depthwise_conv3x3(v_img, pp.pos))
    return conv2d(summed, pp.wo, pp.bo)


def dmsa_block(pair: FeaturePair, p: AttnParams, q: AttnParams,
               cross: bool = True) -> FeaturePair:
    """Dual attention: each stream queries the other stream's keys.

    p governs the visual stream, q the semantic one. cross=False degrades
    to two independent self-attention streams (ablation support).
    """
    if p.heads != q.heads:
        raise ConfigError(f"stream head counts differ: {p.heads} vs {q.heads}")
    return FeaturePair(
        visual=_half_block(pair.visual, pair.semantic, p, q, cross),
        semantic=_half_block(pair.semantic, pair.visual, q, p, cross))


# ---------------------------------------------------------------------------
# cross-scale block, exported as three steps plus their composition
# ---------------------------------------------------------------------------

def csdmsa_interact(pair_mid: FeaturePair, pair_res: FeaturePair,
                    cp: CrossScaleParams, cross: bool = True):
    """Step 1: per stream, DMSA between the residual and mid features.

    Returns (visual_pair, semantic_pair) where each pair holds
    (residual', mid') for that stream.
    """
    if pair_mid.shape != pair_res.shape:
        raise DimensionError(
            f"cross-scale: mid shape {pair_mid.shape} != residual shape {pair_res.shape}")
    inter_v = dmsa_block(FeaturePair(pair_res.visual, pair_mid.visual),
                         cp.inner_v, cp.inner_v, cross=cross)
    inter_s = dmsa_block(FeaturePair(pair_res.semantic, pair_mid.semantic),
                         cp.inner_s, cp.inner_s, cross=cross)
    return inter_v, inter_s


def csdmsa_fuse(inter_v: FeaturePair, inter_s: FeaturePair,
                pair_mid: FeaturePair, cp: CrossScaleParams,
                fuse_primed_mid: bool = False) -> FeaturePair:
    """Step 2: per stream, aggregate = W @ concat(residual', mid) + B.

    The mid operand is the *un-primed* input by default; set fuse_primed_mid
    to use the interaction output instead (see module docstring).
    """
    mid_v = inter_v.semantic if fuse_primed_mid else pair_mid.visual
    mid_s = inter_s.semantic if fuse_primed_mid else pair_mid.semantic
    agg_v = conv2d(concat_channels(inter_v.visual, mid_v), cp.fuse_wv, cp.fuse_bv)
    agg_s = conv2d(concat_channels(inter_s.visual, mid_s), cp.fuse_ws, cp.fuse_bs)
    return FeaturePair(agg_v, agg_s)


def csdmsa_resample(agg: FeaturePair, cp: CrossScaleParams,
                    cross: bool = True) -> FeaturePair:
    """Step 3: cross-stream DMSA on the aggregates, then 2x up, C/2 channels."""
    blocked = dmsa_block(agg, cp.outer_v, cp.outer_s, cross=cross)
    return FeaturePair(
        visual=resample_up(blocked.visual, cp.rs_wv, cp.rs_bv),
        semantic=resample_up(blocked.semantic, cp.rs_ws, cp.rs_bs))


def csdmsa(pair_mid: FeaturePair, pair_res: FeaturePair, cp: CrossScaleParams,
           fuse_primed_mid: bool = False, cross: bool = True) -> FeaturePair:
    """The full cross-scale block: interact, fuse, attend-and-resample."""
    inter_v, inter_s = csdmsa_interact(pair_mid, pair_res, cp, cross=cross)
    agg = csdmsa_fuse(inter_v, inter_s, pair_mid, cp, fuse_primed_mid=fuse_primed_mid)
    return csdmsa_resample(agg, cp, cross=cross)
