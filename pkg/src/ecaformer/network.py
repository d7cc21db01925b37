"""The full enhancement network.

An input image is lifted into two parallel feature streams, a detail-heavy
visual one and a context-heavy semantic one. The pair descends a U: each
encoder stage runs a dual-attention block and then halves the spatial
extent while doubling channels, saving its output as a skip. A small
attention bottleneck sits at the deepest scale. On the way up, each
cross-scale block fuses the saved skip back into the upsampled path. The
two streams are finally concatenated and projected back to image space;
that correction is added to the input and the result clamped to [0,1].

The final projection starts at zero, so a freshly built model is exactly
the identity on in-range images.

Checkpoints are a single file: a text header holding the build config and
a parameter manifest (name, shape, byte offset), then the concatenated
binary tensor records. Loading against a different config fails naming the
first offending key.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .attention import (
    AttnParams,
    CrossScaleParams,
    FeaturePair,
    csdmsa,
    dmsa_block,
    init_attn_params,
    init_cross_scale_params,
    fanin_uniform,
)
from .seeding import STREAM_INIT, stream_rng
from .tensor import (
    ConfigError,
    DimensionError,
    Tensor,
    add,
    clamp,
    concat_channels,
    conv2d,
    crop2d,
    depthwise_separable_conv,
    load_tensor,
    pad2d,
    resample_down,
    save_tensor,
)


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model, minus the learned values.

    heads_per_stage is indexed by scale level: entry l applies to blocks
    working on base_channels * 2**l channels, so it needs stages + 1
    entries. vsf_enabled / dmsa_enabled are the two architecture ablation
    switches; norm_enabled is reserved and must stay false.
    """

    base_channels: int = 8
    heads_per_stage: tuple = (2, 2, 2)
    stages: int = 2
    bottleneck_blocks: int = 2
    input_channels: int = 3
    posemb_enabled: bool = True
    norm_enabled: bool = False
    seed: int = 0
    vsf_enabled: bool = True
    dmsa_enabled: bool = True

    def __post_init__(self):
        self.heads_per_stage = tuple(int(h) for h in self.heads_per_stage)
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.bottleneck_blocks < 0:
            raise ConfigError(f"bottleneck_blocks must be >= 0, got {self.bottleneck_blocks}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        if len(self.heads_per_stage) != self.stages + 1:
            raise ConfigError(
                f"heads_per_stage needs {self.stages + 1} entries for {self.stages} stages "
                f"(one per scale level), got {len(self.heads_per_stage)}")
        for level, h in enumerate(self.heads_per_stage):
            c = self.base_channels << level
            if h < 1 or c % h:
                raise ConfigError(
                    f"scale level {level}: {c} channels not divisible by {h} heads")


_BOOL_KEYS = ("posemb_enabled", "norm_enabled", "vsf_enabled", "dmsa_enabled")
_INT_KEYS = ("base_channels", "stages", "bottleneck_blocks", "input_channels", "seed")


def config_to_text(cfg: ModelConfig) -> str:
    """Render the config as one key=value line per field, declaration order."""
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _BOOL_KEYS:
            v = "true" if v else "false"
        elif f.name == "heads_per_stage":
            v = ",".join(str(h) for h in v)
        out.append(f"{f.name}={v}")
    return "\n".join(out) + "\n"


def config_from_text(text: str) -> ModelConfig:
    raw = {}
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln:
            continue
        if "=" not in ln:
            raise ConfigError(f"bad config line (expected key=value): {ln!r}")
        key, val = ln.split("=", 1)
        raw[key.strip()] = val.strip()
    known = {f.name for f in fields(ModelConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
    for key in known:
        if key not in raw:
            raise ConfigError(f"config missing key: {key}")
    kw = {}
    for key, val in raw.items():
        if key in _INT_KEYS:
            kw[key] = int(val)
        elif key in _BOOL_KEYS:
            if val not in ("true", "false"):
                raise ConfigError(f"config key {key} must be true or false, got {val!r}")
            kw[key] = val == "true"
        else:
            kw[key] = tuple(int(h) for h in val.split(","))
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class VSCParams:
    """Extractor weights: one plain 3x3 conv, then two depthwise-separable
    convs. The latter six fields are None when the semantic branch is
    ablated away."""

    conv1_w: Tensor
    conv1_b: Tensor
    dsc1_dw: Tensor | None
    dsc1_pw: Tensor | None
    dsc1_b: Tensor | None
    dsc2_dw: Tensor | None
    dsc2_pw: Tensor | None
    dsc2_b: Tensor | None

    def named_tensors(self, prefix="vsc"):
        for name in ("conv1_w", "conv1_b", "dsc1_dw", "dsc1_pw", "dsc1_b",
                     "dsc2_dw", "dsc2_pw", "dsc2_b"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}.{name}", t


@dataclass
class StageParams:
    """One encoder stage: a dual-attention block plus per-stream downsampling."""

    attn_v: AttnParams
    attn_s: AttnParams
    down_wv: Tensor
    down_bv: Tensor
    down_ws: Tensor
    down_bs: Tensor

    def named_tensors(self, prefix):
        yield from self.attn_v.named_tensors(f"{prefix}.v")
        yield from self.attn_s.named_tensors(f"{prefix}.s")
        for name in ("down_wv", "down_bv", "down_ws", "down_bs"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class EncoderTaps:
    """Saved encoder outputs. pairs[0] is the extractor pair at full
    resolution; pairs[s] is stage s's post-downsample pair, at 1/2**s the
    spatial extent and base_channels * 2**s channels."""

    pairs: list

    def __getitem__(self, s) -> FeaturePair:
        return self.pairs[s]

    def __len__(self):
        return len(self.pairs)


@dataclass
class Model:
    config: ModelConfig
    vsc: VSCParams
    encoder: list            # StageParams, stage 1 first
    bottleneck: list         # (AttnParams, AttnParams) per block
    decoder: list            # CrossScaleParams, deepest scale first
    map_w: Tensor
    map_b: Tensor

    def named_parameters(self):
        """(name, tensor) pairs in a fixed order: the creation order."""
        yield from self.vsc.named_tensors()
        for s, sp in enumerate(self.encoder, start=1):
            yield from sp.named_tensors(f"enc{s}")
        for j, (pv, ps) in enumerate(self.bottleneck):
            yield from pv.named_tensors(f"mid{j}.v")
            yield from ps.named_tensors(f"mid{j}.s")
        for i, cp in enumerate(self.decoder):
            yield from cp.named_tensors(f"dec{self.config.stages - i}")
        yield "map_w", self.map_w
        yield "map_b", self.map_b

    def param_store(self):
        return dict(self.named_parameters())

    @property
    def dtype(self):
        return self.map_w.data.dtype


def parameter_count(model: Model) -> int:
    return sum(int(t.data.size) for _, t in model.named_parameters())


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    """Construct and initialize a model from its config.

    All weights draw from one generator seeded by (config.seed, init
    stream), in a fixed creation order, so equal configs build bitwise
    equal models. Convolution and projection weights are fan-in-scaled
    uniform at unit gain, biases zero, per-head scales 1/sqrt(d); the final
    image-space projection is zero so the fresh model is an identity map.
    """
    if config.norm_enabled:
        raise ConfigError("norm_enabled is a reserved flag with no implementation; "
                          "set it false")
    rng = stream_rng(config.seed, STREAM_INIT)
    C0 = config.base_channels
    cin = config.input_channels
    learnable = config.dmsa_enabled
    pe = config.posemb_enabled

    def zeros(n):
        return Tensor(np.zeros(n, dtype), requires_grad=True)

    conv1_w = fanin_uniform(rng, (C0, cin, 3, 3), dtype)
    conv1_b = zeros(C0)
    if config.vsf_enabled:
        vsc = VSCParams(
            conv1_w, conv1_b,
            dsc1_dw=fanin_uniform(rng, (C0, 1, 3, 3), dtype),
            dsc1_pw=fanin_uniform(rng, (C0, C0, 1, 1), dtype),
            dsc1_b=zeros(C0),
            dsc2_dw=fanin_uniform(rng, (C0, 1, 3, 3), dtype),
            dsc2_pw=fanin_uniform(rng, (C0, C0, 1, 1), dtype),
            dsc2_b=zeros(C0))
    else:
        vsc = VSCParams(conv1_w, conv1_b, None, None, None, None, None, None)

    encoder = []
    for s in range(1, config.stages + 1):
        C = C0 << (s - 1)
        heads = config.heads_per_stage[s - 1]
        encoder.append(StageParams(
            attn_v=init_attn_params(C, heads, rng, dtype, learnable, pe),
            attn_s=init_attn_params(C, heads, rng, dtype, learnable, pe),
            down_wv=fanin_uniform(rng, (2 * C, C, 4, 4), dtype),
            down_bv=zeros(2 * C),
            down_ws=fanin_uniform(rng, (2 * C, C, 4, 4), dtype),
            down_bs=zeros(2 * C)))

    Cb = C0 << config.stages
    hb = config.heads_per_stage[config.stages]
    bottleneck = [
        (init_attn_params(Cb, hb, rng, dtype, learnable, pe),
         init_attn_params(Cb, hb, rng, dtype, learnable, pe))
        for _ in range(config.bottleneck_blocks)]

    decoder = [
        init_cross_scale_params(C0 << s, config.heads_per_stage[s], rng,
                                dtype, learnable, pe)
        for s in range(config.stages, 0, -1)]

    map_w = Tensor(np.zeros((cin, 2 * C0, 3, 3), dtype), requires_grad=True)
    map_b = zeros(cin)
    return Model(config, vsc, encoder, bottleneck, decoder, map_w, map_b)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def extract_visual_semantic(img: Tensor, vsc: VSCParams) -> FeaturePair:
    """Lift an image into the (visual, semantic) stream pair.

    The visual stream is one 3x3 conv of the input; the semantic stream
    pushes it through two depthwise-separable convs, widening the
    receptive field from 3x3 to 7x7. With the semantic branch ablated the
    visual features are fed to both slots.
    """
    B, C, H, W = img.shape
    want = vsc.conv1_w.shape[1]
    if C != want:
        raise ConfigError(f"input has {C} channels, extractor expects {want}")
    if H < 8 or W < 8:
        raise DimensionError(f"extractor needs input of at least 8x8, got {H}x{W}")
    f_v = conv2d(img, vsc.conv1_w, vsc.conv1_b, pad=1)
    if vsc.dsc1_dw is None:
        return FeaturePair(f_v, f_v)
    mid = depthwise_separable_conv(f_v, vsc.dsc1_dw, vsc.dsc1_pw, vsc.dsc1_b)
    f_s = depthwise_separable_conv(mid, vsc.dsc2_dw, vsc.dsc2_pw, vsc.dsc2_b)
    return FeaturePair(f_v, f_s)


def encoder_stage(pair: FeaturePair, sp: StageParams,
                  cross: bool = True) -> tuple:
    """Attention, then 2x spatial reduction with channel doubling.

    Returns (down, tap); the tap that later feeds the matching decoder
    block is the downsampled pair itself, the very object handed onward.
    """
    B, C, H, W = pair.shape
    if H % 2 or W % 2:
        raise DimensionError(f"encoder stage needs even spatial extents, got {H}x{W}")
    blocked = dmsa_block(pair, sp.attn_v, sp.attn_s, cross=cross)
    down = FeaturePair(
        visual=resample_down(blocked.visual, sp.down_wv, sp.down_bv),
        semantic=resample_down(blocked.semantic, sp.down_ws, sp.down_bs))
    return down, down


def encode(pair: FeaturePair, model: Model, cross: bool = True):
    """Run all encoder stages; returns (deepest pair, EncoderTaps)."""
    taps = [pair]
    for sp in model.encoder:
        pair, tap = encoder_stage(pair, sp, cross=cross)
        taps.append(tap)
    return pair, EncoderTaps(taps)


def forward(img: Tensor, model: Model) -> Tensor:
    """Enhance a batch of images; output shape equals input shape.

    Inputs are expected in [0,1]; anything outside is clamped with a
    warning. Spatial extents are zero-padded up to the U's stride and the
    padding cropped away at the end. The network's output is a correction
    added onto the input, clamped to [0,1].
    """
    B, C, H, W = img.shape
    cfg = model.config
    if C != cfg.input_channels:
        raise ConfigError(f"input has {C} channels, model expects {cfg.input_channels}")
    mult = 1 << cfg.stages
    if H < 2 * mult or W < 2 * mult:
        raise DimensionError(
            f"input {H}x{W} too small for {cfg.stages} stages; need at least "
            f"{2 * mult}x{2 * mult}")
    if img.data.dtype != model.dtype:
        raise TypeError(f"input dtype {img.data.dtype} != model dtype {model.dtype}")
    if float(img.data.min()) < 0.0 or float(img.data.max()) > 1.0:
        warnings.warn("input pixels outside [0,1]; clamping", stacklevel=2)
        img = clamp(img, 0.0, 1.0)
    pad_h = -H % mult
    pad_w = -W % mult
    x = pad2d(img, 0, pad_h, 0, pad_w) if pad_h or pad_w else img

    cross = cfg.dmsa_enabled
    pair = extract_visual_semantic(x, model.vsc)
    pair, taps = encode(pair, model, cross=cross)
    for pv, ps in model.bottleneck:
        pair = dmsa_block(pair, pv, ps, cross=cross)
    for i, cp in enumerate(model.decoder):
        s = cfg.stages - i
        pair = csdmsa(pair, taps[s], cp, cross=cross)

    merged = concat_channels(pair.visual, pair.semantic)
    delta = conv2d(merged, model.map_w, model.map_b, pad=1)
    out = clamp(add(delta, x), 0.0, 1.0)
    if pad_h or pad_w:
        out = crop2d(out, 0, 0, H, W)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "ECAFCKPT 1"


def save_checkpoint(model: Model, path, arrays=None, scalars=None):
    """Write the model (and optional extra state) to one file.

    arrays: extra named ndarrays appended to the manifest, e.g. optimizer
    moments; their names must not collide with parameter names. scalars:
    extra key=value strings kept in a [state] section.
    """
    records = list(model.named_parameters())
    names = {n for n, _ in records}
    if arrays:
        for name, arr in arrays.items():
            if name in names:
                raise ConfigError(f"extra array name collides with a parameter: {name}")
            records.append((name, Tensor(np.asarray(arr))))
    payload = io.BytesIO()
    manifest = []
    for name, t in records:
        manifest.append((name, t.data.shape, payload.tell()))
        save_tensor(t.data, payload)
    with open(path, "wb") as fh:
        fh.write((_CKPT_MAGIC + "\n").encode("ascii"))
        fh.write(b"[config]\n")
        fh.write(config_to_text(model.config).encode("ascii"))
        if scalars:
            fh.write(b"[state]\n")
            for key, val in scalars.items():
                fh.write(f"{key}={val}\n".encode("ascii"))
        fh.write(b"[manifest]\n")
        for name, shape, off in manifest:
            dims = ",".join(str(d) for d in shape)
            fh.write(f"{name}\t{dims}\t{off}\n".encode("ascii"))
        fh.write(b"[payload]\n")
        fh.write(payload.getvalue())


def _split_header(blob: bytes):
    marker = b"\n[payload]\n"
    idx = blob.find(marker)
    if idx < 0:
        raise ConfigError("checkpoint has no payload section")
    return blob[:idx].decode("ascii"), blob[idx + len(marker):]


def _parse_sections(header: str):
    lines = header.splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise ConfigError("not a checkpoint file (bad leading magic line)")
    sections = {}
    current = None
    for ln in lines[1:]:
        if ln.startswith("[") and ln.endswith("]"):
            current = ln[1:-1]
            sections[current] = []
        elif current is None:
            raise ConfigError(f"checkpoint header line outside any section: {ln!r}")
        else:
            sections[current].append(ln)
    for need in ("config", "manifest"):
        if need not in sections:
            raise ConfigError(f"checkpoint missing [{need}] section")
    return sections


def load_checkpoint(path, config: ModelConfig | None = None, dtype=np.float32):
    """Rebuild a model from a checkpoint file.

    If config is given it must equal the stored one; the first differing
    field is named in the error. Returns (model, arrays, scalars) where
    arrays holds any extra records (optimizer state) and scalars the
    [state] entries.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    header, payload = _split_header(blob)
    sections = _parse_sections(header)
    file_cfg = config_from_text("\n".join(sections["config"]))
    if config is not None:
        for f in fields(ModelConfig):
            got = getattr(file_cfg, f.name)
            want = getattr(config, f.name)
            if got != want:
                raise ConfigError(
                    f"checkpoint config mismatch at {f.name}: "
                    f"checkpoint has {got}, requested {want}")
    scalars = {}
    for ln in sections.get("state", []):
        if "=" not in ln:
            raise ConfigError(f"bad state line: {ln!r}")
        key, val = ln.split("=", 1)
        scalars[key] = val

    model = build_model(file_cfg, dtype)
    params = model.param_store()
    remaining = dict(params)
    arrays = {}
    reader = io.BytesIO(payload)
    for ln in sections["manifest"]:
        parts = ln.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"bad manifest line: {ln!r}")
        name, dims, off = parts
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        reader.seek(int(off))
        arr = load_tensor(reader)
        if arr.shape != shape:
            raise ConfigError(
                f"checkpoint record {name}: payload shape {arr.shape} does not "
                f"match manifest shape {shape}")
        if name in params:
            t = remaining.pop(name, None)
            if t is None:
                raise ConfigError(f"checkpoint repeats parameter {name}")
            if t.data.shape != shape:
                raise ConfigError(
                    f"checkpoint parameter {name}: shape {shape} != model shape "
                    f"{t.data.shape}")
            t.data = arr.astype(dtype)
        else:
            arrays[name] = arr
    if remaining:
        missing = next(iter(remaining))
        raise ConfigError(f"checkpoint missing parameter {missing}")
    return model, arrays, scalars
