"""Image file I/O, synthetic paired datasets, and pair manifests.

PPM (P6, maxval 255) is the canonical fixture format: it is bit-exact and
dependency free. PNG is supported for convenience, restricted to 8-bit
truecolor; the IHDR fields are checked directly so unsupported variants
fail with a named field instead of silently converting.
"""

import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .seeding import STREAM_NOISE, STREAM_RASTER, stream_rng
from .tensor import ConfigError, DimensionError, Tensor

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _as_chw(t) -> np.ndarray:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got {arr.shape}")
    return arr


def _quantize(t) -> np.ndarray:
    """[0,1] float image to (H, W, 3) uint8, rounding halves up."""
    arr = _as_chw(t)
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        warnings.warn(f"image values span [{lo:.4g}, {hi:.4g}]; clamping to [0, 1]")
        arr = np.clip(arr, 0.0, 1.0)
    q = np.floor(arr.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------

def _ppm_tokens(fh, n):
    """Next n whitespace-separated header tokens; '#' starts a comment."""
    toks = []
    tok = b""
    while len(toks) < n:
        ch = fh.read(1)
        if ch == b"":
            raise IOError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
        if ch.isspace() or ch == b"":
            if tok:
                toks.append(tok)
                tok = b""
        else:
            tok += ch
    return toks


def _read_ppm(fh) -> np.ndarray:
    if fh.read(2) != b"P6":
        raise ConfigError("not a P6 PPM file")
    w, h, maxval = (int(t) for t in _ppm_tokens(fh, 3))
    if maxval != 255:
        raise ConfigError(f"unsupported PPM maxval {maxval} (need 255)")
    payload = fh.read(w * h * 3)
    if len(payload) != w * h * 3:
        raise IOError(f"truncated PPM payload: expected {w * h * 3} bytes, "
                      f"got {len(payload)}")
    return np.frombuffer(payload, np.uint8).reshape(h, w, 3)


def _write_ppm(path, hw3: np.ndarray) -> None:
    h, w, _ = hw3.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(hw3.tobytes())


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def _check_ihdr(path) -> None:
    # the IHDR chunk is mandatory and always first: signature, length,
    # "IHDR", width, height, bit depth, color type
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26:
        raise IOError(f"truncated PNG file: {path}")
    if head[12:16] != b"IHDR":
        raise ConfigError(f"PNG missing IHDR chunk: {path}")
    bit_depth, color_type = struct.unpack(">BB", head[24:26])
    if bit_depth != 8:
        raise ConfigError(f"unsupported PNG bit depth {bit_depth} (need 8)")
    if color_type != 2:
        raise ConfigError(
            f"unsupported PNG color type {color_type} (need 2, 8-bit RGB)")


def _read_png(path) -> np.ndarray:
    _check_ihdr(path)
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ConfigError(f"PNG did not decode to 8-bit RGB: {path}")
    return arr


# ---------------------------------------------------------------------------
# public I/O
# ---------------------------------------------------------------------------

def load_image(path) -> Tensor:
    """Decode a PPM or PNG file (sniffed by magic bytes) to (3, H, W) in [0,1]."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:2] == b"P6":
        with open(path, "rb") as fh:
            hw3 = _read_ppm(fh)
    elif magic == _PNG_SIG:
        hw3 = _read_png(path)
    else:
        raise ConfigError(f"unsupported image format (not P6 PPM or PNG): {path}")
    chw = np.ascontiguousarray(hw3.transpose(2, 0, 1))
    return Tensor(chw.astype(np.float32) / np.float32(255.0))


def save_image(t, path) -> None:
    """Quantize to 8-bit and write PPM or PNG, chosen by file extension."""
    hw3 = _quantize(t)
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm":
        _write_ppm(path, hw3)
    elif ext == ".png":
        Image.fromarray(hw3, "RGB").save(path, format="PNG")
    else:
        raise ConfigError(f"unsupported image extension {ext!r} (use .ppm or .png)")


# ---------------------------------------------------------------------------
# synthetic degradation
# ---------------------------------------------------------------------------

@dataclass
class DegradeParams:
    gamma: float = 2.2
    gain: float = 0.3
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if not (0 < self.gain <= 1):
            raise ConfigError(f"gain must be in (0, 1], got {self.gain}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def synth_degrade(ref, p: DegradeParams, rng=None) -> Tensor:
    """low = clamp(gain * ref**gamma + N(0, sigma^2), 0, 1).

    With (gamma=1, gain=1, sigma=0) the output is the input, bit for bit.
    Noise draws come from rng if given, else from p.seed's own stream.
    """
    arr = _as_chw(ref)
    out = arr
    if p.gamma != 1.0:
        out = out ** p.gamma
    if p.gain != 1.0:
        out = out * p.gain
    if p.noise_sigma > 0:
        if rng is None:
            rng = stream_rng(p.seed, STREAM_NOISE)
        noise = rng.normal(0.0, p.noise_sigma, arr.shape).astype(arr.dtype)
        out = out + noise
    if out is arr:
        return Tensor(arr.copy())
    return Tensor(np.clip(out, 0.0, 1.0).astype(arr.dtype))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class PairManifest:
    """Tab-separated (low, ref) path pairs, stored relative to the file."""

    path: str
    pairs: list

    @classmethod
    def load(cls, path):
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 2:
                    raise ConfigError(
                        f"manifest line {i}: expected 2 tab-separated paths, "
                        f"got {len(fields)}")
                pairs.append((fields[0], fields[1]))
        return cls(path=str(path), pairs=pairs)

    def save(self):
        with open(self.path, "w", encoding="utf-8") as fh:
            for low, ref in self.pairs:
                fh.write(f"{low}\t{ref}\n")

    def load_pairs(self):
        """Decode every pair; paired images must agree on dimensions."""
        root = os.path.dirname(os.path.abspath(self.path))
        out = []
        for i, (low_rel, ref_rel) in enumerate(self.pairs):
            low = load_image(os.path.join(root, low_rel))
            ref = load_image(os.path.join(root, ref_rel))
            if low.shape != ref.shape:
                raise DimensionError(
                    f"pair {i} ({low_rel}, {ref_rel}): dimensions differ, "
                    f"{low.shape} vs {ref.shape}")
            out.append((low, ref))
        return out


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

def _reference_raster(size: int, rng) -> np.ndarray:
    """A learnable scene: gradient base, solid rectangles, light speckle."""
    span = np.linspace(0.0, 1.0, size)
    yy = span[:, None]
    xx = span[None, :]
    img = np.empty((3, size, size))
    for c in range(3):
        a, bx, by = rng.uniform(0.3, 0.6), rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25)
        img[c] = a + bx * xx + by * yy
    for _ in range(int(rng.integers(3, 7))):
        h = int(rng.integers(size // 8, size // 2))
        w = int(rng.integers(size // 8, size // 2))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        color = rng.uniform(0.15, 0.9, 3)
        img[:, top:top + h, left:left + w] = color[:, None, None]
    img += rng.uniform(-0.03, 0.03, img.shape)
    return np.clip(img, 0.05, 0.98).astype(np.float32)


MANIFEST_NAME = "manifest.tsv"


def build_synth_dataset(n_pairs: int, size: int, seed: int, out_dir,
                        params: DegradeParams = None,
                        force: bool = False) -> PairManifest:
    """Write n (low, ref) PPM pairs plus a manifest; returns the manifest.

    Refuses a non-empty output directory unless force is set. Identical
    arguments produce byte-identical trees.
    """
    if n_pairs < 0:
        raise ConfigError(f"n_pairs must be >= 0, got {n_pairs}")
    if n_pairs > 0 and size < 1:
        raise ConfigError(f"size must be >= 1, got {size}")
    params = params or DegradeParams()
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigError(
            f"output directory {out_dir} is not empty; pass --force to overwrite")
    os.makedirs(out_dir, exist_ok=True)

    records = []
    for i in range(n_pairs):
        ref = _reference_raster(size, stream_rng(seed, STREAM_RASTER, i))
        low = synth_degrade(ref, params, rng=stream_rng(seed, STREAM_NOISE, i))
        low_name = f"pair{i:04d}_low.ppm"
        ref_name = f"pair{i:04d}_ref.ppm"
        save_image(low, os.path.join(out_dir, low_name))
        save_image(ref, os.path.join(out_dir, ref_name))
        records.append((low_name, ref_name))

    manifest = PairManifest(path=os.path.join(out_dir, MANIFEST_NAME),
                            pairs=records)
    manifest.save()
    return manifest
