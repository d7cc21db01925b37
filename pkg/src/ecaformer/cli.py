"""Command-line entry point: ecaf {synth,train,enhance,eval,verify}.

Exit codes are uniform across subcommands: 0 success, 1 runtime or I/O
failure, 2 bad arguments or configuration. Values resolve in priority
order: flags, then an optional key=value config file, then the ECAF_SEED
environment variable (seed only), then built-in defaults.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from .data import DegradeParams, PairManifest, build_synth_dataset, load_image, save_image
from .network import ModelConfig, build_model, forward, load_checkpoint
from .objectives import LossWeights, psnr, ssim
from .tensor import ConfigError, Tensor
from .training import CHECKPOINT_NAME, Schedule, TrainOptions, train
from .verify import run_verify


class UsageError(Exception):
    """Bad flag or config-file value; maps to exit code 2."""


# builtin defaults for the small single-core setup; the full-scale reference
# configuration trains with iters 250000, batch 8, patch 256
DESK = {
    "iters": 2000, "batch": 2, "patch": 64,
    "lr_start": 2e-4, "lr_end": 1e-6,
    "lambda": 0.2, "epsilon": 1e-3,
    "c0": 8, "heads": 2,
    "ckpt_every": 500, "log_every": 1, "eval_every": 200,
    "n": 8, "size": 64,
    "gamma": 2.2, "gain": 0.3, "sigma": 0.02,
}
FULL_SCALE_NOTE = ("defaults: desk scale (iters 2000, batch 2, patch 64); "
                   "full-scale reference: iters 250000, batch 8, patch 256")

_TRAIN_KEYS = {
    "iters": int, "batch": int, "patch": int,
    "lr_start": float, "lr_end": float,
    "lambda": float, "epsilon": float,
    "c0": int, "heads": int, "seed": int,
    "ablate": str, "clip_norm": float,
    "ckpt_every": int, "log_every": int, "eval_every": int,
    "max_iters": int,
}
_SYNTH_KEYS = {
    "n": int, "size": int, "seed": int,
    "gamma": float, "gain": float, "sigma": float,
}
_ENHANCE_KEYS = {"c0": int, "heads": int}


def _read_config_file(path, allowed):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"config file: {exc}") from exc
    vals = {}
    for i, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config file line {i}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise UsageError(f"config file line {i}: unknown key {key!r}")
        try:
            vals[key] = allowed[key](val)
        except ValueError as exc:
            raise UsageError(f"config file line {i}: key {key!r}: {exc}") from exc
    return vals


def _pick(args, cfg, name, key=None):
    """Flag value if given, else config-file value, else builtin default."""
    key = key or name
    flag = getattr(args, name)
    if flag is not None:
        return flag
    if key in cfg:
        return cfg[key]
    return DESK.get(key)


def _pick_seed(args, cfg):
    if args.seed is not None:
        return args.seed
    if "seed" in cfg:
        return cfg["seed"]
    env = os.environ.get("ECAF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"ECAF_SEED must be an integer, got {env!r}") from exc
    return 0


def _validated(ctor, **kw):
    """Config objects built from user input; validation errors are usage errors."""
    try:
        return ctor(**kw)
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_cfg(args, allowed):
    if getattr(args, "config", None):
        return _read_config_file(args.config, allowed)
    return {}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_cfg(args, _SYNTH_KEYS)
    seed = _pick_seed(args, cfg)
    params = _validated(DegradeParams,
                        gamma=_pick(args, cfg, "gamma"),
                        gain=_pick(args, cfg, "gain"),
                        noise_sigma=_pick(args, cfg, "sigma", key="sigma"),
                        seed=seed)
    n = _pick(args, cfg, "n")
    size = _pick(args, cfg, "size")
    manifest = build_synth_dataset(n, size, seed, args.out, params, force=args.force)
    print(f"wrote {len(manifest.pairs)} pairs under {args.out}")
    print(f"manifest: {manifest.path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args, _TRAIN_KEYS)
    seed = _pick_seed(args, cfg)
    iters = _pick(args, cfg, "iters")
    batch = _pick(args, cfg, "batch")
    patch = _pick(args, cfg, "patch")
    c0 = _pick(args, cfg, "c0")
    heads = _pick(args, cfg, "heads")
    lam = _pick(args, cfg, "lam", key="lambda")
    eps = _pick(args, cfg, "epsilon")
    ablate = _pick(args, cfg, "ablate")
    if ablate is not None and ablate not in ("no-vsf", "no-dmsa", "l1-only"):
        raise UsageError(f"--ablate must be one of no-vsf, no-dmsa, l1-only; got {ablate!r}")

    model_cfg = _validated(ModelConfig,
                           base_channels=c0,
                           heads_per_stage=(heads, heads, heads),
                           seed=seed,
                           vsf_enabled=ablate != "no-vsf",
                           dmsa_enabled=ablate != "no-dmsa")
    weights = _validated(LossWeights, blend=lam, epsilon=eps)
    schedule = _validated(Schedule,
                          lr_start=_pick(args, cfg, "lr_start"),
                          lr_end=_pick(args, cfg, "lr_end"),
                          total_iters=iters)
    options = _validated(TrainOptions,
                         batch=batch, patch=patch, seed=seed,
                         ckpt_every=_pick(args, cfg, "ckpt_every"),
                         log_every=_pick(args, cfg, "log_every"),
                         eval_every=_pick(args, cfg, "eval_every"),
                         clip_norm=_pick(args, cfg, "clip_norm"),
                         l1_only=ablate == "l1-only",
                         resume_from=args.resume,
                         max_iters=_pick(args, cfg, "max_iters"))

    print(f"train: iters={iters} batch={batch} patch={patch} c0={c0} heads={heads} "
          f"lambda={lam:g} epsilon={eps:g} seed={seed}"
          + (f" ablate={ablate}" if ablate else ""))
    print(FULL_SCALE_NOTE)

    pairs = PairManifest.load(args.manifest).load_pairs()
    model = build_model(model_cfg)
    report = train(model, pairs, schedule, weights, args.out, options)
    if report.iter == 0:
        line = "done: iter 0 (no steps taken)"
    else:
        line = f"done: iter {report.iter} loss {report.loss_total:.6f} lr {report.lr:.3e}"
    if report.psnr_db is not None:
        line += f" psnr {report.psnr_db:.2f} ssim {report.ssim:.4f}"
    print(line)
    print(f"checkpoint: {os.path.join(args.out, CHECKPOINT_NAME)}")
    return 0


def cmd_enhance(args) -> int:
    cfg = _load_cfg(args, _ENHANCE_KEYS)
    requested = {}
    c0 = args.c0 if args.c0 is not None else cfg.get("c0")
    if c0 is not None:
        requested["base_channels"] = c0
    heads = args.heads if args.heads is not None else cfg.get("heads")
    if heads is not None:
        requested["heads_per_stage"] = (heads, heads, heads)

    t0 = time.perf_counter()
    model, _, _ = load_checkpoint(args.ckpt)
    for field, want in requested.items():
        got = getattr(model.config, field)
        if got != want:
            raise ConfigError(f"checkpoint mismatch: {field} is {got}, requested {want}")
    img = load_image(args.input)
    out = forward(Tensor(img.data[np.newaxis]), model)
    save_image(Tensor(out.data[0]), args.out)
    print(f"{args.input} -> {args.out} ({time.perf_counter() - t0:.3f}s)")
    return 0


def cmd_eval(args) -> int:
    pairs = PairManifest.load(args.manifest).load_pairs()
    if not pairs:
        raise ConfigError(f"manifest {args.manifest} lists no pairs")
    model = load_checkpoint(args.ckpt)[0] if args.ckpt else None

    rows = []
    for i, (low, ref) in enumerate(pairs):
        lowb = low.data[np.newaxis]
        pred = forward(Tensor(lowb), model).data if model else lowb
        refb = ref.data[np.newaxis]
        rows.append((i, psnr(pred, refb), ssim(pred, refb)))
    mean_p = sum(r[1] for r in rows) / len(rows)
    mean_s = sum(r[2] for r in rows) / len(rows)

    source = "checkpoint" if model else "identity baseline"
    print(f"eval ({source}): {len(rows)} pairs")
    print(f"{'pair':>6}  {'psnr_db':>8}  {'ssim':>7}")
    for i, p, s in rows:
        print(f"{i:>6d}  {p:>8.3f}  {s:>7.4f}")
    print(f"{'mean':>6}  {mean_p:>8.3f}  {mean_s:>7.4f}")
    print(json.dumps({
        "source": source,
        "pairs": [{"index": i, "psnr_db": p, "ssim": s} for i, p, s in rows],
        "mean_psnr_db": mean_p,
        "mean_ssim": mean_s,
    }, sort_keys=True))
    return 0


def cmd_verify(args) -> int:
    return run_verify(plant_grad_bug=args.plant_grad_bug)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_flag(p):
    p.add_argument("--config", metavar="FILE",
                   help="key=value config file; flags override it")


def _add_seed_flag(p):
    p.add_argument("--seed", type=int,
                   help="RNG seed (default: config file, then ECAF_SEED, then 0)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ecaf",
        description="Low-light image enhancer with dual visual-semantic attention. "
                    "Desk defaults target a single CPU core; the full-scale "
                    "reference configuration (iters 250000, batch 8, patch 256) "
                    "is documented per flag.")
    sub = p.add_subparsers(dest="command", required=True,
                           metavar="{synth,train,enhance,eval,verify}")

    sp = sub.add_parser("synth", help="render a synthetic low/reference pair dataset")
    sp.add_argument("--n", type=int, help="number of pairs (default 8)")
    sp.add_argument("--size", type=int, help="square image size in pixels (default 64)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--force", action="store_true",
                    help="allow writing into a non-empty directory")
    sp.add_argument("--gamma", type=float, help="darkening exponent (default 2.2)")
    sp.add_argument("--gain", type=float, help="brightness gain (default 0.3)")
    sp.add_argument("--sigma", type=float, help="sensor noise sigma (default 0.02)")
    _add_seed_flag(sp)
    _add_config_flag(sp)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a model on a manifest of image pairs")
    tp.add_argument("--manifest", required=True, help="TSV manifest of low/ref pairs")
    tp.add_argument("--out", default="runs", help="output directory (default runs/)")
    tp.add_argument("--iters", type=int,
                    help="schedule length (desk default 2000; full-scale 250000)")
    tp.add_argument("--batch", type=int,
                    help="patches per step (desk default 2; full-scale 8)")
    tp.add_argument("--patch", type=int,
                    help="square crop size (desk default 64; full-scale 256)")
    tp.add_argument("--lr-start", type=float, help="initial learning rate (default 2e-4)")
    tp.add_argument("--lr-end", type=float, help="final learning rate (default 1e-6)")
    tp.add_argument("--lambda", dest="lam", type=float,
                    help="feature-loss weight in the blended objective (default 0.2)")
    tp.add_argument("--epsilon", type=float, help="pixel-loss floor (default 1e-3)")
    tp.add_argument("--c0", type=int, help="base channel width (desk default 8)")
    tp.add_argument("--heads", type=int, help="attention heads per scale (default 2)")
    tp.add_argument("--ablate", help="one of: no-vsf, no-dmsa, l1-only")
    tp.add_argument("--clip-norm", type=float, help="global gradient-norm clip (off by default)")
    tp.add_argument("--ckpt-every", type=int, help="checkpoint interval (default 500)")
    tp.add_argument("--log-every", type=int, help="log interval (default 1)")
    tp.add_argument("--eval-every", type=int, help="metric interval (default 200)")
    tp.add_argument("--resume", metavar="CKPT", help="checkpoint to continue from")
    tp.add_argument("--max-iters", type=int,
                    help="stop after this many iterations without shortening the schedule")
    _add_seed_flag(tp)
    _add_config_flag(tp)
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("enhance", help="run a checkpoint on one image")
    ep.add_argument("--ckpt", required=True, help="checkpoint file")
    ep.add_argument("--in", dest="input", required=True, help="input image (.ppm or .png)")
    ep.add_argument("--out", required=True, help="output image path")
    ep.add_argument("--c0", type=int, help="expected base width; errors if the checkpoint differs")
    ep.add_argument("--heads", type=int, help="expected heads; errors if the checkpoint differs")
    _add_config_flag(ep)
    ep.set_defaults(func=cmd_enhance)

    vp = sub.add_parser("eval", help="PSNR/SSIM over a manifest, as table and JSON")
    vp.add_argument("--manifest", required=True, help="TSV manifest of low/ref pairs")
    vp.add_argument("--ckpt", help="checkpoint; omitted = identity baseline")
    vp.set_defaults(func=cmd_eval)

    fp = sub.add_parser("verify", help="run the property suites; exit 0 iff all pass")
    fp.add_argument("--plant-grad-bug", action="store_true",
                    help="deliberately corrupt one gradient to prove the suite can fail")
    fp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ecaf: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"ecaf: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
