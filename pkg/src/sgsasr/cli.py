"""Command-line entry points: synth, train, infer, eval, ablate."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, profile_names, resolve, to_ini
from .data import SynthSpec, load_image_folder, read_image, synth_spacecraft_image, write_image
from .decoder import output_size
from .errors import ConfigError, SGSASRError
from .metrics import count_flops
from .model import load_checkpoint
from .training import ABLATION_AXES, evaluate, fit, run_ablation, summarise_ablation, super_resolve

log = logging.getLogger("sgsasr")


def _seed(arg: int | None, fallback: int) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("SGSASR_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SGSASR_SEED={env!r} is not an integer") from None
    return fallback


def _run_config(args, default_profile: str | None = None) -> RunConfig:
    rc = resolve(args.profile or default_profile, args.config, args.set or ())
    rc.seed = _seed(args.seed, rc.seed)
    if getattr(args, "epochs", None) is not None:
        rc.train.epochs = args.epochs
    return rc


def _split(root: Path, name: str) -> Path:
    """``root/name`` when present, else ``root`` itself (a flat image folder)."""
    sub = root / name
    return sub if sub.is_dir() else root


def _parse_scales(text: str) -> list[float]:
    try:
        scales = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse scale list {text!r}") from None
    if not scales:
        raise ConfigError("scale list is empty")
    if any(s <= 0 for s in scales):
        raise ConfigError("scales must be > 0")
    return scales


# --- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.count < 1:
        raise ConfigError("--count must be >= 1 (an empty dataset is refused)")
    seed = _seed(args.seed, 0)
    val_count = args.val_count if args.val_count is not None else max(1, args.count // 4)
    spec = SynthSpec(size=args.size, channels=args.channels, noise_sigma=args.noise)
    out = Path(args.out)
    for split, n, tag in (("train", args.count, 0), ("val", val_count, 1)):
        folder = out / split
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            img = synth_spacecraft_image(spec, np.random.default_rng([seed, tag, i]))
            write_image(folder / f"{i:05d}.png", img)
    lines = [f"seed={seed}", f"train={args.count}", f"val={val_count}"]
    lines += [f"spec.{k}={v}" for k, v in vars(spec).items()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {args.count} train and {val_count} val images to {out}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    root = Path(args.data)
    channels = rc.model.in_channels
    train = list(load_image_folder(_split(root, "train"), channels=channels))
    val_dir = root / "val"
    val = list(load_image_folder(val_dir, channels=channels)) if val_dir.is_dir() else []
    out = Path(args.out)
    res = fit(rc, train, val, out, resume=args.resume, max_steps=args.max_steps)
    print(f"trained {res.trainer.state.step} steps; final checkpoint {out / 'ckpt' / 'final'}")
    return 0


def _load_model(path):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return load_checkpoint(path).build_model()


def cmd_infer(args) -> int:
    if args.scale <= 0:
        raise ConfigError("--scale must be > 0")
    model = _load_model(args.checkpoint)
    src = Path(args.input)
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    out = Path(args.out)
    if src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    for f in files:
        lr = read_image(f, model.cfg.in_channels)
        h, w = output_size(lr.shape[0], lr.shape[1], args.scale)
        target = out / f.name if src.is_dir() else out
        write_image(target, super_resolve(model, lr, h, w))
        print(f"{f} -> {target} ({h}x{w})")
    return 0


def cmd_eval(args) -> int:
    scales = _parse_scales(args.scales)
    model = _load_model(args.checkpoint)
    ds = load_image_folder(_split(Path(args.data), "val"), channels=model.cfg.in_channels)
    images = list(ds)
    names = [p.name for p in ds.files]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = [f"{'method':<10} {'scale':>6} {'psnr':>8} {'ssim':>7} {'gflops':>9}"]
    kv, per_image = [], []
    for s in scales:
        flops = count_flops(model.cfg, (args.flops_size, args.flops_size), s)
        for method, m in (("sgsasr", model), ("bicubic", None)):
            rep = evaluate(m, images, s, names)
            g = flops / 1e9 if m is not None else float("nan")
            table.append(f"{method:<10} {s:>6g} {rep.psnr_db:>8.3f} {rep.ssim:>7.4f} {g:>9.3f}")
            line = f"method={method} scale={s:g} psnr={rep.psnr_db:.6f} ssim={rep.ssim:.6f} psnr_inf={rep.infinite_count}"
            if m is not None:
                line += f" flops={flops} flops_lr={args.flops_size}x{args.flops_size}"
            kv.append(line)
            per_image += [f"method={method} scale={s:g} image={n} psnr={p:.6f} ssim={q:.6f}"
                          for n, p, q in rep.per_image]
    text = "\n".join(table) + "\n"
    (out / "metrics.txt").write_text(text)
    (out / "metrics.kv").write_text("\n".join(kv) + "\n")
    if args.per_image:
        (out / "per_image.kv").write_text("\n".join(per_image) + "\n")
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise ConfigError(f"unknown axis {args.axis!r}; valid axes: {', '.join(ABLATION_AXES)}")
    rc = _run_config(args, default_profile="ablate-desk")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [rc.seed]
    root = Path(args.data)
    ch = rc.model.in_channels
    train = list(load_image_folder(_split(root, "train"), channels=ch))
    val = list(load_image_folder(root / "val", channels=ch))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(rc))
    rows = run_ablation(rc, args.axis, train, val, seeds, out)
    with open(out / "runs.kv", "w") as fh:
        for r in rows:
            fh.write(f"variant={r.variant} seed={r.seed} psnr={r.psnr:.6f} ssim={r.ssim:.6f} "
                     f"order_hash={r.order_hash}\n")
    header = {"modules": "method", "fusion": "aggregation", "modulation": "modulation"}[args.axis]
    lines = [f"{header:<22} {'psnr':>8} {'ssim':>7}"]
    lines += [f"{name:<22} {p:>8.3f} {q:>7.4f}" for name, p, q in summarise_ablation(args.axis, rows)]
    text = "\n".join(lines) + "\n"
    (out / f"ablate-{args.axis}.txt").write_text(text)
    print(text, end="")
    return 0


# --- argument parsing ----------------------------------------------------------------


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="ini file layered over the profile")
    p.add_argument("--profile", help=f"shipped profile ({', '.join(profile_names())})")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a single config value (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (falls back to $SGSASR_SEED)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgsasr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic spacecraft image set")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True, help="number of training images")
    p.add_argument("--val-count", type=int, help="validation images (default count // 4, at least 1)")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--noise", type=float, default=0.01, help="Gaussian noise sigma")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="folder with train/ (and optionally val/) PNGs")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve an image or a folder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM/FLOPs at several scales")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="HR folder (its val/ subfolder if present)")
    p.add_argument("--scales", default="2,3,4")
    p.add_argument("--out", required=True)
    p.add_argument("--per-image", action="store_true")
    p.add_argument("--flops-size", type=int, default=48, help="LR side used for the FLOPs column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare the variants of one ablation axis")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated seeds (default: the run seed)")
    p.add_argument("--epochs", type=int)
    _config_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SGSASRError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
