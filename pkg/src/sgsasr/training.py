"""Epoch loop, validation and the run-directory layout used by the CLI.

A run directory holds ``config.ini`` (the fully resolved RunConfig),
``train.log`` (one key=value line per validation), and ``ckpt/last`` plus
``ckpt/final`` checkpoint directories.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, set_value, to_ini
from .data import SampleStream, bicubic_resize, to_image, to_tensor
from .errors import CheckpointError, ConfigError, DatasetError, NonFiniteLossError
from .metrics import MetricReport, psnr, ssim
from .model import SGSASR, Trainer, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


def degrade(hr: np.ndarray, scale: float) -> np.ndarray:
    """HR -> LR by antialiased bicubic, LR side = round(side / scale)."""
    h, w = hr.shape[:2]
    lh, lw = max(1, math.floor(h / scale + 0.5)), max(1, math.floor(w / scale + 0.5))
    return np.clip(bicubic_resize(hr, lh, lw), 0, 1)


@torch.no_grad()
def super_resolve(model: SGSASR, lr: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(to_tensor(lr, dtype), h_out, w_out)
    return to_image(out.clamp(0, 1))


def evaluate(model: SGSASR | None, images, scale: float, names=None) -> MetricReport:
    """Score SR (or the bicubic passthrough when ``model`` is None) against each HR image."""
    report = MetricReport()
    for i, hr in enumerate(images):
        h, w = hr.shape[:2]
        lr = degrade(hr, scale)
        if model is None:
            sr = np.clip(bicubic_resize(lr, h, w), 0, 1)
        else:
            sr = super_resolve(model, lr, h, w)
        report.add(names[i] if names else str(i), psnr(sr, hr), ssim(sr, hr))
    return report


@dataclass
class FitResult:
    model: SGSASR
    trainer: Trainer
    losses: list[float] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)


def _kv(**items) -> str:
    parts = []
    for k, v in items.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def fit(rc: RunConfig, train_images, val_images=(), out_dir: str | Path | None = None,
        resume: str | Path | None = None, detector=None, max_steps: int | None = None) -> FitResult:
    """Train per ``rc.train``; checkpoints and logs go to ``out_dir`` when given.

    ``max_steps`` stops early (counted in total steps, including resumed ones).
    """
    tc = rc.train
    stream = SampleStream(list(train_images), tc, rc.seed)
    spe = stream.steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None

    if resume is not None:
        bundle = load_checkpoint(resume, expected=rc.model)
        model = bundle.build_model(detector)
        trainer = Trainer(model, tc, bundle.state)
        if bundle.optimizer is None:
            raise CheckpointError(f"{resume}: no optimizer state, cannot resume training")
        trainer.load_optimizer_arrays(bundle.optimizer)
    else:
        model = build_model(rc.model, rc.seed, detector=detector)
        trainer = Trainer(model, tc)
        trainer.state.seed = rc.seed

    result = FitResult(model, trainer)
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(to_ini(rc))
        log_file = open(out / "train.log", "a" if resume else "w")

    def checkpoint(name: str) -> None:
        if out is not None:
            save_checkpoint(out / "ckpt" / name, model, trainer=trainer)

    total = tc.epochs * spe if max_steps is None else min(max_steps, tc.epochs * spe)
    try:
        while trainer.state.step < total:
            epoch, b = divmod(trainer.state.step, spe)
            trainer.set_epoch(epoch)
            try:
                loss = trainer.train_step(stream.batch(epoch, b))
            except NonFiniteLossError as exc:
                log.error("aborting: %s", exc)
                if log_file is not None:
                    log_file.write(_kv(event="abort", step=trainer.state.step, epoch=epoch) + "\n")
                raise
            result.losses.append(loss)
            if b + 1 < spe:
                continue
            done = epoch + 1
            trainer.state.epoch = done
            if tc.val_every > 0 and done % tc.val_every == 0:
                items = dict(epoch=done, step=trainer.state.step, lr=trainer.state.lr, loss=loss)
                if len(val_images):
                    rep = evaluate(model, val_images, tc.val_scale)
                    items.update(val_scale=float(tc.val_scale), psnr=rep.psnr_db, ssim=rep.ssim)
                line = _kv(**items)
                result.log_lines.append(line)
                log.info(line)
                if log_file is not None:
                    log_file.write(line + "\n")
                    log_file.flush()
            if tc.ckpt_every > 0 and done % tc.ckpt_every == 0:
                checkpoint("last")
        checkpoint("final")
    finally:
        if log_file is not None:
            log_file.close()
    return result


# --- ablation sweeps ---------------------------------------------------------------

ABLATION_AXES = {
    "modules": [
        ("baseline", {"ablation.use_scrrb": "false"}),
        ("baseline+scrrb", {"ablation.use_scrrb": "true", "ablation.fusion": "sum"}),
        ("baseline+scrrb+affem", {"ablation.use_scrrb": "true", "ablation.fusion": "affem"}),
    ],
    "fusion": [
        ("summation", {"ablation.fusion": "sum"}),
        ("concatenation", {"ablation.fusion": "concat"}),
        ("affem", {"ablation.fusion": "affem"}),
    ],
    "modulation": [
        ("none", {"ablation.modulation": "none"}),
        ("scale", {"ablation.modulation": "scale"}),
        ("shift", {"ablation.modulation": "shift"}),
        ("scale+shift", {"ablation.modulation": "both"}),
    ],
}


@dataclass
class AblationRow:
    variant: str
    seed: int
    psnr: float
    ssim: float
    order_hash: str


def variant_config(rc: RunConfig, overrides: dict[str, str], seed: int) -> RunConfig:
    v = copy.deepcopy(rc)
    for key, value in overrides.items():
        set_value(v, key, value)
    v.seed = seed
    v.model.validate()
    return v


def run_ablation(rc: RunConfig, axis: str, train_images, val_images, seeds=(0,),
                 out_dir: str | Path | None = None, detector=None, variants=None) -> list[AblationRow]:
    """Train every variant on ``axis`` (or the named subset) for each seed with an
    identical schedule and data order."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: {', '.join(ABLATION_AXES)}")
    if not len(val_images):
        raise DatasetError("ablation needs validation images")
    rows = []
    for seed in seeds:
        for name, overrides in ABLATION_AXES[axis]:
            if variants is not None and name not in variants:
                continue
            v = variant_config(rc, overrides, seed)
            run_dir = Path(out_dir) / name / f"seed-{seed}" if out_dir is not None else None
            res = fit(v, train_images, val_images, run_dir, detector=detector)
            rep = evaluate(res.model, val_images, v.train.val_scale)
            order = SampleStream(list(train_images), v.train, seed).order_hash(v.train.epochs)
            rows.append(AblationRow(name, seed, rep.psnr_db, rep.ssim, order))
            log.info("%s", _kv(axis=axis, variant=name, seed=seed, psnr=rep.psnr_db,
                               ssim=rep.ssim, order_hash=order))
    return rows


def summarise_ablation(axis: str, rows: list[AblationRow]) -> list[tuple[str, float, float]]:
    """Seed-averaged (variant, psnr, ssim) in the axis' row order."""
    out = []
    for name, _ in ABLATION_AXES[axis]:
        sel = [r for r in rows if r.variant == name]
        if sel:
            out.append((name, float(np.mean([r.psnr for r in sel])), float(np.mean([r.ssim for r in sel]))))
    return out
