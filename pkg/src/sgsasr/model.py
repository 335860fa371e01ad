"""End-to-end network assembly, loss, optimiser schedule and checkpoints."""
from __future__ import annotations

import dataclasses
import os
import shutil
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .config import ModelConfig, TrainConfig, config_hash, model_from_ini, model_to_ini
from .decoder import LIIFDecoder, LMFDecoder, output_size
from .encoder import SFEEM, pad_to_multiple
from .errors import CheckpointError, CheckpointVersionError, ConfigError, InputError, NonFiniteLossError
from .saliency import SaliencyPyramid, detect_saliency, make_backend

FORMAT_VERSION = 1


class SGSASR(nn.Module):
    """Saliency-guided encoder followed by an arbitrary-scale implicit decoder.

    The saliency detector is held as a plain attribute, so it never shows up
    in ``parameters()``.
    """

    def __init__(self, cfg: ModelConfig, detector=None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        abl = cfg.ablation
        self.detector = None
        self.pyramid = None
        if abl.use_scrrb:
            self.detector = detector if detector is not None else make_backend(cfg.saliency)
            self.pyramid = SaliencyPyramid(cfg.encoder.widths)
        self.encoder = SFEEM(cfg.encoder, cfg.in_channels,
                             fusion=abl.fusion if abl.use_scrrb else None,
                             per_channel=cfg.affem.per_channel)
        if cfg.decoder.kind == "liif":
            self.decoder = LIIFDecoder(cfg.decoder, cfg.encoder.out_dim, cfg.out_channels)
        else:
            self.decoder = LMFDecoder(cfg.decoder, cfg.encoder.out_dim, cfg.out_channels,
                                      abl.modulation)

    def saliency_pyramid(self, lr: torch.Tensor) -> list[torch.Tensor] | None:
        if self.pyramid is None:
            return None
        s = detect_saliency(lr, self.detector)
        return self.pyramid(pad_to_multiple(s, self.encoder.multiple))

    def encode(self, lr: torch.Tensor, pyramid: list[torch.Tensor] | None = None) -> torch.Tensor:
        """(B, C_in, h, w) image in [0, 1] -> (B, D_FE, h, w) latent grid."""
        if lr.dim() != 4 or lr.shape[1] != self.cfg.in_channels:
            raise InputError(f"expected (B, {self.cfg.in_channels}, h, w) input, got {tuple(lr.shape)}")
        if lr.numel() and (lr.min() < 0 or lr.max() > 1):
            raise InputError("input image values must lie in [0, 1]")
        h, w = lr.shape[-2:]
        if pyramid is None:
            pyramid = self.saliency_pyramid(lr)
        feat = self.encoder(pad_to_multiple(lr, self.encoder.multiple), pyramid)
        return feat[..., :h, :w]

    def query(self, lr, coord, cell, **kwargs):
        return self.decoder.query(self.encode(lr), coord, cell, **kwargs)

    def forward(self, lr: torch.Tensor, h_out: int, w_out: int, **kwargs) -> torch.Tensor:
        return self.decoder.decode(self.encode(lr), h_out, w_out, **kwargs)

    def upscale(self, lr: torch.Tensor, scale: float) -> torch.Tensor:
        return self(lr, *output_size(lr.shape[-2], lr.shape[-1], scale))

    def frozen_slices(self) -> dict[str, torch.Tensor]:
        """Parameter rows that the configuration pins (never updated by training)."""
        if not isinstance(self.decoder, LMFDecoder):
            return {}
        rows = self.decoder.lmgb.frozen_rows
        if not len(rows):
            return {}
        last = self.decoder.lmgb.mlp.layers[-1]
        return {"decoder.lmgb.weight_rows": last.weight.detach()[rows],
                "decoder.lmgb.bias_rows": last.bias.detach()[rows]}


def _module_seed(seed: int, name: str) -> int:
    return zlib.crc32(f"{seed}:{name}".encode())


def build_model(cfg: ModelConfig, seed: int = 0, detector=None, dtype=torch.float32) -> SGSASR:
    """Deterministic construction: each submodule is initialised from a seed
    derived from (seed, module path), so variants that share a submodule
    also share its initial weights."""
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = SGSASR(cfg, detector)
            # children first, so a container's own reset_parameters has the last word
            for name, module in reversed(list(model.named_modules())):
                if hasattr(module, "reset_parameters"):
                    torch.manual_seed(_module_seed(seed, name))
                    module.reset_parameters()
    except (RuntimeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"inconsistent model configuration: {exc}") from exc
    if isinstance(model.decoder, LMFDecoder):
        model.decoder.post_init()
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def l1_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise InputError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    if pred.numel() == 0:
        raise InputError("L1 loss over an empty pixel set")
    return (pred - gt).abs().mean()


def lr_schedule(epoch: int, base_lr: float, milestones=(50, 100, 150, 175), gamma: float = 0.5) -> float:
    if epoch < 0:
        raise InputError("epoch must be >= 0")
    return base_lr * gamma ** sum(1 for m in milestones if m <= epoch)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    lr: float = 2e-4
    seed: int = 0


class Trainer:
    """Owns the optimiser and the mutable training state for one model."""

    def __init__(self, model: SGSASR, cfg: TrainConfig, state: TrainState | None = None):
        self.model = model
        self.cfg = cfg
        self.state = state or TrainState(lr=cfg.lr)
        self.names = {p: n for n, p in model.named_parameters()}
        self.optimizer = torch.optim.Adam(
            [p for p in model.parameters() if p.requires_grad],
            lr=self.state.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
        )

    def set_epoch(self, epoch: int) -> None:
        self.state.epoch = epoch
        self.state.lr = lr_schedule(epoch, self.cfg.lr, self.cfg.milestones, self.cfg.gamma)
        for group in self.optimizer.param_groups:
            group["lr"] = self.state.lr

    def train_step(self, batch: dict) -> float:
        """One Adam update on the L1 loss over the batch's query pixels."""
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        pred = self.model.query(batch["lr"], batch["coord"], batch["cell"])
        loss = l1_loss(pred, batch["gt"])
        if not torch.isfinite(loss):
            norm = sum(float(p.detach().double().norm()) ** 2 for p in self.model.parameters()) ** 0.5
            raise NonFiniteLossError(
                f"loss={loss.item()} at step={self.state.step} epoch={self.state.epoch} "
                f"lr={self.state.lr:g} param_norm={norm:.4g}"
            )
        loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.state.step += 1
        return loss.item()

    def optimizer_arrays(self) -> dict[str, torch.Tensor]:
        out = {}
        for p, st in self.optimizer.state.items():
            name = self.names[p]
            for key, val in st.items():
                out[f"{name}.{key}"] = torch.as_tensor(val).detach().clone()
        return out

    def load_optimizer_arrays(self, arrays: dict[str, torch.Tensor]) -> None:
        for p in self.optimizer.param_groups[0]["params"]:
            name = self.names[p]
            st = {k[len(name) + 1:]: v.clone() for k, v in arrays.items()
                  if k.startswith(name + ".") and k[len(name) + 1:] in ("step", "exp_avg", "exp_avg_sq")}
            if st:
                self.optimizer.state[p] = st


# --- checkpoints -----------------------------------------------------------

@dataclass
class CheckpointBundle:
    params: dict[str, torch.Tensor]
    config: ModelConfig
    state: TrainState
    optimizer: dict[str, torch.Tensor] | None = None
    format_version: int = FORMAT_VERSION

    def build_model(self, detector=None) -> SGSASR:
        model = build_model(self.config, self.state.seed, detector=detector)
        dtype = next(iter(self.params.values())).dtype if self.params else torch.float32
        model = model.to(dtype)
        missing, unexpected = model.load_state_dict(self.params, strict=False)
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={unexpected}")
        return model


def _write_manifest(path: Path, entries: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def _read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}:{n}: manifest line is not key=value: {line!r}")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path: str | Path, model: SGSASR, state: TrainState | None = None,
                    trainer: Trainer | None = None) -> Path:
    """Write a checkpoint directory atomically (temp dir + rename)."""
    path = Path(path)
    state = state or (trainer.state if trainer else TrainState())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        params = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
        save_file(params, str(tmp / "params.safetensors"))
        if trainer is not None:
            save_file(trainer.optimizer_arrays(), str(tmp / "optimizer.safetensors"))
        (tmp / "config.ini").write_text(model_to_ini(model.cfg))
        manifest = {"format_version": FORMAT_VERSION, "config_hash": config_hash(model.cfg)}
        manifest.update({f"state.{f.name}": getattr(state, f.name) for f in dataclasses.fields(state)})
        _write_manifest(tmp / "manifest.txt", manifest)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> CheckpointBundle:
    path = Path(path)
    manifest_path = path / "manifest.txt"
    if not manifest_path.is_file():
        raise CheckpointError(f"{path}: not a checkpoint directory (manifest.txt missing)")
    manifest = _read_manifest(manifest_path)
    try:
        version = int(manifest["format_version"])
    except (KeyError, ValueError):
        raise CheckpointVersionError(f"{manifest_path}: missing or malformed format_version") from None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{manifest_path}: format_version={version}, this build reads {FORMAT_VERSION}"
        )
    try:
        cfg = model_from_ini((path / "config.ini").read_text()).validate()
    except (OSError, ConfigError) as exc:
        raise CheckpointError(f"{path}/config.ini unreadable: {exc}") from exc
    if manifest.get("config_hash") != config_hash(cfg):
        raise CheckpointError(f"{path}: config.ini does not match manifest config_hash")
    if expected is not None and config_hash(expected) != config_hash(cfg):
        raise CheckpointError(
            f"{path}: model config hash {config_hash(cfg)} differs from expected {config_hash(expected)}"
        )
    try:
        params = load_file(str(path / "params.safetensors"))
        optim_file = path / "optimizer.safetensors"
        optim = load_file(str(optim_file)) if optim_file.exists() else None
    except (OSError, SafetensorError) as exc:
        raise CheckpointError(f"{path}: corrupt parameter container: {exc}") from exc
    fields = {f.name: f.type for f in dataclasses.fields(TrainState)}
    state_kwargs = {}
    for name in fields:
        raw = manifest.get(f"state.{name}")
        if raw is not None:
            state_kwargs[name] = float(raw) if name == "lr" else int(raw)
    return CheckpointBundle(params, cfg, TrainState(**state_kwargs), optim, version)


def load_model(path: str | Path, detector=None) -> SGSASR:
    return load_checkpoint(path).build_model(detector)
