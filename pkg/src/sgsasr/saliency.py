"""Spacecraft core-region saliency (SCRRB).

A frozen detector maps the LR image to a single-channel map in [0, 1]; a
small learnable conv stack turns that map into one feature map per encoder
scale. Two detector backends exist: a luminance threshold that exploits the
black space background, and an external ONNX model run inference-only.
"""
from __future__ import annotations

import threading
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import SaliencyConfig
from .errors import ConfigError, InputError


def _as_batch(image) -> tuple[torch.Tensor, bool]:
    """Accept a (H, W, C) numpy image or a (B, C, H, W) / (C, H, W) tensor."""
    if isinstance(image, np.ndarray):
        if image.ndim == 2:
            image = image[..., None]
        if image.ndim != 3:
            raise InputError(f"expected an H x W x C image, got shape {image.shape}")
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None], True
    if image.dim() == 3:
        image = image[None]
    if image.dim() != 4:
        raise InputError(f"expected a (B, C, H, W) tensor, got shape {tuple(image.shape)}")
    return image, False


def _check_channels(x: torch.Tensor) -> None:
    if x.shape[1] not in (1, 3):
        raise InputError(f"saliency needs 1 or 3 channels, got {x.shape[1]}")


def luminance_saliency(image, k: float = 0.5):
    """Binary map: 1 where channel-mean luminance > mean + k * std (per image).

    Constant images (std == 0) give an all-zero map.
    """
    if k < 0:
        raise InputError("k must be >= 0")
    x, from_numpy = _as_batch(image)
    _check_channels(x)
    with torch.no_grad():
        lum = x.mean(dim=1, keepdim=True)
        flat = lum.flatten(1)
        mean = flat.mean(dim=1)
        std = flat.std(dim=1, unbiased=False)
        tau = (mean + k * std).view(-1, 1, 1, 1)
        s = (lum > tau).to(x.dtype)
        s[std == 0] = 0
    if from_numpy:
        return s[0].permute(1, 2, 0).numpy()
    return s


class LuminanceSaliency:
    kind = "luminance"

    def __init__(self, k: float = 0.5):
        if k < 0:
            raise ConfigError("saliency.k must be >= 0")
        self.k = k

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return luminance_saliency(x, self.k)


class OnnxSaliency:
    """Frozen external detector loaded from an ONNX file.

    The graph must take one (N, C, H, W) float32 input and return a map with
    one channel and the same spatial size. Output is clipped to [0, 1].
    Runs are serialised with a lock; onnxruntime sessions are not documented
    as reentrant.
    """

    kind = "external"

    def __init__(self, model_path: str | Path):
        path = Path(model_path) if model_path else None
        if path is None or not path.is_file():
            raise ConfigError(f"saliency.model_path {model_path!r} does not exist")
        try:
            import onnxruntime as ort
        except ImportError as exc:
            raise ConfigError("the external saliency backend needs onnxruntime installed") from exc
        try:
            self.session = ort.InferenceSession(str(path), providers=["CPUExecutionProvider"])
        except Exception as exc:
            raise ConfigError(f"cannot load saliency model {path}: {exc}") from exc
        self.input_name = self.session.get_inputs()[0].name
        self.model_path = str(path)
        self._lock = threading.Lock()

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x)
        arr = x.detach().cpu().numpy().astype(np.float32)
        with self._lock:
            out = self.session.run(None, {self.input_name: arr})[0]
        out = np.asarray(out)
        if out.ndim == 3:
            out = out[:, None]
        if out.shape[0] != x.shape[0] or out.shape[1] != 1 or out.shape[2:] != tuple(x.shape[2:]):
            raise InputError(f"saliency model returned shape {out.shape} for input {tuple(x.shape)}")
        return torch.from_numpy(np.clip(out, 0.0, 1.0)).to(dtype=x.dtype, device=x.device)


def make_backend(cfg: SaliencyConfig):
    if cfg.backend == "luminance":
        return LuminanceSaliency(cfg.k)
    if cfg.backend == "external":
        return OnnxSaliency(cfg.model_path)
    raise ConfigError(f"unknown saliency backend {cfg.backend!r}")


def detect_saliency(image, backend):
    """Saliency map with the same spatial size as ``image``; never tracks gradients."""
    x, from_numpy = _as_batch(image)
    _check_channels(x)
    with torch.no_grad():
        s = backend(x.detach())
    if from_numpy:
        return s[0].permute(1, 2, 0).numpy()
    return s


class SaliencyPyramid(nn.Module):
    """Per-scale saliency features: a 3x3 conv at full resolution, then one
    stride-2 3x3 conv per further level, channel-matched to the encoder."""

    def __init__(self, widths: list[int]):
        super().__init__()
        self.widths = list(widths)
        self.head = nn.Conv2d(1, widths[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i - 1], widths[i], 3, stride=2, padding=1)
            for i in range(1, len(widths))
        )

    def forward(self, s: torch.Tensor) -> list[torch.Tensor]:
        factor = 2 ** (len(self.widths) - 1)
        if s.shape[-2] % factor or s.shape[-1] % factor:
            raise InputError(
                f"saliency map {tuple(s.shape[-2:])} is not divisible by {factor}; pad upstream"
            )
        feats = [self.head(s)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return feats
