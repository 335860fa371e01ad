"""Saliency-enhanced NAFNet-style U-shaped feature encoder (SFEEM)."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import InputError


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] % 2:
        raise InputError(f"simple gate needs an even channel count, got {x.shape[1]}")
    x1, x2 = x.chunk(2, dim=1)
    return x1 * x2


def simplified_channel_attention(x: torch.Tensor, weight: torch.Tensor,
                                 bias: torch.Tensor | None = None) -> torch.Tensor:
    """x * conv1x1(GAP(x)); weight has shape (C, C, 1, 1)."""
    pooled = x.mean(dim=(2, 3), keepdim=True)
    return x * F.conv2d(pooled, weight, bias)


def affem_fuse(f: torch.Tensor, f_s: torch.Tensor, w1, w2) -> torch.Tensor:
    if f.shape != f_s.shape:
        raise InputError(f"fusion inputs differ in shape: {tuple(f.shape)} vs {tuple(f_s.shape)}")
    return w1 * f + w2 * f_s


class LayerNorm2d(nn.Module):
    """Normalises over channels at each spatial location."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=1, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class SimpleGate(nn.Module):
    def forward(self, x):
        return simple_gate(x)


class SCA(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        return x * self.conv(x.mean(dim=(2, 3), keepdim=True))


class NAFBlock(nn.Module):
    """X1 = X + proj(SCA(SG(dw(expand(LN(X)))))); out = X1 + proj(SG(expand(LN(X1))))."""

    def __init__(self, c: int, dw_expansion: int = 2, ffn_expansion: int = 2):
        super().__init__()
        dw_c = c * dw_expansion
        ffn_c = c * ffn_expansion
        self.norm1 = LayerNorm2d(c)
        self.conv1 = nn.Conv2d(c, dw_c, 1)
        self.conv2 = nn.Conv2d(dw_c, dw_c, 3, padding=1, groups=dw_c)
        self.sg = SimpleGate()
        self.sca = SCA(dw_c // 2)
        self.conv3 = nn.Conv2d(dw_c // 2, c, 1)

        self.norm2 = LayerNorm2d(c)
        self.conv4 = nn.Conv2d(c, ffn_c, 1)
        self.conv5 = nn.Conv2d(ffn_c // 2, c, 1)

    def forward(self, x):
        y = self.conv3(self.sca(self.sg(self.conv2(self.conv1(self.norm1(x))))))
        x = x + y
        y = self.conv5(self.sg(self.conv4(self.norm2(x))))
        return x + y


class Fusion(nn.Module):
    """Merges encoder features with same-shape saliency features.

    ``affem``: learnable w1 * f + w2 * f_s with both weights initialised to 1
    (scalars, or per-channel vectors); ``sum``: f + f_s; ``concat``: a 1x1
    conv over the channel concatenation back to ``channels``.
    """

    def __init__(self, mode: str, channels: int, per_channel: bool = False):
        super().__init__()
        self.mode = mode
        if mode == "affem":
            shape = (1, channels, 1, 1) if per_channel else (1,)
            self.w1 = nn.Parameter(torch.ones(shape))
            self.w2 = nn.Parameter(torch.ones(shape))
        elif mode == "concat":
            self.reduce = nn.Conv2d(2 * channels, channels, 1)
        elif mode != "sum":
            raise ValueError(f"unknown fusion mode {mode!r}")

    def forward(self, f, f_s):
        if f.shape != f_s.shape:
            raise InputError(f"fusion inputs differ in shape: {tuple(f.shape)} vs {tuple(f_s.shape)}")
        if self.mode == "affem":
            return affem_fuse(f, f_s, self.w1, self.w2)
        if self.mode == "sum":
            return f + f_s
        return self.reduce(torch.cat([f, f_s], dim=1))


def pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return x
    # reflect needs pad < size; tiny inputs fall back to edge replication
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


class SFEEM(nn.Module):
    """Shallow conv, NAFBlock encoder with fusion before every downsample,
    middle blocks, additive-skip decoder, and a 3x3 output conv added to a
    1x1 projection of the shallow features.

    ``fusion`` is None for the plain-NAFNet baseline (no saliency input).
    """

    def __init__(self, cfg: EncoderConfig, in_channels: int = 1,
                 fusion: str | None = "affem", per_channel: bool = False):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths
        block = lambda c: NAFBlock(c, cfg.dw_expansion, cfg.ffn_expansion)

        self.intro = nn.Conv2d(in_channels, cfg.base_width, 3, padding=1)
        self.encoders = nn.ModuleList(
            nn.Sequential(*[block(c) for _ in range(n)]) for c, n in zip(widths, cfg.enc_blocks)
        )
        self.fusions = None
        if fusion is not None:
            self.fusions = nn.ModuleList(Fusion(fusion, c, per_channel) for c in widths)
        self.downs = nn.ModuleList(nn.Conv2d(c, 2 * c, 2, stride=2) for c in widths)
        mid = widths[-1] * 2
        self.middle = nn.Sequential(*[block(mid) for _ in range(cfg.middle_blocks)])
        self.ups = nn.ModuleList(
            nn.Sequential(nn.Conv2d(2 * c, 4 * c, 1, bias=False), nn.PixelShuffle(2))
            for c in reversed(widths)
        )
        self.decoders = nn.ModuleList(
            nn.Sequential(*[block(c) for _ in range(n)])
            for c, n in zip(reversed(widths), cfg.dec_blocks)
        )
        self.ending = nn.Conv2d(cfg.base_width, cfg.out_dim, 3, padding=1)
        self.shortcut = nn.Conv2d(cfg.base_width, cfg.out_dim, 1)

    @property
    def multiple(self) -> int:
        return 2 ** self.cfg.levels

    def forward(self, x: torch.Tensor, pyramid: list[torch.Tensor] | None = None) -> torch.Tensor:
        if x.shape[-2] % self.multiple or x.shape[-1] % self.multiple:
            raise InputError(
                f"input {tuple(x.shape[-2:])} is not divisible by {self.multiple}; pad first"
            )
        if self.fusions is not None:
            if pyramid is None or len(pyramid) != len(self.fusions):
                raise InputError(f"expected {len(self.fusions)} saliency feature levels")

        shallow = self.intro(x)
        feat = shallow
        skips = []
        for i, (enc, down) in enumerate(zip(self.encoders, self.downs)):
            feat = enc(feat)
            if self.fusions is not None:
                feat = self.fusions[i](feat, pyramid[i])
            skips.append(feat)
            feat = down(feat)

        feat = self.middle(feat)

        for dec, up, skip in zip(self.decoders, self.ups, reversed(skips)):
            feat = dec(up(feat) + skip)

        return self.ending(feat) + self.shortcut(shallow)
