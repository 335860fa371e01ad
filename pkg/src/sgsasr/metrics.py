"""PSNR, SSIM, metric reports and an analytic FLOPs ledger."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .config import ModelConfig
from .decoder import output_size
from .errors import InputError

SSIM_K1, SSIM_K2 = 0.01, 0.03


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE); identical inputs give ``math.inf``."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray, data_range: float) -> float:
    r = len(win) // 2

    def filt(x):
        x = correlate1d(correlate1d(x, win, axis=0, mode="reflect"), win, axis=1, mode="reflect")
        return x[r:x.shape[0] - r, r:x.shape[1] - r]  # only windows fully inside the image

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all 11x11 Gaussian windows; channels are averaged."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3 or min(a.shape[:2]) < win_size:
        raise InputError(f"SSIM needs H, W >= {win_size}, got {a.shape}")
    win = gaussian_window(win_size, sigma)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win, data_range) for c in range(a.shape[-1])]))


@dataclass
class MetricReport:
    per_image: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim_val: float) -> None:
        self.per_image.append((name, psnr_db, ssim_val))

    @property
    def psnr_db(self) -> float:
        finite = [p for _, p, _ in self.per_image if math.isfinite(p)]
        return float(np.mean(finite)) if finite else math.inf

    @property
    def infinite_count(self) -> int:
        return sum(1 for _, p, _ in self.per_image if not math.isfinite(p))

    @property
    def ssim(self) -> float:
        return float(np.mean([s for _, _, s in self.per_image])) if self.per_image else math.nan

    def summary(self) -> dict:
        return {"psnr_db": self.psnr_db, "ssim": self.ssim, "images": len(self.per_image),
                "psnr_inf": self.infinite_count}


# --- FLOPs ------------------------------------------------------------------------
# Convention: a multiply-accumulate is 2 FLOPs (conv / linear biases are not
# counted); every other elementwise op or activation is 1 FLOP per element.
LN_OPS_PER_ELEMENT = 7     # mean, centre, square, var, divide, scale, shift
LN_OPS_PER_PIXEL = 2       # eps add and sqrt of the per-pixel variance
LOOKUP_OPS = 10            # nearest-index, centre and relative-offset arithmetic per query


@dataclass
class FlopEntry:
    stage: str     # "encoder" | "decoder"
    name: str
    kind: str      # "conv" | "linear" | "elementwise"
    flops: int


class _Ledger:
    def __init__(self):
        self.entries: list[FlopEntry] = []

    def add(self, stage, name, kind, flops):
        self.entries.append(FlopEntry(stage, name, kind, int(flops)))

    def conv(self, stage, name, cin, cout, k, n_out, groups=1):
        self.add(stage, name, "conv", 2 * (cin // groups) * k * k * cout * n_out)

    def linear(self, stage, name, fin, fout, rows):
        self.add(stage, name, "linear", 2 * fin * fout * rows)

    def ew(self, stage, name, count):
        self.add(stage, name, "elementwise", count)


def _naf_block(led: _Ledger, name: str, c: int, n: int, cfg) -> None:
    dw, ffn = c * cfg.dw_expansion, c * cfg.ffn_expansion
    s = "encoder"
    led.ew(s, f"{name}.norm1", LN_OPS_PER_ELEMENT * c * n + LN_OPS_PER_PIXEL * n)
    led.conv(s, f"{name}.conv1", c, dw, 1, n)
    led.conv(s, f"{name}.conv2", dw, dw, 3, n, groups=dw)
    led.ew(s, f"{name}.sg1", dw // 2 * n)
    led.ew(s, f"{name}.sca.pool", dw // 2 * n)
    led.conv(s, f"{name}.sca.conv", dw // 2, dw // 2, 1, 1)
    led.ew(s, f"{name}.sca.mul", dw // 2 * n)
    led.conv(s, f"{name}.conv3", dw // 2, c, 1, n)
    led.ew(s, f"{name}.res1", c * n)
    led.ew(s, f"{name}.norm2", LN_OPS_PER_ELEMENT * c * n + LN_OPS_PER_PIXEL * n)
    led.conv(s, f"{name}.conv4", c, ffn, 1, n)
    led.ew(s, f"{name}.sg2", ffn // 2 * n)
    led.conv(s, f"{name}.conv5", ffn // 2, c, 1, n)
    led.ew(s, f"{name}.res2", c * n)


def _mlp(led: _Ledger, name: str, dims: list[int], rows: int) -> None:
    for i, (fin, fout) in enumerate(zip(dims[:-1], dims[1:])):
        led.linear("decoder", f"{name}.{i}", fin, fout, rows)
        if i < len(dims) - 2:
            led.ew("decoder", f"{name}.{i}.relu", fout * rows)


def flop_ledger(cfg: ModelConfig, lr_hw: tuple[int, int], scale: float) -> list[FlopEntry]:
    """Per-layer FLOPs of one forward pass at LR size ``lr_hw`` and ``scale``.

    The encoder runs on the input padded to a multiple of 2^levels; the frozen
    saliency detector itself is not counted.
    """
    enc, dec, abl = cfg.encoder, cfg.decoder, cfg.ablation
    h, w = lr_hw
    m = 2 ** enc.levels
    hp, wp = -(-h // m) * m, -(-w // m) * m
    n = [hp * wp // 4**i for i in range(enc.levels + 1)]
    widths = enc.widths
    led = _Ledger()

    if abl.use_scrrb:
        led.conv("encoder", "pyramid.head", 1, widths[0], 3, n[0])
        for i in range(1, enc.levels):
            led.conv("encoder", f"pyramid.down{i}", widths[i - 1], widths[i], 3, n[i])

    led.conv("encoder", "intro", cfg.in_channels, enc.base_width, 3, n[0])
    for i, c in enumerate(widths):
        for j in range(enc.enc_blocks[i]):
            _naf_block(led, f"enc{i}.{j}", c, n[i], enc)
        if abl.use_scrrb:
            if abl.fusion == "affem":
                led.ew("encoder", f"fuse{i}", 3 * c * n[i])
            elif abl.fusion == "sum":
                led.ew("encoder", f"fuse{i}", c * n[i])
            else:
                led.conv("encoder", f"fuse{i}", 2 * c, c, 1, n[i])
        led.conv("encoder", f"down{i}", c, 2 * c, 2, n[i + 1])
    for j in range(enc.middle_blocks):
        _naf_block(led, f"mid.{j}", 2 * widths[-1], n[-1], enc)
    for i in reversed(range(enc.levels)):
        c = widths[i]
        led.conv("encoder", f"up{i}", 2 * c, 4 * c, 1, n[i + 1])
        led.ew("encoder", f"skip{i}", c * n[i])
        for j in range(enc.dec_blocks[enc.levels - 1 - i]):
            _naf_block(led, f"dec{i}.{j}", c, n[i], enc)
    led.conv("encoder", "ending", enc.base_width, enc.out_dim, 3, n[0])
    led.conv("encoder", "shortcut", enc.base_width, enc.out_dim, 1, n[0])
    led.ew("encoder", "residual", enc.out_dim * n[0])

    h_out, w_out = output_size(h, w, scale)
    pixels = h_out * w_out
    ens = 4 if dec.local_ensemble else 1
    queries = pixels * ens
    latent_in = enc.out_dim * (9 if dec.feat_unfold else 1)
    coord_in = 2 + (2 if dec.use_cell else 0)
    led.ew("decoder", "lookup", LOOKUP_OPS * queries)

    if dec.kind == "liif":
        _mlp(led, "imnet", [latent_in + coord_in, *dec.liif_hidden, cfg.out_channels], queries)
    else:
        latents = h * w
        _mlp(led, "lmgb", [latent_in] + [dec.latent_hidden] * dec.latent_layers + [dec.latent_out], latents)
        if abl.modulation != "both":
            led.ew("decoder", "lmgb.mask", dec.latent_out * latents)
        r = dec.render_width
        film = {"both": 3, "scale": 2, "shift": 1, "none": 0}[abl.modulation]
        led.linear("decoder", "asrb.0", dec.compressed_dim + coord_in, r, queries)
        for k in range(dec.K):
            led.ew("decoder", f"asrb.film{k}", film * r * queries)
            led.ew("decoder", f"asrb.relu{k}", r * queries)
            led.linear("decoder", f"asrb.{k + 1}", r, cfg.out_channels if k == dec.K - 1 else r, queries)
    if ens > 1:
        led.ew("decoder", "ensemble", (3 + 2 * cfg.out_channels) * queries)
    return led.entries


def count_flops(cfg: ModelConfig, lr_hw: tuple[int, int], scale: float, stage: str | None = None) -> int:
    return sum(e.flops for e in flop_ledger(cfg, lr_hw, scale) if stage is None or e.stage == stage)


def liif_baseline_config(cfg: ModelConfig) -> ModelConfig:
    """Same encoder, per-pixel LIIF decoder with its usual unfold + ensemble + cell."""
    out = copy.deepcopy(cfg)
    out.decoder.kind = "liif"
    out.decoder.feat_unfold = True
    out.decoder.local_ensemble = True
    out.decoder.use_cell = True
    return out
