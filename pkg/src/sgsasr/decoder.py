"""Arbitrary-scale decoders over a latent feature grid.

``LMFDecoder`` runs a latent MLP once per latent location to produce FiLM
modulations plus a compressed latent, then a narrow render MLP once per
output pixel. ``LIIFDecoder`` is the per-pixel full-width baseline used for
compute comparisons.

Coordinates live in [-1, 1]^2 with pixel centres at -1 + (2i + 1) / n;
``coord[..., 0]`` runs along rows (height), ``coord[..., 1]`` along columns.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DecoderConfig
from .errors import InputError


def make_coordinate_grid(h: int, w: int, flatten: bool = True, dtype=torch.float32) -> torch.Tensor:
    rows = -1 + (2 * torch.arange(h, dtype=torch.float64) + 1) / h
    cols = -1 + (2 * torch.arange(w, dtype=torch.float64) + 1) / w
    grid = torch.stack(torch.meshgrid(rows, cols, indexing="ij"), dim=-1).to(dtype)
    return grid.view(-1, 2) if flatten else grid


def make_cells(n: int, h_out: int, w_out: int, dtype=torch.float32) -> torch.Tensor:
    cell = torch.tensor([2.0 / h_out, 2.0 / w_out], dtype=dtype)
    return cell.expand(n, 2).clone()


def nearest_index(coord: torch.Tensor, h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Row/col index of the nearest latent centre; exact ties go to the smaller index."""
    r = torch.ceil((coord[..., 0].double() + 1) * h / 2) - 1
    c = torch.ceil((coord[..., 1].double() + 1) * w / 2) - 1
    return r.clamp_(0, h - 1).long(), c.clamp_(0, w - 1).long()


def _centres(ri: torch.Tensor, ci: torch.Tensor, h: int, w: int, dtype) -> torch.Tensor:
    return torch.stack([-1 + (2 * ri.double() + 1) / h, -1 + (2 * ci.double() + 1) / w], dim=-1).to(dtype)


def nearest_latent_lookup(feat: torch.Tensor, coord: torch.Tensor):
    """Latent vector, relative offset and flat index for each query.

    feat: (B, D, h, w); coord: (B, Q, 2). Returns z (B, Q, D), rel_coord
    (B, Q, 2) scaled by the grid size so one latent cell spans [-1, 1], and
    the flat index (B, Q).
    """
    h, w = feat.shape[-2:]
    ri, ci = nearest_index(coord, h, w)
    idx = ri * w + ci
    flat = feat.flatten(2).transpose(1, 2)
    z = torch.gather(flat, 1, idx.unsqueeze(-1).expand(-1, -1, flat.shape[-1]))
    rel = (coord - _centres(ri, ci, h, w, coord.dtype)) * coord.new_tensor([h, w])
    return z, rel, idx


def unfold_features(feat: torch.Tensor) -> torch.Tensor:
    b, c, h, w = feat.shape
    return F.unfold(feat, 3, padding=1).view(b, c * 9, h, w)


def modulated_layer(h: torch.Tensor, alpha: torch.Tensor | None, beta: torch.Tensor | None,
                    linear: nn.Linear) -> torch.Tensor:
    """linear(ReLU((1 + alpha) * h + beta)); None means that half is not injected."""
    if alpha is not None:
        h = (1 + alpha) * h
    if beta is not None:
        h = h + beta
    return linear(torch.relu(h))


class MLP(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: list[int]):
        super().__init__()
        layers = []
        last = in_dim
        for width in hidden:
            layers += [nn.Linear(last, width), nn.ReLU()]
            last = width
        layers.append(nn.Linear(last, out_dim))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class LMGB(nn.Module):
    """Latent MLP producing [alpha_1, beta_1, ..., alpha_K, beta_K | z_c]."""

    def __init__(self, in_dim: int, cfg: DecoderConfig, modulation: str = "both"):
        super().__init__()
        self.K = cfg.K
        self.width = cfg.render_width
        self.modulation = modulation
        self.mlp = MLP(in_dim, cfg.latent_out, [cfg.latent_hidden] * cfg.latent_layers)
        mask = torch.ones(cfg.latent_out)
        mod = mask[: cfg.modulation_dim].view(self.K, 2, self.width)
        if modulation in ("none", "shift"):
            mod[:, 0] = 0
        if modulation in ("none", "scale"):
            mod[:, 1] = 0
        self.register_buffer("out_mask", mask, persistent=False)

    @property
    def frozen_rows(self) -> torch.Tensor:
        """Indices of output rows that are disabled by the modulation mode."""
        return torch.nonzero(self.out_mask == 0).flatten()

    def zero_frozen(self) -> None:
        last = self.mlp.layers[-1]
        rows = self.frozen_rows
        with torch.no_grad():
            last.weight[rows] = 0
            last.bias[rows] = 0

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.mlp(z)
        if self.modulation != "both":
            out = out * self.out_mask.to(out.dtype)
        return out

    def split(self, out: torch.Tensor):
        """-> alphas (..., K, width), betas (..., K, width), z_c (..., D_c)."""
        mod = out[..., : 2 * self.K * self.width].unflatten(-1, (self.K, 2, self.width))
        return mod[..., 0, :], mod[..., 1, :], out[..., 2 * self.K * self.width:]


class RenderMLP(nn.Module):
    """K + 1 linear layers of width ``width`` with K modulated activations."""

    def __init__(self, in_dim: int, width: int, K: int, out_dim: int):
        super().__init__()
        self.K = K
        self.layers = nn.ModuleList(
            [nn.Linear(in_dim, width)]
            + [nn.Linear(width, width) for _ in range(K - 1)]
            + [nn.Linear(width, out_dim)]
        )

    def reset_parameters(self) -> None:
        # He init: the default scheme shrinks a narrow ReLU stack towards a constant
        for layer in self.layers:
            nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)

    def forward(self, x, alphas=None, betas=None):
        h = self.layers[0](x)
        for k in range(self.K):
            a = alphas[..., k, :] if alphas is not None else None
            b = betas[..., k, :] if betas is not None else None
            h = modulated_layer(h, a, b, self.layers[k + 1])
        return h


class _ImplicitDecoder(nn.Module):
    chunk_size = 65536

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.reset_counters()

    def reset_counters(self) -> None:
        self.latent_evals = 0
        self.render_evals = 0

    def _shifts(self):
        if self.cfg.local_ensemble:
            return [(-1, -1), (-1, 1), (1, -1), (1, 1)], 1e-6
        return [(0, 0)], 0.0

    def _ensemble(self, feat_hw, coord, cell, predict):
        """Runs ``predict(idx, rel, cell)`` per neighbour shift and area-blends results."""
        h, w = feat_hw
        scale = coord.new_tensor([h, w])
        rel_cell = cell * scale
        shifts, eps = self._shifts()
        preds, areas = [], []
        for vx, vy in shifts:
            shifted = coord.clone()
            if vx or vy:
                shifted[..., 0] += vx / h + eps
                shifted[..., 1] += vy / w + eps
                shifted.clamp_(-1 + 1e-6, 1 - 1e-6)
            ri, ci = nearest_index(shifted, h, w)
            rel = (coord - _centres(ri, ci, h, w, coord.dtype)) * scale
            preds.append(predict(ri * w + ci, rel, rel_cell))
            areas.append(torch.abs(rel[..., 0] * rel[..., 1]) + 1e-9)
        if len(preds) == 1:
            return preds[0]
        total = torch.stack(areas).sum(0)
        areas = areas[::-1]  # each prediction is weighted by the diagonally opposite area
        return sum(p * (a / total).unsqueeze(-1) for p, a in zip(preds, areas))

    def decode(self, feat: torch.Tensor, h_out: int, w_out: int, **kwargs) -> torch.Tensor:
        """Render a full (B, C, h_out, w_out) image from the latent grid."""
        if h_out < 1 or w_out < 1:
            raise InputError(f"output size must be positive, got {h_out}x{w_out}")
        b = feat.shape[0]
        coord = make_coordinate_grid(h_out, w_out, dtype=feat.dtype).to(feat.device)
        cell = make_cells(coord.shape[0], h_out, w_out, dtype=feat.dtype).to(feat.device)
        coord = coord.unsqueeze(0).expand(b, -1, -1)
        cell = cell.unsqueeze(0).expand(b, -1, -1)
        out = self.query(feat, coord, cell, **kwargs)
        return out.transpose(1, 2).reshape(b, -1, h_out, w_out)


class LMFDecoder(_ImplicitDecoder):
    def __init__(self, cfg: DecoderConfig, latent_dim: int, out_channels: int,
                 modulation: str = "both"):
        super().__init__(cfg)
        self.modulation = modulation
        in_dim = latent_dim * (9 if cfg.feat_unfold else 1)
        self.lmgb = LMGB(in_dim, cfg, modulation)
        render_in = cfg.compressed_dim + 2 + (2 if cfg.use_cell else 0)
        self.asrb = RenderMLP(render_in, cfg.render_width, cfg.K, out_channels)

    def post_init(self) -> None:
        self.lmgb.zero_frozen()

    def latent_table(self, feat: torch.Tensor) -> torch.Tensor:
        """LMGB output for every latent location: (B, h*w, latent_out)."""
        if self.cfg.feat_unfold:
            feat = unfold_features(feat)
        z = feat.flatten(2).transpose(1, 2)
        self.latent_evals += z.shape[0] * z.shape[1]
        return self.lmgb(z)

    def render(self, table_rows: torch.Tensor, rel: torch.Tensor, cell: torch.Tensor) -> torch.Tensor:
        alphas, betas, z_c = self.lmgb.split(table_rows)
        parts = [z_c, rel] + ([cell] if self.cfg.use_cell else [])
        self.render_evals += rel.shape[:-1].numel()
        if self.modulation == "none":
            alphas = betas = None
        return self.asrb(torch.cat(parts, dim=-1), alphas, betas)

    def query(self, feat: torch.Tensor, coord: torch.Tensor, cell: torch.Tensor,
              cache: bool = True) -> torch.Tensor:
        """Predict (B, Q, C) pixel values for continuous coordinates."""
        h, w = feat.shape[-2:]
        if cache:
            table = self.latent_table(feat)
        else:
            src = unfold_features(feat) if self.cfg.feat_unfold else feat
            src = src.flatten(2).transpose(1, 2)

        def predict(idx, rel, rel_cell):
            outs = []
            for s in range(0, idx.shape[1], self.chunk_size):
                sl = slice(s, s + self.chunk_size)
                if cache:
                    rows = _gather(table, idx[:, sl])
                else:
                    z = _gather(src, idx[:, sl])
                    self.latent_evals += z.shape[0] * z.shape[1]
                    rows = self.lmgb(z)
                outs.append(self.render(rows, rel[:, sl], rel_cell[:, sl]))
            return torch.cat(outs, dim=1)

        return self._ensemble((h, w), coord, cell, predict)


class LIIFDecoder(_ImplicitDecoder):
    """Per-pixel decoder: one full-width MLP over [z, rel_coord, cell] per query."""

    def __init__(self, cfg: DecoderConfig, latent_dim: int, out_channels: int):
        super().__init__(cfg)
        in_dim = latent_dim * (9 if cfg.feat_unfold else 1) + 2 + (2 if cfg.use_cell else 0)
        self.imnet = MLP(in_dim, out_channels, list(cfg.liif_hidden))

    def query(self, feat, coord, cell, cache: bool = True):
        src = unfold_features(feat) if self.cfg.feat_unfold else feat
        src = src.flatten(2).transpose(1, 2)

        def predict(idx, rel, rel_cell):
            outs = []
            for s in range(0, idx.shape[1], self.chunk_size):
                sl = slice(s, s + self.chunk_size)
                parts = [_gather(src, idx[:, sl]), rel[:, sl]]
                if self.cfg.use_cell:
                    parts.append(rel_cell[:, sl])
                self.render_evals += idx[:, sl].numel()
                outs.append(self.imnet(torch.cat(parts, dim=-1)))
            return torch.cat(outs, dim=1)

        return self._ensemble(feat.shape[-2:], coord, cell, predict)


def _gather(table: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(table, 1, idx.unsqueeze(-1).expand(-1, -1, table.shape[-1]))


def output_size(h: int, w: int, scale: float) -> tuple[int, int]:
    """round(h * s) x round(w * s), halves rounded up, never below 1."""
    if not scale > 0 or math.isinf(scale):
        raise InputError(f"scale must be a positive finite number, got {scale}")
    return max(1, int(math.floor(h * scale + 0.5))), max(1, int(math.floor(w * scale + 0.5)))
