"""Synthetic spacecraft scenes, bicubic degradation, arbitrary-scale training
samples and PNG folder datasets. Images here are float (H, W, C) numpy arrays
in [0, 1]."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .config import TrainConfig
from .errors import ConfigError, DatasetError, InputError

# --- synthetic scenes --------------------------------------------------------


@dataclass
class SynthSpec:
    size: int = 128
    channels: int = 1
    bodies: int = 1
    panel_pairs: int = 1
    antennas: int = 2
    body_intensity: tuple[float, float] = (0.55, 1.0)
    panel_intensity: tuple[float, float] = (0.35, 0.8)
    antenna_intensity: tuple[float, float] = (0.6, 1.0)
    noise_sigma: float = 0.01
    background: float = 0.0
    supersample: int = 4


def _rect_mask(yy, xx, cy, cx, length, width, angle):
    c, s = math.cos(angle), math.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2), u, v


def _segment_mask(yy, xx, p0, p1, half_width):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-12), 0, 1)
    return (yy - y0 - t * dy) ** 2 + (xx - x0 - t * dx) ** 2 <= half_width**2


def synth_spacecraft_image(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Black canvas with a bright body, paired solar panels and line antennas.

    Rendered at ``supersample`` x resolution and box-filtered down, so edges
    are anti-aliased. Components stay small enough that well over 40% of the
    canvas is background.
    """
    n = spec.size * spec.supersample
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n  # unit square
    canvas = np.full((n, n), spec.background, dtype=np.float64)

    for _ in range(spec.bodies):
        cy, cx = 0.5 + rng.uniform(-0.12, 0.12, size=2)
        length, width = rng.uniform(0.14, 0.3), rng.uniform(0.1, 0.22)
        angle = rng.uniform(0, math.pi)
        c, s = math.cos(angle), math.sin(angle)

        for _ in range(spec.panel_pairs):
            plen, pwid = rng.uniform(0.12, 0.26), rng.uniform(0.05, 0.1)
            level = rng.uniform(*spec.panel_intensity)
            cells = rng.integers(3, 7)
            gap = length / 2 + plen / 2 + rng.uniform(0.01, 0.03)
            for side in (-1, 1):
                pcx, pcy = cx + side * gap * c, cy + side * gap * s
                mask, u, _ = _rect_mask(yy, xx, pcy, pcx, plen, pwid, angle)
                # darker seams between solar cells
                seams = np.abs(((u / plen + 0.5) * cells) % 1 - 0.5) > 0.42
                canvas[mask] = np.where(seams[mask], 0.6 * level, level)
                boom = _segment_mask(yy, xx, (cy, cx), (pcy, pcx), 0.004)
                canvas[boom] = np.maximum(canvas[boom], 0.8 * level)

        mask, u, v = _rect_mask(yy, xx, cy, cx, length, width, angle)
        level = rng.uniform(*spec.body_intensity)
        shade = 0.85 + 0.15 * np.cos(2 * math.pi * u / length) * np.cos(math.pi * v / width)
        canvas[mask] = level * shade[mask]

        for _ in range(spec.antennas):
            theta = rng.uniform(0, 2 * math.pi)
            r0 = 0.5 * min(length, width)
            r1 = r0 + rng.uniform(0.06, 0.16)
            p0 = (cy + r0 * math.sin(theta), cx + r0 * math.cos(theta))
            p1 = (cy + r1 * math.sin(theta), cx + r1 * math.cos(theta))
            seg = _segment_mask(yy, xx, p0, p1, rng.uniform(0.003, 0.008))
            canvas[seg] = rng.uniform(*spec.antenna_intensity)

    ss = spec.supersample
    img = canvas.reshape(spec.size, ss, spec.size, ss).mean(axis=(1, 3))
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]
    if spec.channels == 3:
        img = np.repeat(img, 3, axis=-1)
    return img


# --- bicubic resampling ---------------------------------------------------------


def cubic_kernel(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1,
        (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def resize_weights(in_size: int, out_size: int, a: float = -0.5, antialias: bool = True) -> np.ndarray:
    """(out_size, in_size) interpolation matrix with pixel-centre alignment.

    When shrinking, the kernel is stretched by 1/scale (antialiasing).
    Out-of-range taps are clamped to the edge; each row sums to 1.
    """
    scale = out_size / in_size
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    centres = (np.arange(out_size) + 0.5) / scale - 0.5
    support = 2.0 * stretch
    first = np.floor(centres - support).astype(int) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centres[:, None] - idx) / stretch, a) / stretch
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_size, in_size))
    np.add.at(mat, (np.repeat(np.arange(out_size), taps), np.clip(idx, 0, in_size - 1).ravel()), w.ravel())
    return mat


def bicubic_resize(img: np.ndarray, h: int, w: int, antialias: bool = True) -> np.ndarray:
    if h < 1 or w < 1:
        raise InputError(f"target size must be positive, got {h}x{w}")
    squeeze = img.ndim == 2
    arr = img[..., None] if squeeze else img
    wy = resize_weights(arr.shape[0], h, antialias=antialias)
    wx = resize_weights(arr.shape[1], w, antialias=antialias)
    out = np.einsum("ih,hwc,jw->ijc", wy, arr.astype(np.float64), wx)
    out = out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32)
    return out[..., 0] if squeeze else out


# --- training samples -------------------------------------------------------------


@dataclass
class TrainingSample:
    lr: np.ndarray          # (p, p, C)
    coord: np.ndarray       # (Q, 2) HR pixel centres in [-1, 1]
    cell: np.ndarray        # (Q, 2)
    gt: np.ndarray          # (Q, C)
    index: np.ndarray       # (Q,) flat indices into the HR crop
    hr_size: int = 0
    origin: tuple[int, int] = (0, 0)
    scale: float = 1.0


def _grid_coords(n: int) -> np.ndarray:
    c = -1 + (2 * np.arange(n, dtype=np.float64) + 1) / n
    return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1).reshape(-1, 2)


def make_training_sample(hr: np.ndarray, scale_range=(1.0, 4.0), patch: int = 48,
                         rng: np.random.Generator | None = None, n_queries: int | None = None,
                         scale: float | None = None) -> TrainingSample:
    """Crop round(p*s)^2 from ``hr``, bicubic it down to p x p, and sample
    p^2 HR pixel centres as supervision."""
    rng = rng if rng is not None else np.random.default_rng()
    s_min, s_max = scale_range
    s = float(scale) if scale is not None else float(rng.uniform(s_min, s_max))
    size = int(math.floor(patch * s + 0.5))
    need = int(math.floor(patch * max(s_max, s) + 0.5))
    if hr.shape[0] < need or hr.shape[1] < need:
        raise InputError(f"HR image {hr.shape[:2]} smaller than the {need}x{need} crop needed")
    y0 = int(rng.integers(0, hr.shape[0] - size + 1))
    x0 = int(rng.integers(0, hr.shape[1] - size + 1))
    crop = hr[y0:y0 + size, x0:x0 + size]
    lr = bicubic_resize(crop, patch, patch)
    q = patch * patch if n_queries is None else n_queries
    index = np.sort(rng.choice(size * size, size=min(q, size * size), replace=False))
    coord = _grid_coords(size)[index].astype(np.float32)
    cell = np.full_like(coord, 2.0 / size)
    gt = crop.reshape(-1, crop.shape[-1])[index].astype(np.float32)
    return TrainingSample(np.clip(lr, 0, 1).astype(np.float32), coord, cell, gt, index, size, (y0, x0), s)


def collate(samples: list[TrainingSample], dtype=torch.float32) -> dict:
    def stack(key):
        return torch.from_numpy(np.stack([getattr(s, key) for s in samples])).to(dtype)

    return {
        "lr": stack("lr").permute(0, 3, 1, 2).contiguous(),
        "coord": stack("coord"),
        "cell": stack("cell"),
        "gt": stack("gt"),
    }


class SampleStream:
    """Deterministic batches: epoch e visits a seeded permutation of the
    training list ``repeat`` times; sample k of epoch e draws from its own
    seeded generator, so any step can be rebuilt without replaying earlier ones."""

    def __init__(self, images: list[np.ndarray], cfg: TrainConfig, seed: int):
        if not images:
            raise DatasetError("no training images")
        smallest = int(math.floor(cfg.patch_size * cfg.scale_min + 0.5)) ** 2
        if cfg.queries > smallest:
            raise ConfigError(f"train.queries={cfg.queries} exceeds the {smallest} HR pixels of the "
                              f"smallest crop (patch_size * scale_min)^2")
        self.images = images
        self.cfg = cfg
        self.seed = seed

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.images) * self.cfg.repeat / self.cfg.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch, 0xD47A])
        return np.concatenate([rng.permutation(len(self.images)) for _ in range(self.cfg.repeat)])

    def batch(self, epoch: int, b: int, dtype=torch.float32) -> dict:
        order = self.order(epoch)
        lo = b * self.cfg.batch_size
        samples = []
        for k in range(lo, min(lo + self.cfg.batch_size, len(order))):
            rng = np.random.default_rng([self.seed, epoch, k])
            samples.append(make_training_sample(
                self.images[order[k]], (self.cfg.scale_min, self.cfg.scale_max),
                self.cfg.patch_size, rng, n_queries=self.cfg.queries or None))
        return collate(samples, dtype)

    def order_hash(self, epochs: int) -> str:
        h = hashlib.sha256()
        for e in range(epochs):
            h.update(self.order(e).astype(np.int64).tobytes())
        return h.hexdigest()[:16]


# --- image I/O ---------------------------------------------------------------------


def read_image(path: str | Path, channels: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if channels == 1 or (channels is None and im.mode in ("L", "I;16", "I", "1", "LA")):
                im = im.convert("L")
            else:
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"{path}: cannot read image: {exc}") from exc
    return arr[..., None] if arr.ndim == 2 else arr


def write_image(path: str | Path, img) -> None:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
        if img.ndim == 4:
            img = img[0]
        img = img.transpose(1, 2, 0)
    arr = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    arr = np.floor(arr * 255 + 0.5).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


class ImageFolder:
    """Lazily loaded, lexicographically ordered image folder."""

    def __init__(self, root: str | Path, pattern: str = "*.png", channels: int | None = None):
        root = Path(root)
        if not root.is_dir():
            raise DatasetError(f"{root}: not a directory")
        self.root = root
        self.channels = channels
        self.files = sorted(p for p in root.glob(pattern) if p.is_file())
        if not self.files:
            raise DatasetError(f"{root}: no files match {pattern!r}")

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, i: int) -> np.ndarray:
        return read_image(self.files[i], self.channels)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_image_folder(path, pattern: str = "*.png", channels: int | None = None) -> ImageFolder:
    return ImageFolder(path, pattern, channels)


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu()[0].permute(1, 2, 0).numpy()
