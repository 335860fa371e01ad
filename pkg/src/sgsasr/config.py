"""Configuration dataclasses and the flat ``[section] key = value`` file format.

Values resolve in layers: dataclass defaults < profile < config file <
``--set section.key=value`` overrides. The resolved config is written
verbatim into every run directory.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError

FUSION_MODES = ("affem", "sum", "concat")
MODULATION_MODES = ("none", "scale", "shift", "both")
DECODER_KINDS = ("lmf", "liif")
SALIENCY_BACKENDS = ("luminance", "external")


@dataclass
class SaliencyConfig:
    backend: str = "luminance"
    k: float = 0.5
    model_path: str = ""


@dataclass
class EncoderConfig:
    base_width: int = 32
    enc_blocks: tuple[int, ...] = (2, 2, 4, 8)
    middle_blocks: int = 12
    dec_blocks: tuple[int, ...] = (2, 2, 2, 2)
    out_dim: int = 128
    ffn_expansion: int = 2
    dw_expansion: int = 2

    @property
    def levels(self) -> int:
        return len(self.enc_blocks)

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.levels)]


@dataclass
class AffemConfig:
    per_channel: bool = False


@dataclass
class DecoderConfig:
    kind: str = "lmf"
    render_width: int = 16
    K: int = 6
    latent_hidden: int = 128
    latent_layers: int = 2
    latent_out: int = 288
    use_cell: bool = True
    local_ensemble: bool = False
    feat_unfold: bool = False
    # only used by kind = liif
    liif_hidden: tuple[int, ...] = (256, 256, 256, 256)

    @property
    def modulation_dim(self) -> int:
        return 2 * self.K * self.render_width

    @property
    def compressed_dim(self) -> int:
        return self.latent_out - self.modulation_dim


@dataclass
class AblationConfig:
    use_scrrb: bool = True
    fusion: str = "affem"
    modulation: str = "both"


@dataclass
class ModelConfig:
    in_channels: int = 1
    out_channels: int = 1
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    affem: AffemConfig = field(default_factory=AffemConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "ModelConfig":
        enc, dec, abl = self.encoder, self.decoder, self.ablation
        if self.in_channels not in (1, 3) or self.out_channels < 1:
            raise ConfigError(f"unsupported channels in={self.in_channels} out={self.out_channels}")
        if len(enc.enc_blocks) != len(enc.dec_blocks):
            raise ConfigError("encoder.enc_blocks and encoder.dec_blocks must have equal length")
        if enc.base_width < 1 or enc.out_dim < 1 or enc.levels < 1:
            raise ConfigError("encoder widths must be positive and levels >= 1")
        if self.saliency.backend not in SALIENCY_BACKENDS:
            raise ConfigError(f"saliency.backend must be one of {SALIENCY_BACKENDS}")
        if self.saliency.k < 0:
            raise ConfigError("saliency.k must be >= 0")
        if abl.fusion not in FUSION_MODES:
            raise ConfigError(f"ablation.fusion must be one of {FUSION_MODES}")
        if abl.modulation not in MODULATION_MODES:
            raise ConfigError(f"ablation.modulation must be one of {MODULATION_MODES}")
        if dec.kind not in DECODER_KINDS:
            raise ConfigError(f"decoder.kind must be one of {DECODER_KINDS}")
        if dec.kind == "lmf" and (dec.K < 1 or dec.compressed_dim < 1):
            raise ConfigError(
                f"decoder.latent_out={dec.latent_out} must exceed 2*K*render_width="
                f"{dec.modulation_dim} (modulation pairs + compressed latent)"
            )
        return self


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 2e-4
    milestones: tuple[int, ...] = (50, 100, 150, 175)
    gamma: float = 0.5
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0
    patch_size: int = 48
    queries: int = 0            # HR pixels supervised per sample; 0 means patch_size**2
    scale_min: float = 1.0
    scale_max: float = 4.0
    repeat: int = 1
    val_every: int = 1
    val_scale: float = 4.0
    ckpt_every: int = 10


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0


# --- flat ini serialisation ---------------------------------------------

_SECTIONS = {
    "model": lambda rc: rc.model,
    "saliency": lambda rc: rc.model.saliency,
    "encoder": lambda rc: rc.model.encoder,
    "affem": lambda rc: rc.model.affem,
    "decoder": lambda rc: rc.model.decoder,
    "ablation": lambda rc: rc.model.ablation,
    "train": lambda rc: rc.train,
    "run": lambda rc: rc,
}
_MODEL_SECTIONS = ("model", "saliency", "encoder", "affem", "decoder", "ablation")


def _scalar_fields(obj):
    hints = typing.get_type_hints(type(obj))
    for f in dataclasses.fields(obj):
        if not dataclasses.is_dataclass(hints[f.name]):
            yield f.name, hints[f.name]


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typing.get_origin(typ) is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(inner(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {typ}") from None


def set_value(rc: RunConfig, dotted: str, raw: str) -> None:
    section, _, key = dotted.partition(".")
    if section not in _SECTIONS or not key:
        raise ConfigError(f"unknown config key {dotted!r}")
    target = _SECTIONS[section](rc)
    types = dict(_scalar_fields(target))
    if key not in types:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(target, key, _parse(raw, types[key], dotted))


def apply_ini(rc: RunConfig, text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_value(rc, f"{section}.{key}", raw)
    return rc


def to_ini(rc: RunConfig, sections=tuple(_SECTIONS)) -> str:
    out = io.StringIO()
    for section in sections:
        out.write(f"[{section}]\n")
        for name, _ in _scalar_fields(_SECTIONS[section](rc)):
            out.write(f"{name} = {_format(getattr(_SECTIONS[section](rc), name))}\n")
        out.write("\n")
    return out.getvalue()


def model_to_ini(cfg: ModelConfig) -> str:
    return to_ini(RunConfig(model=cfg), _MODEL_SECTIONS)


def model_from_ini(text: str) -> ModelConfig:
    return apply_ini(RunConfig(), text).model


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(model_to_ini(cfg).encode()).hexdigest()[:16]


def profile_names() -> list[str]:
    files = resources.files("sgsasr").joinpath("profiles").iterdir()
    return sorted(p.name[:-4] for p in files if p.name.endswith(".ini"))


def load_profile(rc: RunConfig, name: str) -> RunConfig:
    res = resources.files("sgsasr").joinpath("profiles", f"{name}.ini")
    if not res.is_file():
        raise ConfigError(f"unknown profile {name!r}; available: {', '.join(profile_names())}")
    return apply_ini(rc, res.read_text())


def resolve(profile: str | None = None, path: str | Path | None = None,
            overrides: typing.Iterable[str] = ()) -> RunConfig:
    rc = RunConfig()
    if profile:
        load_profile(rc, profile)
    if path:
        try:
            apply_ini(rc, Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        set_value(rc, key.strip(), value)
    rc.model.validate()
    return rc
