"""Run configuration: INI sections [data], [model], [loss], [optimizer], [run].

A config may name a ``preset`` in [run]; the preset supplies every value and
the file overrides individual keys. The resolved configuration is what gets
snapshotted next to every run artifact.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data.sample import GridConfig
from .losses import REG_KINDS, LossWeights
from .model import DecoderConfig, EncoderConfig, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    path: str = ""
    mode: str = "cropped"  # full | cropped
    sax_full: tuple = (64, 64, 12)
    sax_crop: tuple = (40, 40, 12)
    lax: tuple = (96, 96)
    augment: bool = True
    workers: int = 1


@dataclass(frozen=True)
class ModelSection:
    mode: str = "multi_view"
    channels_3d: tuple = (8, 16, 16, 32, 32, 64)
    channels_2d: tuple = (16, 32, 32, 64, 64, 128)
    latent_sax: int = 32
    latent_lax: int = 8
    decoder_channels: tuple = (32, 32, 16, 16, 8)
    K: int = 6
    levels: int = 4


@dataclass(frozen=True)
class LossSection:
    lambda_kl: float = 1e-5
    lambda_ds: float = 1.0
    reg_kind: str = "laplacian"
    lambda_reg: float = 0.01
    lambda_lap: float = 0.01


@dataclass(frozen=True)
class OptimizerSection:
    lr: float = 1e-4
    decay: float = 0.99
    weight_decay: float = 1e-5
    epochs: int = 50
    batch_size: int = 4


@dataclass(frozen=True)
class RunSection:
    preset: str = "phantom-small"
    seed: int = 0
    out: str = "runs/default"
    max_steps: int = 0  # 0: no limit (otherwise stop after this many optimizer steps)
    val_every: int = 0  # steps between validation passes; 0 = once per epoch
    subjects: int = 200  # dataset size the preset expects when generating
    keep_checkpoints: int = 0  # most recent epoch checkpoints kept on disk; 0 keeps all


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    run: RunSection = field(default_factory=RunSection)

    # ---------------------------------------------------------- derived objects

    def grid(self) -> GridConfig:
        return GridConfig(tuple(self.data.sax_full), tuple(self.data.sax_crop), tuple(self.data.lax))

    def model_config(self) -> ModelConfig:
        m = self.model
        enc = EncoderConfig(
            blocks=len(m.channels_3d), channels_3d=tuple(m.channels_3d), channels_2d=tuple(m.channels_2d),
            latent_sax=m.latent_sax, latent_lax=m.latent_lax,
            sax_shape=tuple(self.grid().sax_shape(self.data.mode)), lax_shape=tuple(self.data.lax),
        )
        return ModelConfig(m.mode, enc, DecoderConfig(tuple(m.decoder_channels), m.K))

    def loss_weights(self) -> LossWeights:
        lo = self.loss
        return LossWeights(lo.lambda_kl, lo.lambda_ds, lo.reg_kind, lo.lambda_reg, lo.lambda_lap)

    # ---------------------------------------------------------- serialisation

    def to_dict(self) -> dict:
        return {k: {kk: list(vv) if isinstance(vv, tuple) else vv for kk, vv in v.items()} for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for name, section in SECTIONS.items():
            current = getattr(cfg, name)
            values = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get(name, {}).items()}
            unknown = set(values) - {f.name for f in fields(section)}
            if unknown:
                raise ConfigError(f"[{name}] has no key(s) {sorted(unknown)}")
            cfg = replace(cfg, **{name: replace(current, **values)})
        cfg.validate()
        return cfg

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for k, v in values.items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)

    def model_hash(self) -> str:
        """Identifies everything a checkpoint's parameters depend on."""
        d = self.to_dict()
        key = {"model": d["model"], "mode": d["data"]["mode"], "grid": [d["data"]["sax_full"], d["data"]["sax_crop"], d["data"]["lax"]]}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        if self.data.mode not in ("full", "cropped"):
            raise ConfigError(f"[data] mode must be full or cropped, got {self.data.mode!r}")
        if self.model.mode not in ("single_view", "multi_view"):
            raise ConfigError(f"[model] mode must be single_view or multi_view, got {self.model.mode!r}")
        if self.loss.reg_kind not in REG_KINDS:
            raise ConfigError(f"[loss] reg_kind must be one of {REG_KINDS}, got {self.loss.reg_kind!r}")
        if len(self.model.decoder_channels) != self.model.levels + 1:
            raise ConfigError(f"[model] decoder_channels needs {self.model.levels + 1} entries")
        if len(self.model.channels_3d) != len(self.model.channels_2d):
            raise ConfigError("[model] channels_3d and channels_2d must have the same length")
        for name in ("epochs", "batch_size"):
            if getattr(self.optimizer, name) < 1:
                raise ConfigError(f"[optimizer] {name} must be >= 1")
        if self.optimizer.lr <= 0 or not 0 < self.optimizer.decay <= 1:
            raise ConfigError("[optimizer] lr must be > 0 and decay in (0, 1]")
        try:
            self.loss_weights()
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _format(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


PRESETS: dict[str, RunConfig] = {
    # desk-scale defaults
    "phantom-small": RunConfig(),
    # same images at a quarter of the encoder width and a 64x64 LAX grid; used by the trend experiments
    "phantom-fast": RunConfig(
        data=DataSection(lax=(64, 64)),
        model=ModelSection(channels_3d=(4, 8, 8, 16, 16, 32), channels_2d=(4, 8, 8, 16, 16, 32),
                           decoder_channels=(16, 16, 16, 8, 8)),
        # 50 epochs here are a few thousand Adam steps; at 1e-4 the decoder has not
        # even learned the mean shape by the end, so this preset uses a ten times larger step
        optimizer=OptimizerSection(lr=1e-3),
        run=RunSection(preset="phantom-fast"),
    ),
    # clinical image sizes; needs data the repository cannot ship
    "full-scale": RunConfig(
        data=DataSection(sax_full=(210, 210, 16), sax_crop=(100, 100, 16), lax=(224, 224)),
        optimizer=OptimizerSection(epochs=600),
        run=RunSection(preset="full-scale"),
    ),
}


def _parse(value: str, like):
    value = value.strip()
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(x) for x in value.replace(",", " ").split())
    return value


SECTIONS = {"data": DataSection, "model": ModelSection, "loss": LossSection, "optimizer": OptimizerSection, "run": RunSection}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive (``K``)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    preset = cp.get("run", "preset", fallback="phantom-small")
    if preset not in PRESETS:
        raise ConfigError(f"{source}: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]
    for name, cls in SECTIONS.items():
        if not cp.has_section(name):
            continue
        current = getattr(cfg, name)
        valid = {f.name for f in fields(cls)}
        updates = {}
        for key, raw in cp.items(name):
            if key not in valid:
                raise ConfigError(f"{source}: [{name}] has no key {key!r}")
            try:
                updates[key] = _parse(raw, getattr(current, key))
            except ValueError as exc:
                raise ConfigError(f"{source}: [{name}] {key}: {exc}") from exc
        cfg = replace(cfg, **{name: replace(current, **updates)})
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(), str(p))


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """``with_overrides(cfg, loss={"lambda_reg": 1e-3})``."""
    for name, values in sections.items():
        cfg = replace(cfg, **{name: replace(getattr(cfg, name), **values)})
    cfg.validate()
    return cfg
