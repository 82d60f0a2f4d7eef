"""Run configuration: flat INI sections of `key = value` pairs.

Grammar: standard INI as parsed by configparser (no interpolation), sections
[vision], [qformer], [decoder], [train], [lora], [captioner], [router], [run].
A key written as `vision.patch_size` in documentation corresponds to
`patch_size` under `[vision]`. Unknown sections or keys are rejected. Flags
given on the command line override file values; the fully resolved config is
embedded into every output artifact.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .decoder import DecoderConfig
from .qformer import QFormerConfig
from .router import DEFAULT_ROUTER_PROMPT
from .training import LoraConfig, TrainConfig
from .vision import VisionConfig


class ConfigError(RuntimeError):
    pass


@dataclass
class CaptionerConfig:
    backend: str = "mock"
    url: str = ""
    k: int = 3

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("captioner.k must be >= 1")


@dataclass
class RouterConfig:
    prompt: str = DEFAULT_ROUTER_PROMPT


@dataclass
class RunConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    qformer: QFormerConfig = field(default_factory=QFormerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    captioner: CaptionerConfig = field(default_factory=CaptionerConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    seed: int = 0

    def to_json(self) -> dict:
        def section(obj) -> dict:
            out = {}
            for f in fields(obj):
                value = getattr(obj, f.name)
                out[f.name] = list(value) if isinstance(value, tuple) else value
            return out

        return {
            "vision": section(self.vision),
            "qformer": section(self.qformer),
            "decoder": section(self.decoder),
            "train": section(self.train),
            "lora": section(self.lora),
            "captioner": section(self.captioner),
            "router": section(self.router),
            "seed": self.seed,
        }


_SECTIONS = {
    "vision": "vision",
    "qformer": "qformer",
    "decoder": "decoder",
    "train": "train",
    "lora": "lora",
    "captioner": "captioner",
    "router": "router",
}


def _parse_value(raw: str, current) -> object:
    if isinstance(current, bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(item.strip() for item in raw.split(",") if item.strip())
    return raw


def load_config(path: str | Path | None = None) -> RunConfig:
    """Defaults, optionally overlaid with an INI file."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    seen: set[tuple[str, str]] = set()
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items("run"):
                if key != "seed":
                    raise ConfigError(f"{path}: unknown key run.{key}")
                cfg.seed = int(raw)
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        target = getattr(cfg, _SECTIONS[section])
        known = {f.name for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            try:
                value = _parse_value(raw, getattr(target, key))
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}") from exc
            setattr(target, key, value)
            seen.add((section, key))
    if ("train", "seed") not in seen:
        cfg.train.seed = cfg.seed
    if ("lora", "seed") not in seen:
        cfg.lora.seed = cfg.seed
    _validate(cfg, path)
    return cfg


def _validate(cfg: RunConfig, path: Path) -> None:
    """Re-run each section's __post_init__ so file values get the same checks
    as constructor arguments."""
    for name in ("vision", "qformer", "decoder", "train", "lora", "captioner"):
        section = getattr(cfg, name)
        try:
            section.__post_init__()
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid [{name}] settings: {exc}") from exc
    cfg.qformer.dim_visual = cfg.vision.dim
    if cfg.qformer.dim_out != cfg.decoder.dim:
        raise ConfigError(f"{path}: qformer.dim_out must equal decoder.dim")


def apply_seed(cfg: RunConfig, seed: int) -> None:
    """Propagate a command-line seed into every seeded component."""
    cfg.seed = seed
    cfg.train.seed = seed
    cfg.lora.seed = seed
