"""Experiment configuration: defaults, presets, and the key = value file format.

A config file uses sections [experiment], [model], [training], [data] with
plain ``key = value`` lines.  Unknown keys are rejected so typos surface
as diagnostics instead of silently falling back to defaults.  Every run
serializes its fully-resolved config next to the results.
"""

import configparser
import io
from dataclasses import dataclass, fields, replace

from .data import SkewSpec, default_skew
from .vit import ViTConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


STRATEGIES = (
    "local_bt",
    "local_g",
    "fedavg",
    "fedavg_pers",
    "fedprox",
    "fedproto",
    "feddistill",
    "fedevprompt",
    "kd_uncertainty",
    "kd_random",
    "fedavg_b",
    "fedavg_bt",
    "fedavg_bt_kd",
    "fedavg_g",
    "fedavg_g_kd",
)


@dataclass(frozen=True)
class ExperimentConfig:
    # experiment
    strategy: str = "fedevprompt"
    num_rounds: int = 5
    epochs_per_round: int = 15
    seeds: tuple = (0,)
    out_dir: str = "results"
    # model
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    num_heads: int = 6
    num_layers: int = 12
    prompt_len: int = 50
    split_layer: int = 3
    num_classes: int = 2
    channels: int = 3
    backbone_seed: int = 11
    backbone_weights: str = ""
    # training
    lambda_kd: float = 1e-6
    mu1: float = 2.5e-4
    mu2: float = 5e-4
    weight_decay: float = 1e-2
    buffer_capacity: int = 5
    batch_size: int = 128
    prox_mu: float = 0.01
    proto_beta: float = 1.0
    distill_gamma: float = 0.1
    fedavg_share_head: bool = True
    # data
    source: str = "external"
    data_path: str = ""
    client_sizes: tuple = (3000, 600, 900, 600, 450, 450)
    class_proportions: tuple = (
        (0.20, 0.80),
        (0.32, 0.68),
        (0.44, 0.56),
        (0.56, 0.44),
        (0.68, 0.32),
        (0.80, 0.20),
    )
    separability: float = 1.0
    noise: float = 0.15

    def vit_config(self) -> ViTConfig:
        return ViTConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            num_layers=self.num_layers,
            prompt_len=self.prompt_len,
            split_layer=self.split_layer,
            num_classes=self.num_classes,
            channels=self.channels,
        )

    def skew_spec(self) -> SkewSpec:
        return SkewSpec(
            client_sizes=self.client_sizes,
            class_proportions=self.class_proportions,
            separability=self.separability,
            noise=self.noise,
        )

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"strategy: unknown value {self.strategy!r}; choose from {', '.join(STRATEGIES)}"
            )
        if self.num_rounds < 1:
            raise ConfigError(f"num_rounds: must be positive, got {self.num_rounds}")
        if self.epochs_per_round < 1:
            raise ConfigError(f"epochs_per_round: must be positive, got {self.epochs_per_round}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")
        if self.lambda_kd < 0:
            raise ConfigError(f"lambda_kd: must be non-negative, got {self.lambda_kd}")
        if self.mu1 <= 0 or self.mu2 <= 0:
            raise ConfigError(f"mu1/mu2: learning rates must be positive, got {self.mu1}, {self.mu2}")
        if self.mu1 >= self.mu2:
            raise ConfigError(
                f"mu1: must stay below mu2 (shallow prompts move slower), got {self.mu1} >= {self.mu2}"
            )
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be non-negative, got {self.weight_decay}")
        if self.buffer_capacity < 1:
            raise ConfigError(f"buffer_capacity: must be positive, got {self.buffer_capacity}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be positive, got {self.batch_size}")
        if self.prox_mu <= 0:
            raise ConfigError(f"prox_mu: must be positive, got {self.prox_mu}")
        if self.source not in ("synthetic", "external"):
            raise ConfigError(f"source: must be 'synthetic' or 'external', got {self.source!r}")
        if self.source == "external" and not self.data_path:
            raise ConfigError("data_path: required when source = external")
        try:
            self.vit_config()
        except Exception as e:
            raise ConfigError(str(e)) from None
        if self.source == "synthetic":
            try:
                self.skew_spec()
            except Exception as e:
                raise ConfigError(str(e)) from None
        return self


def paper_config() -> ExperimentConfig:
    """Full-scale configuration; needs external data and backbone weights."""
    return ExperimentConfig(source="external")


def desk_config() -> ExperimentConfig:
    """Tiny model on synthetic data; minutes per run on one core."""
    return ExperimentConfig(
        image_size=16,
        patch_size=4,
        embed_dim=32,
        num_heads=2,
        num_layers=4,
        prompt_len=8,
        split_layer=1,
        num_classes=2,
        channels=1,
        lambda_kd=0.5,
        mu1=0.05,
        mu2=0.1,
        source="synthetic",
        separability=3.0,
    )


PRESETS = {"desk": desk_config, "paper": paper_config}

_SECTIONS = {
    "experiment": ("strategy", "num_rounds", "epochs_per_round", "seeds", "out_dir"),
    "model": ("image_size", "patch_size", "embed_dim", "num_heads", "num_layers",
              "prompt_len", "split_layer", "num_classes", "channels",
              "backbone_seed", "backbone_weights"),
    "training": ("lambda_kd", "mu1", "mu2", "weight_decay", "buffer_capacity",
                 "batch_size", "prox_mu", "proto_beta", "distill_gamma",
                 "fedavg_share_head"),
    "data": ("source", "data_path", "client_sizes", "class_proportions",
             "separability", "noise"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, text: str):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    try:
        if name == "seeds":
            return tuple(int(v) for v in text.replace(",", " ").split())
        if name == "client_sizes":
            return tuple(int(v) for v in text.replace(",", " ").split())
        if name == "class_proportions":
            rows = [r for r in text.split(";") if r.strip()]
            return tuple(tuple(float(v) for v in r.replace(",", " ").split()) for r in rows)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is bool:
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        return text
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from None


def load_config(path, base: ExperimentConfig = None) -> ExperimentConfig:
    """Overlay a key = value file on top of ``base`` (paper defaults if None)."""
    cfg = base if base is not None else ExperimentConfig()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e.strerror}") from None
    except configparser.Error as e:
        raise ConfigError(f"config: {e}") from None
    overrides = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"config: unknown section [{section}] in {path}")
        allowed = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"{section}.{key}: unknown key in {path}")
            overrides[key] = _parse_value(key, raw)
    return replace(cfg, **overrides)


def _format_value(name: str, value) -> str:
    if name == "class_proportions":
        return "; ".join(" ".join(f"{p:.17g}" for p in row) for row in value)
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def dump_config(cfg: ExperimentConfig, stream=None) -> str:
    """Serialize in the same file format, deterministic field order."""
    out = io.StringIO()
    for section, names in _SECTIONS.items():
        out.write(f"[{section}]\n")
        for name in names:
            out.write(f"{name} = {_format_value(name, getattr(cfg, name))}\n")
        out.write("\n")
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text
