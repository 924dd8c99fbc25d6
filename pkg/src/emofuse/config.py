"""Run configuration: package defaults, one TOML/JSON file, flag overrides.

The resolved configuration hashes to a stable identifier that every output
(results JSON, checkpoints, feature metadata) embeds next to the seed, so any
artifact can be traced back to the exact settings that produced it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError, ParameterError
from .model import FusionModelConfig
from .nn import CatConfig, ConvBlockConfig
from .ssrl import SsrlConfig
from .train import TrainConfig


@dataclass(frozen=True)
class CorpusSpec:
    """Synthetic corpus parameters for runs without a manifest."""
    n_speakers: int = 5
    n_per_class: int = 4
    recipe_set: str = "standard"
    seed: int = 100

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ParameterError(f"n_speakers must be >= 2, got {self.n_speakers}")
        if self.n_per_class < 1:
            raise ParameterError(f"n_per_class must be >= 1, got {self.n_per_class}")


@dataclass(frozen=True)
class PretrainSpec:
    epochs: int = 8
    lr: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"pretrain epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ParameterError(f"pretrain lr must be > 0, got {self.lr}")


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    encoder: SsrlConfig = field(default_factory=lambda: SsrlConfig(
        n_layers=2, embed_dim=24, n_clusters=12, n_heads=2, ff_dim=48,
        dropout_p=0.0, input_dim=39, selected_layers=[0, 2]))
    model: FusionModelConfig = field(default_factory=lambda: FusionModelConfig(
        cat=CatConfig(model_dim=16, n_heads=2, ff_dim=24, dropout_p=0.05),
        conv=ConvBlockConfig(kernel=(8, 12), stride=(4, 3), out_channels=4),
        ssrl_dim=24, ssrl_layer_taps=[0, 2], ssrl_n_layers=2,
        bilstm_hidden=8, pooled_dim=16, n_classes=4, mfcc_pool_window=8,
        prosody_hidden=(32, 16)))
    trainer: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)

    def __post_init__(self):
        if self.model.ssrl_dim != self.encoder.embed_dim:
            raise ConfigError(
                f"model.ssrl_dim {self.model.ssrl_dim} != encoder.embed_dim "
                f"{self.encoder.embed_dim}")
        if self.model.ssrl_n_layers != self.encoder.n_layers:
            raise ConfigError(
                f"model.ssrl_n_layers {self.model.ssrl_n_layers} != encoder.n_layers "
                f"{self.encoder.n_layers}")
        if self.encoder.front_end == "mfcc" \
                and self.encoder.input_dim != self.model.mfcc_dim:
            raise ConfigError(
                f"encoder.input_dim {self.encoder.input_dim} != model.mfcc_dim "
                f"{self.model.mfcc_dim}")


def default_run_config() -> RunConfig:
    return RunConfig()


def run_config_to_dict(cfg: RunConfig) -> dict:
    """Plain nested dict with JSON-friendly values (tuples become lists)."""
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    return plain({
        "seed": cfg.seed,
        "corpus": asdict(cfg.corpus),
        "encoder": asdict(cfg.encoder),
        "model": cfg.model.to_dict(),
        "trainer": asdict(cfg.trainer),
        "pretrain": asdict(cfg.pretrain),
    })


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(run_config_to_dict(cfg), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _deep_merge(base: dict, patch: dict, path: str = "") -> None:
    for key, value in patch.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be a table")
            _deep_merge(base[key], value, here)
        else:
            base[key] = value


def _apply_override(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def _build(tree: dict) -> RunConfig:
    return RunConfig(
        seed=tree["seed"],
        corpus=CorpusSpec(**tree["corpus"]),
        encoder=SsrlConfig(**tree["encoder"]),
        model=FusionModelConfig.from_dict(tree["model"]),
        trainer=TrainConfig(**tree["trainer"]),
        pretrain=PretrainSpec(**tree["pretrain"]),
    )


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults <- config file <- dotted-key overrides, then validate.

    The file may be TOML or JSON (chosen by extension). Any key that does not
    exist in the defaults is rejected rather than silently ignored.
    """
    tree = run_config_to_dict(default_run_config())
    if path is not None:
        path = Path(path)
        if path.suffix == ".toml":
            with path.open("rb") as fh:
                loaded = tomllib.load(fh)
        elif path.suffix == ".json":
            loaded = json.loads(path.read_text())
        else:
            raise ConfigError(f"config file must be .toml or .json, got {path.name}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a table")
        _deep_merge(tree, loaded)
    for dotted, value in (overrides or {}).items():
        _apply_override(tree, dotted, value)
    try:
        return _build(tree)
    except TypeError as exc:  # wrong field spelling inside a section
        raise ConfigError(f"bad config structure: {exc}") from exc
