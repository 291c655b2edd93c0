"""Run configuration: nested dataclasses loaded from JSON with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "config_from_dict",
    "config_to_dict",
]


class ConfigError(ValueError):
    """Malformed configuration: unknown key, wrong type or invalid value."""


@dataclass
class DatasetSection:
    image_size: int = 16
    n_classes: int = 4
    per_class_count: int = 300
    val_per_class: int = 50
    noise_std: float = 0.05
    channels: int = 3
    jitter: int = 2
    fg_range: typing.List[float] = field(default_factory=lambda: [0.8, 1.0])
    bg_range: typing.List[float] = field(default_factory=lambda: [0.0, 0.15])
    glyph_scale: float = 0.3


@dataclass
class ClassifierSection:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 0.02
    optimizer: str = "adam"


@dataclass
class DenoiserSection:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.005
    hidden: int = 16


@dataclass
class ModelsSection:
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    min_clean_accuracy: float = 0.90
    min_attack_success: float = 0.95
    max_attempts: int = 3


@dataclass
class BadnetSection:
    patch_size: int = 3
    corner: str = "bottom-right"
    poison_fraction: float = 0.1


@dataclass
class InvisibleSection:
    epsilon: float = 24 / 255
    poison_fraction: float = 0.2


@dataclass
class PgdSection:
    epsilon: float = 0.05
    steps: int = 20
    step_size: typing.Optional[float] = None


@dataclass
class AttackSection:
    target_label: int = 0
    badnet: BadnetSection = field(default_factory=BadnetSection)
    invisible: InvisibleSection = field(default_factory=InvisibleSection)
    pgd: PgdSection = field(default_factory=PgdSection)


@dataclass
class SancdifiSection:
    T1: int = 300
    T2: int = 100
    n_masks: int = 2000
    d: float = 0.95
    r: int = 5
    cell_grid: int = 7
    keep_prob: float = 0.5
    baseline: float = 0.5
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    final_step_noise: bool = False


@dataclass
class ExperimentSection:
    replicates: int = 3
    n_eval_per_class: int = 15
    attacks: typing.List[str] = field(default_factory=lambda: ["badnet", "invisible", "pgd"])
    defenses: typing.List[str] = field(default_factory=lambda: ["none", "sancdifi", "sancdifi_no_phase2", "diffpure_30"])
    diffpure_fractions: typing.List[float] = field(default_factory=lambda: [0.1, 0.2, 0.3])
    phase2_steps: typing.List[int] = field(default_factory=lambda: [100, 150])
    ks: typing.List[int] = field(default_factory=lambda: [1, 3])


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    models: ModelsSection = field(default_factory=ModelsSection)
    attack: AttackSection = field(default_factory=AttackSection)
    sancdifi: SancdifiSection = field(default_factory=SancdifiSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    output_dir: typing.Optional[str] = None
    master_seed: int = 0


def _check_scalar(value, hint, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _check_scalar(value, args[0], path)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (item,) = typing.get_args(hint)
        return [_check_scalar(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, sub)
        else:
            kwargs[name] = _check_scalar(value, hint, sub)
    return cls(**kwargs)


def config_from_dict(data) -> RunConfig:
    return _build(RunConfig, data, "")


def config_to_dict(cfg: RunConfig):
    return dataclasses.asdict(cfg)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return config_from_dict(data)


def quickstart_config() -> RunConfig:
    """Small, fast configuration for smoke runs of the whole pipeline."""
    cfg = RunConfig()
    cfg.dataset.per_class_count = 60
    cfg.dataset.val_per_class = 10
    cfg.models.classifier.epochs = 15
    cfg.models.denoiser.epochs = 2
    cfg.models.max_attempts = 1
    cfg.models.min_clean_accuracy = 0.0
    cfg.models.min_attack_success = 0.0
    cfg.sancdifi.n_masks = 100
    cfg.sancdifi.T1 = 40
    cfg.sancdifi.T2 = 15
    cfg.experiment.replicates = 1
    cfg.experiment.n_eval_per_class = 2
    cfg.experiment.phase2_steps = [15, 25]
    return cfg
