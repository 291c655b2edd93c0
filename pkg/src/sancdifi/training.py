"""Training entry points for clean classifiers, backdoored classifiers and denoisers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .attacks import TriggerSpec, poison_dataset
from .core import ParameterError, derive_seed
from .datagen import LabeledDataset
from .models import ToyClassifier, ToyNoisePredictor

__all__ = [
    "TrainConfig",
    "TrojanQualityError",
    "train_classifier",
    "train_trojan_classifier",
    "train_noise_predictor",
    "trojan_quality",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0
    optimizer: str = "adam"
    poison_fraction: float = 0.1
    min_clean_accuracy: float = 0.90
    min_attack_success: float = 0.95
    max_attempts: int = 3

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be non-negative")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ParameterError("poison_fraction must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")


class TrojanQualityError(RuntimeError):
    """No attempt produced a backdoored model meeting the accuracy and ASR bars."""

    def __init__(self, message, attempts):
        super().__init__(message)
        self.attempts = attempts


def _classifier(cfg: TrainConfig, n_classes, seed):
    return ToyClassifier(n_classes=n_classes, epochs=cfg.epochs, batch_size=cfg.batch_size,
                         learning_rate=cfg.learning_rate, optimizer=cfg.optimizer, random_state=seed)


def train_classifier(data: LabeledDataset, cfg: TrainConfig) -> ToyClassifier:
    if len(data) == 0:
        raise ParameterError("cannot train on an empty dataset")
    return _classifier(cfg, data.n_classes, cfg.seed).fit(data.images, data.labels)


def trojan_quality(model, validation: LabeledDataset, trigger: TriggerSpec):
    """``(clean accuracy, attack success rate)`` as fractions on a validation set."""
    clean = float(np.mean(model.predict(validation.images) == validation.labels))
    poisoned = poison_dataset(validation, trigger, mode="all")
    asr = float(np.mean(model.predict(poisoned.images) == trigger.target_label)) if len(poisoned) else 0.0
    return clean, asr


def train_trojan_classifier(data: LabeledDataset, trigger: TriggerSpec, cfg: TrainConfig,
                            validation: LabeledDataset | None = None) -> ToyClassifier:
    """Train on a copy of ``data`` with a ``poison_fraction`` share triggered and relabelled.

    With ``validation`` given, the model must reach ``min_clean_accuracy`` and
    ``min_attack_success`` on it; otherwise training is repeated with a fresh
    derived seed, up to ``max_attempts`` times, before :class:`TrojanQualityError`.
    The first attempt uses ``cfg.seed`` unchanged, so ``poison_fraction=0``
    reproduces :func:`train_classifier`.
    """
    if trigger.target_label >= data.n_classes:
        raise ParameterError("trigger target label is not a valid class")
    attempts = []
    for attempt in range(max(cfg.max_attempts, 1)):
        seed = cfg.seed if attempt == 0 else derive_seed(cfg.seed, "trojan/retry", attempt)
        poisoned = poison_dataset(data, trigger, cfg.poison_fraction, seed=seed)
        model = train_classifier(poisoned, replace(cfg, seed=seed))
        if validation is None or cfg.poison_fraction == 0:
            return model
        clean, asr = trojan_quality(model, validation, trigger)
        attempts.append({"seed": seed, "clean_accuracy": clean, "attack_success": asr})
        log.info("trojan attempt %d: clean=%.3f asr=%.3f", attempt, clean, asr)
        if clean >= cfg.min_clean_accuracy and asr >= cfg.min_attack_success:
            model.trojan_attempts_ = attempts
            return model
    raise TrojanQualityError(f"backdoored model below quality bar after {len(attempts)} attempts", attempts)


def train_noise_predictor(data: LabeledDataset, cfg: TrainConfig, T=1000, beta_start=1e-4, beta_end=0.02,
                          hidden=16) -> ToyNoisePredictor:
    if len(data) == 0:
        raise ParameterError("cannot train on an empty dataset")
    model = ToyNoisePredictor(hidden=hidden, T=T, beta_start=beta_start, beta_end=beta_end, epochs=cfg.epochs,
                              batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                              optimizer=cfg.optimizer, random_state=cfg.seed)
    if cfg.epochs == 0:
        return model.init_params(data.images.shape[3])
    return model.fit(data.images)
