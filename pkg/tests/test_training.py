import numpy as np
import pytest

from sancdifi.attacks import make_badnet_trigger, poison_dataset
from sancdifi.core import ParameterError
from sancdifi.training import (
    TrainConfig, TrojanQualityError, train_classifier, train_trojan_classifier, trojan_quality,
)

CFG = TrainConfig(epochs=15, batch_size=16, learning_rate=0.02, seed=1)


def test_zero_poison_matches_clean_training(small_data):
    train, val = small_data
    trig = make_badnet_trigger(16)
    a = train_trojan_classifier(train, trig, TrainConfig(**{**CFG.__dict__, "poison_fraction": 0.0}), val)
    b = train_classifier(train, CFG)
    for k in a.params_:
        assert np.array_equal(a.params_[k], b.params_[k])


def test_full_poison_learns_only_the_trigger(small_data):
    train, val = small_data
    trig = make_badnet_trigger(16, target=2)
    cfg = TrainConfig(**{**CFG.__dict__, "poison_fraction": 1.0})
    model = train_trojan_classifier(train, trig, cfg)
    clean, asr = trojan_quality(model, val, trig)
    assert asr >= 0.99
    assert clean <= 0.4


def test_quality_gate_raises_after_attempts(small_data):
    train, val = small_data
    trig = make_badnet_trigger(16)
    cfg = TrainConfig(epochs=0, poison_fraction=0.1, max_attempts=2)
    with pytest.raises(TrojanQualityError) as info:
        train_trojan_classifier(train, trig, cfg, val)
    assert len(info.value.attempts) == 2


def test_trojan_quality_counts(small_data, small_classifier):
    _, val = small_data
    trig = make_badnet_trigger(16, target=0)
    clean, asr = trojan_quality(small_classifier, val, trig)
    poisoned = poison_dataset(val, trig, mode="all")
    assert asr == pytest.approx(np.mean(small_classifier.predict(poisoned.images) == 0))
    assert clean == pytest.approx(np.mean(small_classifier.predict(val.images) == val.labels))


def test_config_validation(small_data):
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ParameterError):
        TrainConfig(poison_fraction=2)
    with pytest.raises(ParameterError):
        train_trojan_classifier(small_data[0], make_badnet_trigger(16, target=9), CFG)
