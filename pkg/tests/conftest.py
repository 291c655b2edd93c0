import numpy as np
import pytest

from sancdifi.datagen import ShapeDatasetSpec, train_val_split
from sancdifi.models import ToyClassifier, ToyNoisePredictor


@pytest.fixture(scope="session")
def small_data():
    spec = ShapeDatasetSpec(image_size=16, n_classes=4, per_class_count=40, seed=3)
    return train_val_split(spec, 10)


@pytest.fixture(scope="session")
def small_classifier(small_data):
    train, _ = small_data
    clf = ToyClassifier(n_classes=4, epochs=15, batch_size=16, learning_rate=0.02, random_state=1)
    return clf.fit(train.images, train.labels)


@pytest.fixture(scope="session")
def small_denoiser(small_data):
    train, _ = small_data
    return ToyNoisePredictor(hidden=8, epochs=2, batch_size=32, random_state=2).fit(train.images)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
