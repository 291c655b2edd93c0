import json

import numpy as np
import pytest

from sancdifi.attacks import poison_dataset
from sancdifi.config import RunConfig
from sancdifi.core import ParameterError
from sancdifi.evalharness import build_setup, make_trigger, replicate_seeds
from sancdifi.sancdifi import (
    DiffPurePurifier, SancdifiConfig, SancdifiPurifier, purify_with_mask, sancdifi_no_second_phase, sancdifi_purify,
    visible_masks,
)

FAST = dict(n_masks=60, T1=12, T2=5)


@pytest.fixture(scope="module")
def images(small_data):
    return small_data[1].images[:3].astype(np.float64)


def test_zero_steps_is_identity(images, small_classifier, small_denoiser):
    y, A, _ = sancdifi_purify(images, small_classifier, small_denoiser, SancdifiConfig(T1=0, T2=0, n_masks=20))
    assert np.array_equal(y, images)
    assert A.shape == (3, 16, 16)


def test_no_second_phase_equals_t2_zero(images, small_classifier, small_denoiser):
    cfg = SancdifiConfig(**FAST, seed=4)
    a = sancdifi_no_second_phase(images, small_classifier, small_denoiser, cfg)
    b, _, _ = sancdifi_purify(images, small_classifier, small_denoiser, SancdifiConfig(**{**FAST, "T2": 0}, seed=4))
    assert np.array_equal(a, b)


def test_all_diffused_reduces_to_diffpure(images, small_denoiser):
    cfg = SancdifiConfig(T1=15, T2=0, seed=9)
    a = purify_with_mask(images, np.zeros((3, 16, 16), np.uint8), small_denoiser, cfg)
    b = DiffPurePurifier(small_denoiser, t_stop=15, random_state=9).transform(images)
    assert np.array_equal(a, b)


def test_each_pixel_diffused_in_exactly_one_phase(images, small_classifier, small_denoiser):
    cfg = SancdifiConfig(**FAST, seed=1)
    A = visible_masks(images, small_classifier, cfg)
    assert set(np.unique(A)) <= {0, 1}
    assert np.all(A + (1 - A) == 1)
    # phase 1 leaves kept pixels untouched; phase 2 leaves the others untouched
    y1 = purify_with_mask(images, A, small_denoiser, cfg, second_phase=False)
    y2 = purify_with_mask(images, A, small_denoiser, cfg)
    keep = A[..., None].repeat(3, axis=-1).astype(bool)
    assert np.array_equal(y1[keep], images[keep])
    assert np.array_equal(y2[~keep], y1[~keep])


def test_r_clipped_with_diagnostic(images, small_classifier, small_denoiser):
    _, _, diag = sancdifi_purify(images, small_classifier, small_denoiser, SancdifiConfig(**FAST, r=5))
    assert diag.r_used == 4
    assert diag.warnings and "clipped" in diag.warnings[0]
    assert all(len(c) == 4 for c in diag.classes)
    assert diag.steps == {"phase1": 12, "phase2": 5}
    json.dumps(diag.to_dict())


def test_pure_function_of_inputs(images, small_classifier, small_denoiser):
    cfg = SancdifiConfig(**FAST, seed=2)
    a = sancdifi_purify(images, small_classifier, small_denoiser, cfg)
    b = sancdifi_purify(images, small_classifier, small_denoiser, cfg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = sancdifi_purify(images, small_classifier, small_denoiser, SancdifiConfig(**FAST, seed=3))
    assert not np.array_equal(a[0], c[0])


def test_single_image_shapes(images, small_classifier, small_denoiser):
    y, A, _ = sancdifi_purify(images[0], small_classifier, small_denoiser, SancdifiConfig(**FAST))
    assert y.shape == (16, 16, 3) and A.shape == (16, 16)


@pytest.mark.parametrize("kwargs", [{"T1": 100, "T2": 100}, {"T1": 100, "T2": 150}, {"d": 1.0}, {"r": 0},
                                    {"T1": 2000}])
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        SancdifiConfig(**kwargs)


def test_estimator_wrapper(images, small_classifier, small_denoiser):
    est = SancdifiPurifier(small_classifier, small_denoiser, n_masks=60, T1=12, T2=5, random_state=2).fit()
    out = est.transform(images)
    ref, A, _ = sancdifi_purify(images, small_classifier, small_denoiser, est.config)
    assert np.array_equal(out, ref)
    assert np.array_equal(est.visible_mask(images), A)
    assert est.get_params()["T1"] == 12


def test_trigger_footprint_is_diffused():
    cfg = RunConfig()
    seed = replicate_seeds(cfg)[0]
    setup = build_setup(cfg, seed)
    model = setup.victim("badnet")
    trig = make_trigger(cfg, "badnet", seed)
    poisoned = poison_dataset(setup.evaluation.subset(slice(0, 8)), trig, mode="all")
    A = visible_masks(poisoned.images, model, SancdifiConfig(seed=0))
    footprint = trig.template_mask == 0
    assert np.all((A[:, footprint] == 0).sum(axis=1) >= 7)
