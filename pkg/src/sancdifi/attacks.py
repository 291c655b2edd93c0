"""Backdoor triggers, data poisoning and the PGD test-time attack.

A trigger is embedded as

    x (+) r = (1 - m) * ((1 - alpha) * x + alpha * p(x)) + m * x

where ``m`` is a template mask with 1 on pixels left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_fraction, check_images
from .core import ParameterError, make_rng
from .datagen import LabeledDataset

__all__ = [
    "TriggerSpec",
    "embed_trigger",
    "make_badnet_trigger",
    "make_invisible_trigger",
    "poison_dataset",
    "pgd_attack",
]

BADNET = "badnet_patch"
INVISIBLE = "invisible_imagewide"


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    """Parameters of an input-invariant trigger.

    For ``badnet_patch`` the ``pattern`` is a full-size ``(H, W, C)`` image
    whose values matter only where ``template_mask`` is 0.  For
    ``invisible_imagewide`` the ``pattern`` holds the additive perturbation
    ``delta`` with ``|delta| <= epsilon``; the effective pattern is
    ``clip(x + delta)`` and ``alpha`` is 1.
    """

    kind: str
    pattern: np.ndarray
    template_mask: np.ndarray
    alpha: float
    target_label: int
    epsilon: float = 0.0
    seed: int = 0
    patch_size: int = 0
    corner: str = "bottom-right"

    def __post_init__(self):
        if self.kind not in (BADNET, INVISIBLE):
            raise ParameterError(f"unknown trigger kind {self.kind!r}")
        check_fraction(self.alpha, "alpha")
        if self.target_label < 0:
            raise ParameterError("target_label must be non-negative")
        pattern = np.asarray(self.pattern, dtype=np.float64)
        m = np.asarray(self.template_mask, dtype=np.float64)
        if pattern.ndim != 3 or m.shape != pattern.shape[:2]:
            raise ParameterError("pattern must be (H, W, C) and template_mask (H, W)")
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "template_mask", m)

    @property
    def image_shape(self):
        return self.pattern.shape

    def to_dict(self):
        """Serializable description (the arrays are regenerated from it)."""
        return {
            "kind": self.kind,
            "image_size": int(self.pattern.shape[0]),
            "channels": int(self.pattern.shape[2]),
            "alpha": self.alpha,
            "target_label": self.target_label,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "patch_size": self.patch_size,
            "corner": self.corner,
        }

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == BADNET:
            return make_badnet_trigger(d["image_size"], d.get("patch_size", 3), d.get("corner", "bottom-right"),
                                       d["target_label"], channels=d.get("channels", 3))
        return make_invisible_trigger(d["image_size"], d.get("epsilon", 8 / 255), d["target_label"],
                                      d.get("seed", 0), channels=d.get("channels", 3))


def embed_trigger(x, spec: TriggerSpec):
    """Apply the trigger to one image or a batch; output is clamped to ``[0, 1]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != spec.image_shape:
        raise ParameterError(f"image shape {x.shape[-3:]} does not match trigger {spec.image_shape}")
    m = spec.template_mask[..., None]
    if spec.kind == INVISIBLE:
        p = np.clip(x + spec.pattern, 0.0, 1.0)
    else:
        p = spec.pattern
    out = (1.0 - m) * ((1.0 - spec.alpha) * x + spec.alpha * p) + m * x
    return np.clip(out, 0.0, 1.0)


_CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")


def make_badnet_trigger(image_size, patch_size=3, corner="bottom-right", target=0, channels=3):
    """Opaque checkerboard patch (values 0/1) in a corner of the image."""
    if not 1 <= patch_size <= image_size:
        raise ParameterError(f"patch of size {patch_size} does not fit a {image_size}px image")
    if corner not in _CORNERS:
        raise ParameterError(f"corner must be one of {_CORNERS}")
    r0 = image_size - patch_size if corner.startswith("bottom") else 0
    c0 = image_size - patch_size if corner.endswith("right") else 0
    pattern = np.zeros((image_size, image_size, channels))
    m = np.ones((image_size, image_size))
    ii, jj = np.mgrid[0:patch_size, 0:patch_size]
    checker = ((ii + jj) % 2 == 0).astype(np.float64)
    pattern[r0:r0 + patch_size, c0:c0 + patch_size, :] = checker[..., None]
    m[r0:r0 + patch_size, c0:c0 + patch_size] = 0.0
    return TriggerSpec(BADNET, pattern, m, 1.0, int(target), patch_size=int(patch_size), corner=corner)


def make_invisible_trigger(image_size, epsilon=8 / 255, target=0, seed=0, channels=3, period=3):
    """Image-wide ``+-epsilon`` perturbation.

    The sign field is a pseudo-random ``period x period x C`` tile repeated
    over the image, which keeps the trigger identical for every input while
    giving it a fixed local texture that a small convolutional model can learn.
    """
    if not 0 <= epsilon <= 0.1:
        raise ParameterError("epsilon must lie in [0, 0.1]")
    rng = make_rng(seed, "trigger/invisible")
    tile = rng.choice([-1.0, 1.0], size=(period, period, channels))
    reps = -(-image_size // period)
    delta = epsilon * np.tile(tile, (reps, reps, 1))[:image_size, :image_size]
    m = np.zeros((image_size, image_size))
    return TriggerSpec(INVISIBLE, delta, m, 1.0, int(target), epsilon=float(epsilon), seed=int(seed))


def poison_dataset(data: LabeledDataset, spec: TriggerSpec, fraction=None, seed=0, mode="fraction"):
    """Embed the trigger into part or all of a dataset and relabel to the target.

    ``mode="fraction"`` replaces ``round(fraction * n)`` images, chosen by a
    seeded permutation, with triggered copies labelled ``target_label``; the
    dataset size is unchanged.  ``mode="all"`` returns only the triggered
    copies of images whose true label differs from the target (ASR sets).
    """
    t = spec.target_label
    if mode == "all":
        keep = data.labels != t
        imgs = embed_trigger(data.images[keep], spec) if keep.any() else data.images[keep]
        return LabeledDataset(imgs, np.full(int(keep.sum()), t), data.n_classes, data.split)
    if mode != "fraction":
        raise ParameterError(f"unknown poisoning mode {mode!r}")
    fraction = check_fraction(0.0 if fraction is None else fraction, "fraction")
    n = len(data)
    images = data.images.copy()
    labels = data.labels.copy()
    idx = poisoned_indices(n, fraction, seed)
    if idx.size:
        images[idx] = embed_trigger(images[idx], spec)
        labels[idx] = t
    return LabeledDataset(images, labels, data.n_classes, data.split)


def poisoned_indices(n, fraction, seed=0):
    """Sorted indices ``poison_dataset`` replaces for a given ``(n, fraction, seed)``."""
    n_poison = int(round(fraction * n))
    return np.sort(make_rng(seed, "poison").permutation(n)[:n_poison])


def pgd_attack(classifier, X, y, epsilon=0.05, steps=20, step_size=None):
    """L-infinity PGD ascending the cross-entropy of the true label.

    ``classifier`` must provide ``input_gradient(X, k)`` (gradient of
    ``log p_k``).  ``step_size`` defaults to ``2.5 * epsilon / steps``.
    """
    if not hasattr(classifier, "input_gradient"):
        raise ParameterError("PGD needs a classifier exposing input_gradient")
    X = check_images(X)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (X.shape[0],))
    if step_size is None:
        step_size = 2.5 * epsilon / max(steps, 1)
    adv = X.copy()
    for _ in range(int(steps)):
        # ascend -log p_y, i.e. descend log p_y
        g = -classifier.input_gradient(adv, y)
        adv = adv + step_size * np.sign(g)
        adv = np.clip(np.clip(adv, X - epsilon, X + epsilon), 0.0, 1.0)
    return adv
