"""Black-box RISE saliency and the composite visible mask.

Only ``predict_proba`` of the classifier is ever called.  The visible mask
``A`` is 1 on pixels preserved during purification and 0 on the salient
pixels that get diffused.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from ._validation import check_images
from .core import ParameterError, make_rng

__all__ = [
    "RiseConfig",
    "RiseSaliency",
    "generate_rise_masks",
    "rise_saliency",
    "percentile_mask",
    "composite_mask",
    "topk_classes",
]


@dataclass(frozen=True)
class RiseConfig:
    """RISE sampling parameters.

    ``baseline`` is the value masked-out pixels are scaled toward: ``0.0``
    (black) or any scalar, e.g. the dataset mean.
    """

    n_masks: int = 2000
    cell_grid: int = 7
    keep_prob: float = 0.5
    seed: int = 0
    baseline: float = 0.0
    batch_size: int = 500

    def __post_init__(self):
        if self.n_masks < 1:
            raise ParameterError("n_masks must be at least 1")
        if self.cell_grid < 2:
            raise ParameterError("cell_grid must be at least 2")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ParameterError("keep_prob must lie in [0, 1]")


def _stratified_bits(rng, n, cells, keep_prob):
    """``(n, cells)`` 0/1 array, each column holding ``n * keep_prob`` ones (randomized rounding).

    Each mask's bits are marginally Bernoulli(keep_prob) and independent across
    cells, while the per-cell on-count is fixed: sampling without replacement.
    """
    target = n * keep_prob
    counts = np.floor(target + rng.random(cells)).astype(np.int64)
    ranks = np.argsort(rng.random((n, cells)), axis=0).argsort(axis=0)
    return (ranks < counts[None, :]).astype(np.float64)


def generate_rise_masks(cfg: RiseConfig, image_size) -> np.ndarray:
    """Smooth random masks in ``[0, 1]``, shape ``(N, H, W)``.

    A ``cell_grid x cell_grid`` binary grid is bilinearly upsampled to
    ``image_size + cell`` and cropped at a random shift in ``[0, cell)^2``.
    Sampling is stratified: shifts are spread evenly over the ``cell^2``
    offsets and, within each offset group, every grid cell is on in a
    ``keep_prob`` share of the masks.  Each mask is still distributed as in
    plain RISE; the stratification removes most Monte-Carlo spread from the
    per-pixel mask mean.
    """
    h, w = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    s, n = cfg.cell_grid, cfg.n_masks
    cell_h, cell_w = math.ceil(h / s), math.ceil(w / s)
    up_h, up_w = h + cell_h, w + cell_w
    rng = make_rng(cfg.seed, "rise/masks")

    n_offsets = cell_h * cell_w
    group = rng.permutation(np.arange(n) % n_offsets)
    grid = np.empty((n, s * s))
    for g in range(n_offsets):
        members = np.flatnonzero(group == g)
        if members.size:
            grid[members] = _stratified_bits(rng, members.size, s * s, cfg.keep_prob)
    grid = grid.reshape(n, s, s)

    up = ndimage.zoom(grid, (1, up_h / s, up_w / s), order=1, mode="nearest", grid_mode=True)
    up = np.clip(up, 0.0, 1.0)
    dy, dx = group // cell_w, group % cell_w
    rows = dy[:, None] + np.arange(h)[None, :]
    cols = dx[:, None] + np.arange(w)[None, :]
    return up[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]


def _query(classifier, x, masks, baseline, batch_size):
    """Class probabilities of ``x`` under every mask, shape ``(N, K)``."""
    out = []
    for start in range(0, masks.shape[0], batch_size):
        m = masks[start:start + batch_size, :, :, None]
        out.append(np.asarray(classifier.predict_proba(x[None] * m + baseline * (1.0 - m))))
    return np.concatenate(out)


def rise_saliency_maps(classifier, x, cfg: RiseConfig, masks=None):
    """RISE maps of one image for every class, shape ``(K, H, W)``.

    ``S_k = sum_i f_k(x * M_i) M_i / (N * keep_prob)``; the classifier is
    queried exactly ``N`` times.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ParameterError(f"expected one (H, W, C) image, got {x.shape}")
    if masks is None:
        masks = generate_rise_masks(cfg, x.shape[:2])
    probs = _query(classifier, x, masks, cfg.baseline, cfg.batch_size)
    n = masks.shape[0]
    denom = n * cfg.keep_prob if cfg.keep_prob > 0 else n
    sal = probs.T @ masks.reshape(n, -1) / denom
    return np.maximum(sal, 0.0).reshape(-1, *x.shape[:2])


def rise_saliency(classifier, x, k, cfg: RiseConfig, masks=None):
    """RISE map of class ``k`` for one image, shape ``(H, W)``."""
    return rise_saliency_maps(classifier, x, cfg, masks)[k]


def percentile_mask(S, d):
    """Binary mask keeping pixels whose score is at or below the ``d`` cutoff.

    The ``ceil((1 - d) * n)`` highest-scoring pixels are diffused (0) and the
    rest kept (1).  The cutoff value is the ``n - ceil((1 - d) n)``-th smallest
    score; scores tied with it are kept, so ties only shrink the diffused set.
    """
    if not 0.0 < d < 1.0:
        raise ParameterError(f"d must lie in (0, 1), got {d}")
    S = np.asarray(S, dtype=np.float64)
    flat = np.sort(S.reshape(-1))
    n = flat.size
    n_diffused = math.ceil(round((1.0 - d) * n, 9))
    rank = max(n - n_diffused, 1)
    tau = flat[rank - 1]
    return (S <= tau).astype(np.uint8)


def composite_mask(maps, d):
    """Elementwise product of the per-map percentile masks."""
    maps = [np.asarray(m) for m in maps]
    if not maps:
        raise ParameterError("need at least one saliency map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ParameterError("saliency maps differ in shape")
    A = np.ones(shape, dtype=np.uint8)
    for m in maps:
        A &= percentile_mask(m, d)
    return A


def topk_classes(probs, r):
    """Indices of the ``r`` largest probabilities, descending, ties to the lower index."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if r > probs.size or r < 1:
        raise ParameterError(f"r={r} outside [1, {probs.size}]")
    return [int(i) for i in np.argsort(-probs, kind="stable")[:r]]


class RiseSaliency(BaseEstimator):
    """Estimator wrapper producing RISE maps and visible masks for image batches.

    ``fit`` draws the random mask set once; ``transform(X)`` returns the
    composite visible masks ``(B, H, W)`` of the top-``r`` classes of
    ``classifier`` at percentile ``d``.
    """

    def __init__(self, classifier=None, n_masks=2000, cell_grid=7, keep_prob=0.5,
                 d=0.95, r=5, baseline=0.0, random_state=0):
        self.classifier = classifier
        self.n_masks = n_masks
        self.cell_grid = cell_grid
        self.keep_prob = keep_prob
        self.d = d
        self.r = r
        self.baseline = baseline
        self.random_state = random_state

    @property
    def config(self):
        return RiseConfig(self.n_masks, self.cell_grid, self.keep_prob, self.random_state, self.baseline)

    def fit(self, X, y=None):
        X = check_images(X)
        self.image_shape_ = X.shape[1:]
        self.masks_ = generate_rise_masks(self.config, X.shape[1:3])
        return self

    def _masks_for(self, X):
        if getattr(self, "image_shape_", None) != X.shape[1:]:
            self.fit(X)
        return self.masks_

    def saliency_maps(self, X):
        """``(B, K, H, W)`` maps for every class."""
        X = check_images(X)
        masks = self._masks_for(X)
        return np.stack([rise_saliency_maps(self.classifier, x, self.config, masks) for x in X])

    def transform_with_classes(self, X):
        X = check_images(X)
        probs = np.asarray(self.classifier.predict_proba(X))
        r = min(self.r, probs.shape[1])
        masks = self._masks_for(X)
        A, classes = [], []
        for x, p in zip(X, probs):
            c = topk_classes(p, r)
            maps = rise_saliency_maps(self.classifier, x, self.config, masks)
            A.append(composite_mask(maps[c], self.d))
            classes.append(c)
        return np.stack(A) if A else np.empty((0,) + X.shape[1:3], np.uint8), classes

    def transform(self, X):
        return self.transform_with_classes(X)[0]
