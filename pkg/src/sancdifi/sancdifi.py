"""Saliency-conditioned two-phase diffusion purification.

1. Rank the classifier's top-``r`` classes for the input.
2. Compute a RISE map per class and multiply their percentile masks into
   the visible mask ``A`` (1 = keep, 0 = salient).
3. Purify with ``A`` for ``T1`` steps: salient pixels are diffused, the rest
   pin the reverse chain.
4. Purify the result with ``1 - A`` for ``T2 < T1`` steps.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_images
from .core import ParameterError, make_linear_schedule
from .diffusion import PurifyConfig, purify
from .saliency import RiseConfig, composite_mask, generate_rise_masks, rise_saliency_maps, topk_classes

__all__ = [
    "SancdifiConfig",
    "sancdifi_purify",
    "sancdifi_no_second_phase",
    "SancdifiPurifier",
    "DiffPurePurifier",
]


@dataclass(frozen=True)
class SancdifiConfig:
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
    seed: int = 0
    final_step_noise: bool = False

    def __post_init__(self):
        if self.T1 < 0 or self.T2 < 0 or self.T1 > self.T:
            raise ParameterError("need 0 <= T1 <= T and T2 >= 0")
        if not (self.T2 < self.T1 or self.T1 == self.T2 == 0):
            raise ParameterError("the complement phase must be shorter: T2 < T1")
        if not 0.0 < self.d < 1.0:
            raise ParameterError("d must lie in (0, 1)")
        if self.r < 1:
            raise ParameterError("r must be at least 1")

    @property
    def schedule(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    @property
    def rise(self):
        return RiseConfig(self.n_masks, self.cell_grid, self.keep_prob, self.seed, self.baseline)

    def phase(self, i):
        t_stop = self.T1 if i == 1 else self.T2
        return PurifyConfig(self.schedule, t_stop, self.seed, self.final_step_noise, stream=f"sancdifi/phase{i}")

    def to_dict(self):
        return asdict(self)


@dataclass
class Diagnostics:
    classes: list = field(default_factory=list)
    r_used: int = 0
    warnings: list = field(default_factory=list)
    mask_density: list = field(default_factory=list)
    steps: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def visible_masks(X, classifier, cfg: SancdifiConfig, diagnostics: Diagnostics | None = None):
    """Composite masks ``(B, H, W)`` from the top-``r`` classes of each image."""
    X = check_images(X)
    probs = np.asarray(classifier.predict_proba(X))
    k = probs.shape[1]
    r = min(cfg.r, k)
    if diagnostics is not None:
        diagnostics.r_used = r
        if r < cfg.r:
            diagnostics.warnings.append(f"r={cfg.r} exceeds the {k} available classes; clipped to {r}")
    rcfg = cfg.rise
    masks = generate_rise_masks(rcfg, X.shape[1:3])
    out = np.empty(X.shape[:3], dtype=np.uint8)
    for i, (x, p) in enumerate(zip(X, probs)):
        c = topk_classes(p, r)
        out[i] = composite_mask(rise_saliency_maps(classifier, x, rcfg, masks)[c], cfg.d)
        if diagnostics is not None:
            diagnostics.classes.append(c)
    return out


def purify_with_mask(X, A, model, cfg: SancdifiConfig, second_phase=True, diagnostics=None):
    """Phases 3-4 given precomputed visible masks ``A``."""
    X = check_images(X)
    A = np.asarray(A)
    t0 = time.perf_counter()
    y = purify(X, A, cfg.phase(1), model)
    t1 = time.perf_counter()
    if second_phase and cfg.T2 > 0:
        y = purify(y, 1 - A, cfg.phase(2), model)
    t2 = time.perf_counter()
    if diagnostics is not None:
        diagnostics.steps = {"phase1": cfg.T1, "phase2": cfg.T2 if second_phase else 0}
        diagnostics.timings.update({"phase1_s": t1 - t0, "phase2_s": t2 - t1})
        diagnostics.mask_density = [float(a.mean()) for a in A.reshape(A.shape[0], -1)]
    return y


def sancdifi_purify(x, classifier, model, cfg: SancdifiConfig, second_phase=True):
    """Full defense on one image or a batch.

    Returns ``(purified, A, diagnostics)``.  ``A`` has shape ``(H, W)`` for a
    single image and ``(B, H, W)`` for a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    X = check_images(x)
    diag = Diagnostics(seed=cfg.seed)
    t0 = time.perf_counter()
    A = visible_masks(X, classifier, cfg, diag)
    diag.timings["saliency_s"] = time.perf_counter() - t0
    y = purify_with_mask(X, A, model, cfg, second_phase, diag)
    if single:
        return y[0], A[0], diag
    return y, A, diag


def sancdifi_no_second_phase(x, classifier, model, cfg: SancdifiConfig):
    """Ablation without the complement-mask phase."""
    return sancdifi_purify(x, classifier, model, cfg, second_phase=False)[0]


class SancdifiPurifier(TransformerMixin, BaseEstimator):
    """Black-box input purifier for use in front of a (possibly backdoored) classifier.

    ``classifier`` is queried through ``predict_proba`` only; ``denoiser``
    must provide ``predict_eps(x_t, t)``.  ``fit`` is a no-op kept for
    pipeline compatibility, so the purifier can precede the classifier in a
    :class:`sklearn.pipeline.Pipeline` whose steps are already fitted.
    """

    def __init__(self, classifier=None, denoiser=None, T1=300, T2=100, n_masks=2000, d=0.95, r=5,
                 cell_grid=7, keep_prob=0.5, baseline=0.5, T=1000, beta_start=1e-4, beta_end=0.02,
                 second_phase=True, random_state=0):
        self.classifier = classifier
        self.denoiser = denoiser
        self.T1 = T1
        self.T2 = T2
        self.n_masks = n_masks
        self.d = d
        self.r = r
        self.cell_grid = cell_grid
        self.keep_prob = keep_prob
        self.baseline = baseline
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.second_phase = second_phase
        self.random_state = random_state

    @property
    def config(self):
        return SancdifiConfig(self.T1, self.T2, self.n_masks, self.d, self.r, self.cell_grid, self.keep_prob,
                              self.baseline, self.T, self.beta_start, self.beta_end, self.random_state)

    def fit(self, X=None, y=None):
        self.config_ = self.config
        return self

    def transform(self, X):
        y, _, self.diagnostics_ = sancdifi_purify(check_images(X), self.classifier, self.denoiser,
                                                   self.config, self.second_phase)
        return y

    def visible_mask(self, X):
        return visible_masks(X, self.classifier, self.config)


class DiffPurePurifier(TransformerMixin, BaseEstimator):
    """Unconditioned diffusion purification to depth ``t_stop``."""

    def __init__(self, denoiser=None, t_stop=100, T=1000, beta_start=1e-4, beta_end=0.02, random_state=0):
        self.denoiser = denoiser
        self.t_stop = t_stop
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.random_state = random_state

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = check_images(X)
        cfg = PurifyConfig(make_linear_schedule(self.T, self.beta_start, self.beta_end), self.t_stop,
                           self.random_state, stream="sancdifi/phase1")
        return purify(X, np.zeros(X.shape[1:3]), cfg, self.denoiser)
