"""Forward noising, masked conditioning and ancestral DDPM sampling.

Timesteps are 0-based schedule indices: ``forward_sample(x0, t)`` draws from
``N(sqrt(ab[t]) x0, (1 - ab[t]) I)`` and ``reverse_step(x, t)`` maps a sample
at index ``t`` to index ``t - 1`` (to clean data when ``t == 0``).  Purifying
to depth ``t_stop`` therefore noises to index ``t_stop - 1`` and runs
``t_stop`` reverse steps.

All functions here act on signed-domain batches ``(B, H, W, C)``; masks are
``(B, H, W, 1)`` or anything :func:`check_mask` accepts, with 1 = keep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_images, check_mask
from .core import DiffusionSchedule, ParameterError, make_rng, to_signed, to_unit

__all__ = [
    "PurifyConfig",
    "forward_sample",
    "masked_forward",
    "reverse_step",
    "masked_reverse_step",
    "purify",
    "diffpure",
]


@dataclass(frozen=True)
class PurifyConfig:
    schedule: DiffusionSchedule
    t_stop: int
    seed: int = 0
    final_step_noise: bool = False
    stream: str = "purify"

    def __post_init__(self):
        if not 0 <= self.t_stop <= self.schedule.T:
            raise ParameterError(f"t_stop must lie in [0, {self.schedule.T}], got {self.t_stop}")


class _NoiseSource:
    """Standard-normal draws with one independent stream per image in the batch."""

    def __init__(self, seed, stream, n):
        self.rngs = [make_rng(seed, stream, i) for i in range(n)]

    def __call__(self, shape):
        return np.stack([g.standard_normal(shape[1:]) for g in self.rngs])


def _noise(rng, shape):
    if callable(rng) and not isinstance(rng, np.random.Generator):
        return rng(shape)
    return rng.standard_normal(shape)


def _check_t(t, schedule):
    if not 0 <= t < schedule.T:
        raise ParameterError(f"timestep {t} outside [0, {schedule.T})")


def forward_sample(x0, t, schedule: DiffusionSchedule, rng):
    """``sqrt(ab[t]) x0 + sqrt(1 - ab[t]) z`` with ``z ~ N(0, I)``."""
    _check_t(t, schedule)
    x0 = np.asarray(x0, dtype=np.float64)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * _noise(rng, x0.shape)


def masked_forward(x0, A, t, schedule: DiffusionSchedule, rng):
    """Noise only the pixels with ``A == 0``; kept pixels equal ``x0`` bit for bit."""
    x0 = check_images(x0)
    keep = check_mask(A, x0.shape) > 0
    z = forward_sample(x0, t, schedule, rng)
    return np.where(keep, x0, z)


def _eps(model, x, t):
    return np.asarray(model.predict_eps(x, t), dtype=np.float64)


def reverse_step(x_t, t, model, schedule: DiffusionSchedule, rng, final_step_noise=False):
    """One ancestral step ``x_t -> x_{t-1}`` of the learned reverse chain.

    Mean ``(x_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(1 - beta_t)``, variance
    ``beta_hat_t``.  No noise is added at ``t == 0`` unless requested.
    """
    _check_t(t, schedule)
    x_t = np.asarray(x_t, dtype=np.float64)
    beta = schedule.beta[t]
    ab = schedule.alpha_bar[t]
    mean = (x_t - beta / np.sqrt(1.0 - ab) * _eps(model, x_t, t)) / np.sqrt(1.0 - beta)
    if t > 0 or final_step_noise:
        return mean + np.sqrt(schedule.beta_hat[t]) * _noise(rng, x_t.shape)
    return mean


def masked_reverse_step(x_t, t, A, x_keep, model, schedule: DiffusionSchedule, rng,
                        final_step_noise=False):
    """Reverse step on the ``A == 0`` pixels; ``A == 1`` pixels carry ``x_keep`` unchanged."""
    x_t = check_images(x_t)
    keep = check_mask(A, x_t.shape) > 0
    x_keep = np.broadcast_to(np.asarray(x_keep, dtype=np.float64), x_t.shape)
    step = reverse_step(x_t, t, model, schedule, rng, final_step_noise)
    return np.where(keep, x_keep, step)


def purify_signed(x0, A, model, cfg: PurifyConfig, callback=None):
    """Masked forward to depth ``t_stop`` then ``t_stop`` masked reverse steps (signed domain).

    ``callback(t, x)`` is invoked after every reverse step, e.g. to dump the chain.
    """
    x0 = check_images(x0)
    keep = check_mask(A, x0.shape) > 0
    if cfg.t_stop == 0:
        return x0.copy()
    noise = _NoiseSource(cfg.seed, cfg.stream, x0.shape[0])
    x = masked_forward(x0, keep, cfg.t_stop - 1, cfg.schedule, noise)
    for t in range(cfg.t_stop - 1, -1, -1):
        x = masked_reverse_step(x, t, keep, x0, model, cfg.schedule, noise, cfg.final_step_noise)
        if callback is not None:
            callback(t, x)
    return x


def purify(x, A, cfg: PurifyConfig, model, callback=None):
    """Mask-conditioned diffusion purification of unit-domain images.

    Pixels with ``A == 1`` are returned unchanged; ``t_stop == 0`` is the
    identity.  Accepts one ``(H, W, C)`` image or a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    X = check_images(x)
    keep = check_mask(A, X.shape) > 0
    if cfg.t_stop == 0 or keep.all():
        out = X.copy()
    else:
        y = purify_signed(to_signed(X), keep, model, cfg, callback)
        out = np.where(keep, X, to_unit(y))
    return out[0] if single else out


def diffpure(x, cfg: PurifyConfig, model, callback=None):
    """Unconditioned purification: :func:`purify` with every pixel diffused."""
    x = np.asarray(x, dtype=np.float64)
    return purify(x, np.zeros(x.shape[-3:-1]), cfg, model, callback)
