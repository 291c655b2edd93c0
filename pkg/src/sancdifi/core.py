"""Shared numerics: image tensors, seeded randomness and the diffusion schedule.

Images are carried as numpy arrays laid out ``(H, W, C)`` (or ``(B, H, W, C)``
for batches), channel-last.  Two value domains are used:

* ``unit``   -- pixel space in ``[0, 1]``; classifiers and triggers live here.
* ``signed`` -- ``[-1, 1]``; the diffusion model operates here.

:class:`ImageTensor` pairs an array with its domain tag and is what the tensor
file format stores.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "UNIT",
    "SIGNED",
    "ParameterError",
    "ImageTensor",
    "DiffusionSchedule",
    "make_linear_schedule",
    "derive_seed",
    "make_rng",
    "sample_gaussian",
    "to_signed",
    "to_unit",
    "convert_domain",
]

UNIT = "unit"
SIGNED = "signed"
_DOMAINS = (UNIT, SIGNED)


class ParameterError(ValueError):
    """Raised when a constructor or operation receives an invalid parameter."""


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """An ``(H, W, C)`` image with an explicit value-domain tag."""

    data: np.ndarray
    domain: str = UNIT

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ParameterError(f"ImageTensor expects (H, W, C) data, got shape {data.shape}")
        if min(data.shape) < 1 or data.shape[2] not in (1, 3):
            raise ParameterError(f"invalid image dims {data.shape}")
        if self.domain not in _DOMAINS:
            raise ParameterError(f"unknown domain tag {self.domain!r}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    def check_range(self):
        """Raise if the values leave the range implied by the domain tag."""
        lo = 0.0 if self.domain == UNIT else -1.0
        if self.data.size and (self.data.min() < lo or self.data.max() > 1.0):
            raise ParameterError(f"values outside the {self.domain} range")
        return self

    def equals(self, other) -> bool:
        return (
            isinstance(other, ImageTensor)
            and self.domain == other.domain
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Variance schedule of a discrete DDPM with ``T`` steps.

    Arrays are indexed by the 0-based step index ``t`` in ``[0, T)``.
    ``alpha_bar[t]`` is the cumulative product of ``1 - beta`` up to and
    including ``t``; ``beta_hat`` is the posterior variance of the reverse step.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray = field(init=False)
    beta_hat: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ParameterError("beta must be a non-empty 1-d array")
        if np.any(beta < 0) or np.any(beta >= 1):
            raise ParameterError("beta values must lie in [0, 1)")
        alpha_bar = np.cumprod(1.0 - beta)
        beta_hat = beta.copy()
        prev = alpha_bar[:-1]
        denom = 1.0 - alpha_bar[1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(denom > 0, (1.0 - prev) / np.where(denom > 0, denom, 1.0), 0.0)
        beta_hat[1:] = ratio * beta[1:]
        for name, arr in (("beta", beta), ("alpha_bar", alpha_bar), ("beta_hat", beta_hat)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return int(self.beta.size)


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linearly increasing ``beta`` from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    T = int(T)
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + (beta_end - beta_start) * np.arange(T, dtype=np.float64) / (T - 1)
    return DiffusionSchedule(beta)


def _stream_key(stream) -> int:
    if isinstance(stream, (int, np.integer)):
        return int(stream)
    return zlib.crc32(str(stream).encode("utf-8"))


def _seed_sequence(seed, stream, index) -> np.random.SeedSequence:
    if seed is None or int(seed) < 0:
        raise ParameterError(f"seed must be a non-negative integer, got {seed!r}")
    return np.random.SeedSequence(int(seed), spawn_key=(_stream_key(stream), int(index)))


def derive_seed(seed: int, stream="default", index: int = 0) -> int:
    """Derive an independent 64-bit sub-seed from ``(seed, stream, index)``."""
    return int(_seed_sequence(seed, stream, index).generate_state(1, np.uint64)[0])


def make_rng(seed: int, stream="default", index: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator for one named stream of a master seed.

    Stages draw from distinct streams, so enabling or skipping one stage never
    shifts the random numbers another stage sees.
    """
    return np.random.Generator(np.random.Philox(_seed_sequence(seed, stream, index)))


def sample_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """I.i.d. standard normal draws of the given shape."""
    return rng.standard_normal(shape)


def to_signed(x):
    """Map unit-domain values to the signed domain (``v -> 2v - 1``)."""
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def to_unit(x):
    """Map signed-domain values back to ``[0, 1]``, clamping out-of-range values."""
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def convert_domain(x: ImageTensor, target: str) -> ImageTensor:
    if target not in _DOMAINS:
        raise ParameterError(f"unknown domain tag {target!r}")
    if x.domain == target:
        return x
    fn = to_signed if target == SIGNED else to_unit
    return ImageTensor(fn(x.data), target)
