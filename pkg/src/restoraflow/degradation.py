"""Mask-based degradation operators: build the observation ``z = Hx + noise``
and the binary known-pixel mask for each restoration task.

H is always mask-shaped here: pixel deletion for inpainting, lattice
subsampling for super-resolution (the known pixels are exactly observed), and
identity-plus-noise for denoising.  Unknown pixels of ``z`` are zero-filled so
serialization is deterministic; fusion never reads them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensors import BinaryMask, ImageTensor, SeededRng

__all__ = [
    "BoxInpaint",
    "RandomInpaint",
    "SuperResolution",
    "Denoise",
    "DegradationTask",
    "Observation",
    "make_box_mask",
    "make_random_mask",
    "make_sr_mask",
    "degrade",
]

DEFAULT_MEASUREMENT_NOISE = 0.01


@dataclass(frozen=True)
class BoxInpaint:
    """Centered box of unknown pixels."""

    box_h: int
    box_w: int
    sigma_meas: float = DEFAULT_MEASUREMENT_NOISE


@dataclass(frozen=True)
class RandomInpaint:
    """An exact fraction of uniformly chosen pixels is unknown."""

    masked_fraction: float
    sigma_meas: float = DEFAULT_MEASUREMENT_NOISE


@dataclass(frozen=True)
class SuperResolution:
    """Only the top-left pixel of every factor x factor block is observed."""

    factor: int
    sigma_meas: float = DEFAULT_MEASUREMENT_NOISE


@dataclass(frozen=True)
class Denoise:
    """Global additive Gaussian noise; the noise level is the degradation."""

    sigma: float


DegradationTask = Union[BoxInpaint, RandomInpaint, SuperResolution, Denoise]


@dataclass(frozen=True)
class Observation:
    z: ImageTensor
    mask: BinaryMask
    task: DegradationTask


def make_box_mask(h: int, w: int, box_h: int, box_w: int) -> BinaryMask:
    """Zeros inside a centered box_h x box_w box, ones outside.

    The box is anchored at floor((dim - box) / 2) along each axis.
    """
    if box_h < 0 or box_w < 0:
        raise ValueError(f"box dimensions must be nonnegative, got {box_h}x{box_w}")
    if box_h > h or box_w > w:
        raise ValueError(f"box {box_h}x{box_w} does not fit in image {h}x{w}")
    mask = np.ones((h, w))
    top, left = (h - box_h) // 2, (w - box_w) // 2
    mask[top : top + box_h, left : left + box_w] = 0.0
    return BinaryMask(mask)


def make_random_mask(h: int, w: int, masked_fraction: float, rng: SeededRng) -> BinaryMask:
    """Exactly floor(fraction * h * w) unknown pixels at shuffled positions."""
    if not 0.0 < masked_fraction < 1.0:
        raise ValueError(f"masked_fraction must lie in (0, 1), got {masked_fraction}")
    n_masked = int(np.floor(masked_fraction * h * w))
    flat = np.ones(h * w)
    flat[rng.permutation(h * w)[:n_masked]] = 0.0
    return BinaryMask(flat.reshape(h, w))


def make_sr_mask(h: int, w: int, factor: int) -> BinaryMask:
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide image dimensions {h}x{w}")
    mask = np.zeros((h, w))
    mask[::factor, ::factor] = 1.0
    return BinaryMask(mask)


def _check_sigma(sigma: float, what: str) -> None:
    if sigma < 0.0:
        raise ValueError(f"{what} must be >= 0, got {sigma}")


def degrade(x: ImageTensor, task: DegradationTask, rng: SeededRng) -> Observation:
    """Apply the task's degradation operator plus measurement noise.

    For masked tasks z = m * (x + sigma_meas * eps) with zeros on unknown
    pixels; for denoising the mask is all-ones and z = x + sigma * eps (the
    task noise subsumes measurement noise).  Mask randomness, when present, is
    drawn before the noise, so observations are reproducible per seed.
    """
    c, h, w = x.shape
    if isinstance(task, Denoise):
        _check_sigma(task.sigma, "denoise sigma")
        mask = BinaryMask(np.ones((h, w)))
        z = ImageTensor(x.data + task.sigma * rng.normal(x.shape))
        return Observation(z, mask, task)

    if isinstance(task, BoxInpaint):
        _check_sigma(task.sigma_meas, "sigma_meas")
        mask = make_box_mask(h, w, task.box_h, task.box_w)
    elif isinstance(task, RandomInpaint):
        _check_sigma(task.sigma_meas, "sigma_meas")
        mask = make_random_mask(h, w, task.masked_fraction, rng)
    elif isinstance(task, SuperResolution):
        _check_sigma(task.sigma_meas, "sigma_meas")
        mask = make_sr_mask(h, w, task.factor)
    else:
        raise TypeError(f"unknown degradation task {task!r}")

    noisy = x.data + task.sigma_meas * rng.normal(x.shape)
    z = ImageTensor(mask.broadcast(c) * noisy)
    return Observation(z, mask, task)
