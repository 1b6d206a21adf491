"""Full-reference distortion metrics and timing.

PSNR and SSIM are computed after mapping model-space values from [-1, 1] to
[0, 1] (with clipping), so the PSNR peak is well defined.  SSIM follows the
standard convention: 11x11 Gaussian window with sigma 1.5, valid-mode
filtering, constants K1=0.01, K2=0.03 at dynamic range L=1, averaged over
window positions and channels.  Known-region consistency works directly in
model space.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, TypeVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensors import BinaryMask, ImageTensor

__all__ = [
    "MetricsRecord",
    "psnr",
    "ssim",
    "consistency_rmse",
    "timed",
    "PSNR_CAP_DB",
]

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

T = TypeVar("T")


@dataclass
class MetricsRecord:
    psnr_db: float
    ssim: float | None
    consistency_rmse: float
    wall_time_s: float
    field_evals: int


def _to_unit(t: ImageTensor) -> np.ndarray:
    return np.clip((t.data + 1.0) / 2.0, 0.0, 1.0)


def _check_shapes(a: ImageTensor, b: ImageTensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a: ImageTensor, b: ImageTensor) -> float:
    """Peak signal-to-noise ratio in dB over the [0, 1] range, capped at 99."""
    _check_shapes(a, b)
    mse = float(np.mean((_to_unit(a) - _to_unit(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g1, g1)
    return window / window.sum()


def _local_means(plane: np.ndarray, window: np.ndarray) -> np.ndarray:
    views = sliding_window_view(plane, window.shape)
    return np.tensordot(views, window, axes=([2, 3], [0, 1]))


def ssim(a: ImageTensor, b: ImageTensor) -> float:
    """Mean local structural similarity, averaged per channel."""
    _check_shapes(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ValueError(
            f"image {a.height}x{a.width} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    xs, ys = _to_unit(a), _to_unit(b)
    per_channel = []
    for x, y in zip(xs, ys):
        mu_x = _local_means(x, window)
        mu_y = _local_means(y, window)
        var_x = _local_means(x * x, window) - mu_x**2
        var_y = _local_means(y * y, window) - mu_y**2
        cov = _local_means(x * y, window) - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        )
        per_channel.append(float(ssim_map.mean()))
    return float(np.mean(per_channel))


def consistency_rmse(output: ImageTensor, z: ImageTensor, m: BinaryMask) -> float:
    """Root mean squared deviation from z over known pixels, in model space."""
    _check_shapes(output, z)
    if m.shape != output.shape[1:]:
        raise ValueError(f"mask shape {m.shape} does not match image {output.shape}")
    mb = m.broadcast(output.channels)
    total = mb.sum()
    if total == 0:
        raise ValueError("mask has no known pixels")
    return float(np.sqrt(np.sum(mb * (output.data - z.data) ** 2) / total))


def timed(run: Callable[[], T]) -> tuple[T, float]:
    """Execute a closure under a monotonic clock; returns (result, seconds)."""
    started = time.perf_counter()
    result = run()
    return result, time.perf_counter() - started
