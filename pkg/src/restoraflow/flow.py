"""Flow-matching primitives: straight-line probability paths, explicit Euler
integration, and the two trajectory-correction building blocks (forward
extrapolation to t=1 and renoising back to time t).

Time runs from 0 (standard-normal base) to 1 (data distribution).  All grid
nodes are computed as ``i / n_steps`` rather than by accumulated addition so
large step counts do not drift.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .tensors import ImageTensor, SeededRng, randn

__all__ = [
    "VelocityField",
    "TimeGrid",
    "conditional_path",
    "conditional_path_array",
    "euler_step",
    "sample_unconditional",
    "sample_unconditional_batch",
    "extrapolate_to_one",
    "renoise",
]

_T_SLACK = 1e-9


class VelocityField(ABC):
    """A pure time-dependent vector field ``v(x, t)`` with evaluation counting.

    Subclasses implement :meth:`_velocity` on raw ``(c, h, w)`` arrays and may
    override :meth:`_velocity_batch` with a vectorized version.  Every public
    evaluation bumps :attr:`eval_count` by the number of states evaluated,
    which makes solver cost assertable in tests.
    """

    def __init__(self):
        self._eval_count = 0

    @property
    def eval_count(self) -> int:
        return self._eval_count

    def reset_eval_count(self) -> None:
        self._eval_count = 0

    @abstractmethod
    def _velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        """Velocity of a single state; same shape as ``x``."""

    def _velocity_batch(self, xs: np.ndarray, t: float) -> np.ndarray:
        return np.stack([self._velocity(x, t) for x in xs])

    def evaluate_array(self, x: np.ndarray, t: float) -> np.ndarray:
        self._eval_count += 1
        v = self._velocity(x, float(t))
        if v.shape != x.shape:
            raise ValueError(f"field returned shape {v.shape} for input {x.shape}")
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"field produced non-finite values at t={t}")
        return v

    def evaluate(self, x: ImageTensor, t: float) -> ImageTensor:
        return ImageTensor(self.evaluate_array(x.data, t))

    def evaluate_batch(self, xs: np.ndarray, t: float) -> np.ndarray:
        """Evaluate a stack of states ``(n, ...)``; counts n evaluations."""
        self._eval_count += xs.shape[0]
        v = self._velocity_batch(xs, float(t))
        if v.shape != xs.shape:
            raise ValueError(f"field returned shape {v.shape} for batch {xs.shape}")
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"field produced non-finite values at t={t}")
        return v


@dataclass(frozen=True)
class TimeGrid:
    """Uniform integration grid ``{0, 1/N, ..., 1 - 1/N}`` with step 1/N."""

    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps) / self.n_steps


def conditional_path_array(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """Straight-line interpolation ``(1 - t) x0 + t x1`` on raw arrays.

    ``t`` may be a scalar or broadcastable against the leading axis.
    """
    return (1.0 - t) * x0 + t * x1


def conditional_path(x0: ImageTensor, x1: ImageTensor, t: float) -> ImageTensor:
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return ImageTensor(conditional_path_array(x0.data, x1.data, float(t)))


def euler_step(x: ImageTensor, t: float, dt: float, f: VelocityField) -> ImageTensor:
    """One explicit Euler update ``x + dt * v(x, t)``; exactly one field eval."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not -_T_SLACK <= t <= 1.0 - dt + _T_SLACK:
        raise ValueError(f"t={t} outside [0, 1 - dt] for dt={dt}")
    return ImageTensor(x.data + dt * f.evaluate_array(x.data, t))


def sample_unconditional(
    f: VelocityField, grid: TimeGrid, shape: tuple[int, int, int], rng: SeededRng
) -> ImageTensor:
    """Integrate the flow ODE from a fresh noise draw; exactly N field evals."""
    x = randn(rng, shape)
    for t in grid.nodes():
        x = euler_step(x, float(t), grid.dt, f)
    return x


def sample_unconditional_batch(
    f: VelocityField, grid: TimeGrid, shape: tuple[int, int, int], n: int, rng: SeededRng
) -> np.ndarray:
    """Vectorized unconditional sampling; returns ``(n, c, h, w)`` states."""
    if n < 0:
        raise ValueError(f"sample count must be >= 0, got {n}")
    if n == 0:
        return np.zeros((0,) + tuple(shape))
    xs = rng.normal((n,) + tuple(shape))
    dt = grid.dt
    for t in grid.nodes():
        xs = xs + dt * f.evaluate_batch(xs, float(t))
    return xs


def extrapolate_to_one(x: ImageTensor, t: float, f: VelocityField) -> ImageTensor:
    """Project toward the path endpoint: ``x + (1 - t) v(x, t)``; one eval.

    At t=1 the field is still evaluated once (the coefficient is zero), so
    evaluation accounting stays uniform across grid positions.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return ImageTensor(x.data + (1.0 - t) * f.evaluate_array(x.data, t))


def renoise(x1_hat: ImageTensor, t: float, rng: SeededRng) -> ImageTensor:
    """Place an endpoint estimate back on the path at time t: ``t x1 + (1-t) eta``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    eta = rng.normal(x1_hat.shape)
    return ImageTensor(t * x1_hat.data + (1.0 - t) * eta)
