"""Isotropic Gaussian-mixture target distribution with closed-form marginals
and marginal velocity field.

With a standard-normal base at t=0 and straight-line paths, a mixture
component ``N(mu_k, sigma_k^2 I)`` induces the time-t marginal
``N(t mu_k, s_k^2(t) I)`` with ``s_k^2(t) = (1-t)^2 + t^2 sigma_k^2``.
Conditioning the jointly Gaussian pairs (x_t, x1) and (x_t, x0) per component
gives the exact mean velocity

    v_k(x, t) = mu_k + (t sigma_k^2 - (1 - t)) / s_k^2(t) * (x - t mu_k),

and the mixture field is the responsibility-weighted sum over components.
This makes the whole sampler/restoration stack testable without any trained
model: every marginal, density, and velocity has an exact reference value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .flow import VelocityField
from .tensors import ImageTensor, SeededRng

__all__ = [
    "GmmPrior",
    "gmm_sample",
    "gmm_sample_batch",
    "gmm_marginal",
    "gmm_velocity",
    "gmm_log_density",
    "GmmVelocityField",
    "load_gmm_spec",
    "save_gmm_spec",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class GmmPrior:
    """K-component isotropic Gaussian mixture over image-shaped vectors.

    weights: (K,) nonnegative, summing to 1 within 1e-12.  Zero weights are
    admitted so degenerate single-mode configurations can be expressed.
    means: (K, channels, height, width).
    variances: (K,) strictly positive per-component isotropic variances.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 (off by {w.sum() - 1.0:.3e})")
        if mu.ndim != 4 or mu.shape[0] != w.size:
            raise ValueError(f"means must have shape (K, c, h, w) with K={w.size}, got {mu.shape}")
        if var.shape != w.shape:
            raise ValueError(f"variances must match weights shape, got {var.shape}")
        if np.any(var <= 0.0):
            raise ValueError("variances must be strictly positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contain non-finite values")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.means.shape[1:]

    @property
    def dim(self) -> int:
        c, h, w = self.shape
        return c * h * w

    def flat_means(self) -> np.ndarray:
        return self.means.reshape(self.n_components, self.dim)


def gmm_sample(prior: GmmPrior, rng: SeededRng) -> ImageTensor:
    """Draw one sample: pick component k ~ Categorical(w), then mu_k + sigma_k * eps."""
    k = int(rng.choice(prior.n_components, p=prior.weights))
    eps = rng.normal(prior.shape)
    return ImageTensor(prior.means[k] + np.sqrt(prior.variances[k]) * eps)


def gmm_sample_batch(prior: GmmPrior, n: int, rng: SeededRng) -> np.ndarray:
    """Vectorized sampling; returns ``(n, c, h, w)`` states."""
    ks = rng.choice(prior.n_components, p=prior.weights, shape=n)
    eps = rng.normal((n,) + prior.shape)
    sigmas = np.sqrt(prior.variances)[ks].reshape(n, 1, 1, 1)
    return prior.means[ks] + sigmas * eps


def _marginal_vars(prior: GmmPrior, t: float) -> np.ndarray:
    return (1.0 - t) ** 2 + t**2 * prior.variances


def gmm_marginal(prior: GmmPrior, t: float) -> list[tuple[np.ndarray, float, float]]:
    """Per-component (mean, variance, weight) of the time-t path marginal."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    s2 = _marginal_vars(prior, t)
    return [
        (t * prior.means[k], float(s2[k]), float(prior.weights[k]))
        for k in range(prior.n_components)
    ]


def _log_responsibilities(prior: GmmPrior, xs_flat: np.ndarray, t: float) -> np.ndarray:
    """Unnormalized log posterior over components for each row of ``xs_flat``.

    Returns (n, K) log weights already max-subtracted per row, so that
    ``exp`` then row-normalization is underflow-safe even for far-apart
    components at large t.
    """
    s2 = _marginal_vars(prior, t)  # (K,)
    d = xs_flat.shape[1]
    mu = t * prior.flat_means()  # (K, d)
    # ||x - t mu_k||^2 for every (row, component) pair
    sq = (
        np.sum(xs_flat**2, axis=1)[:, None]
        - 2.0 * xs_flat @ mu.T
        + np.sum(mu**2, axis=1)[None, :]
    )
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)[None, :]
    logp = logw - 0.5 * d * (_LOG_2PI + np.log(s2))[None, :] - 0.5 * sq / s2[None, :]
    return logp - np.max(logp, axis=1, keepdims=True)


def _velocity_flat(prior: GmmPrior, xs_flat: np.ndarray, t: float) -> np.ndarray:
    s2 = _marginal_vars(prior, t)  # (K,)
    coef = (t * prior.variances - (1.0 - t)) / s2  # (K,)
    mu = prior.flat_means()  # (K, d)
    r = np.exp(_log_responsibilities(prior, xs_flat, t))
    r /= np.sum(r, axis=1, keepdims=True)
    # v_k(x) = mu_k + coef_k (x - t mu_k), combined with responsibilities
    rc = r * coef[None, :]  # (n, K)
    return r @ mu + rc.sum(axis=1, keepdims=True) * xs_flat - (t * rc) @ mu


def gmm_velocity(prior: GmmPrior, x: ImageTensor, t: float) -> ImageTensor:
    """Exact marginal velocity of the mixture path at (x, t).

    Defined on t in [0, 1]; the t=1 endpoint is regular because component
    variances are strictly positive.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if x.shape != prior.shape:
        raise ValueError(f"sample shape {x.shape} does not match prior shape {prior.shape}")
    flat = x.data.reshape(1, prior.dim)
    return ImageTensor(_velocity_flat(prior, flat, float(t)).reshape(prior.shape))


def gmm_log_density(prior: GmmPrior, x: ImageTensor, t: float) -> float:
    """log p_t(x) by log-sum-exp over the marginal components."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if x.shape != prior.shape:
        raise ValueError(f"sample shape {x.shape} does not match prior shape {prior.shape}")
    s2 = _marginal_vars(prior, t)
    d = prior.dim
    flat = x.data.reshape(d)
    sq = np.sum((flat[None, :] - t * prior.flat_means()) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    logp = logw - 0.5 * d * (_LOG_2PI + np.log(s2)) - 0.5 * sq / s2
    m = np.max(logp)
    return float(m + np.log(np.sum(np.exp(logp - m))))


class GmmVelocityField(VelocityField):
    """The mixture's exact velocity field, usable by any sampler."""

    def __init__(self, prior: GmmPrior):
        super().__init__()
        self.prior = prior

    def _velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        flat = x.reshape(1, self.prior.dim)
        return _velocity_flat(self.prior, flat, t).reshape(x.shape)

    def _velocity_batch(self, xs: np.ndarray, t: float) -> np.ndarray:
        n = xs.shape[0]
        flat = xs.reshape(n, self.prior.dim)
        return _velocity_flat(self.prior, flat, t).reshape(xs.shape)


def load_gmm_spec(path) -> GmmPrior:
    """Load a mixture from JSON: weights[], means[][] (flattened), variances[].

    An optional "shape": [c, h, w] key fixes the image geometry; without it,
    means of length d are treated as (1, 1, d) images.
    """
    with open(path) as f:
        spec = json.load(f)
    try:
        weights = np.asarray(spec["weights"], dtype=np.float64)
        means = np.asarray(spec["means"], dtype=np.float64)
        variances = np.asarray(spec["variances"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"invalid GMM spec {path}: {exc}") from None
    if means.ndim != 2:
        raise ValueError(f"means must be a K x d array, got shape {means.shape}")
    shape = tuple(spec.get("shape", (1, 1, means.shape[1])))
    if len(shape) != 3 or int(np.prod(shape)) != means.shape[1]:
        raise ValueError(f"shape {shape} does not match mean length {means.shape[1]}")
    return GmmPrior(weights, means.reshape((means.shape[0],) + shape), variances)


def save_gmm_spec(prior: GmmPrior, path) -> None:
    spec = {
        "weights": prior.weights.tolist(),
        "means": prior.flat_means().tolist(),
        "variances": prior.variances.tolist(),
        "shape": list(prior.shape),
    }
    with open(path, "w") as f:
        json.dump(spec, f, indent=2)
        f.write("\n")
