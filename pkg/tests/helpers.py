"""Shared test utilities: independent brute-force oracles and toy fixtures.

Everything here deliberately avoids the library's fast code paths.  The
Monte-Carlo velocity oracle, the sliding-window SSIM/PSNR reference
implementations, and the evaluation-count walk are written from the
definitions so they can catch bugs in the production implementations.
"""

from __future__ import annotations

import math

import numpy as np

from restoraflow.gmm import GmmPrior, gmm_marginal
from restoraflow.tensors import SeededRng

TOY_SHAPE = (1, 16, 16)


def toy_multimodal_prior(level: float = 0.7, variance: float = 0.01) -> GmmPrior:
    """Two flat anti-correlated modes at +/- level; the standard toy image prior."""
    means = np.stack([np.full(TOY_SHAPE, level), np.full(TOY_SHAPE, -level)])
    return GmmPrior([0.5, 0.5], means, [variance, variance])


def gauss_pixel_prior(shape) -> GmmPrior:
    """Images with i.i.d. standard-normal pixels (single-component mixture)."""
    return GmmPrior([1.0], np.zeros((1,) + tuple(shape)), [1.0])


def scalar_gmm(weights, means, variances) -> GmmPrior:
    """1-D mixture over (1, 1, 1) images."""
    mu = np.asarray(means, dtype=np.float64).reshape(-1, 1, 1, 1)
    return GmmPrior(weights, mu, variances)


def corner_gmm(level: float = 2.0, variance: float = 0.01) -> GmmPrior:
    """Four-component product mixture on 2-pixel images: modes at (+-a, +-a).

    Equivalent to independent per-pixel two-mode mixtures, which removes the
    cross-pixel coupling of a two-component diagonal mixture.
    """
    corners = np.array([(a, b) for a in (-level, level) for b in (-level, level)])
    return GmmPrior([0.25] * 4, corners.reshape(4, 1, 1, 2), [variance] * 4)


def mc_velocity_oracle(
    prior: GmmPrior, x: float, t: float, n_pairs: int = 10**6, h: float = 0.02, seed: int = 0
) -> tuple[float, float]:
    """Kernel-weighted Monte-Carlo estimate of E[x1 - x0 | x_t = x] for a
    scalar mixture, with its estimated standard error.

    Draws (x0, x1) pairs, forms the path point, Gaussian-kernel-weights by
    distance to x, and averages the path velocity x1 - x0.  Kernel bias is
    O(h^2), negligible at the tolerances used.
    """
    if prior.dim != 1:
        raise ValueError("oracle is defined for scalar mixtures")
    rng = SeededRng(seed)
    ks = rng.choice(prior.n_components, p=prior.weights, shape=n_pairs)
    mu = prior.flat_means().ravel()
    sig = np.sqrt(prior.variances)
    x1 = mu[ks] + sig[ks] * rng.normal(n_pairs)
    x0 = rng.normal(n_pairs)
    xt = (1.0 - t) * x0 + t * x1
    y = x1 - x0
    u = np.exp(-0.5 * ((x - xt) / h) ** 2)
    total = u.sum()
    if total <= 0:
        raise RuntimeError(f"no effective samples near x={x}, t={t}")
    mean = float((u * y).sum() / total)
    stderr = float(np.sqrt(np.sum(u**2 * (y - mean) ** 2)) / total)
    return mean, stderr


def exact_marginal_cdf(prior: GmmPrior, t: float, v: float) -> float:
    """CDF of the scalar time-t path marginal at v (mixture of normal CDFs)."""
    total = 0.0
    for mean, var, weight in gmm_marginal(prior, t):
        z = (v - float(mean.reshape(-1)[0])) / math.sqrt(2.0 * var)
        total += weight * 0.5 * (1.0 + math.erf(z))
    return total


def tv_distance_to_marginal(
    samples: np.ndarray, prior: GmmPrior, lo: float = -4.0, hi: float = 4.0, bins: int = 100
) -> float:
    """Total-variation distance between a sample histogram and the exact t=1
    marginal, with the out-of-range mass lumped into one extra cell."""
    edges = np.linspace(lo, hi, bins + 1)
    cdf = np.array([exact_marginal_cdf(prior, 1.0, e) for e in edges])
    probs = np.diff(cdf)
    counts, _ = np.histogram(samples, bins=edges)
    frac = counts / samples.size
    out_frac = 1.0 - frac.sum()
    out_prob = 1.0 - probs.sum()
    return 0.5 * (np.abs(frac - probs).sum() + abs(out_frac - out_prob))


def brute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR by explicit per-pixel summation in [0, 1] space."""
    total = 0.0
    count = 0
    for c in range(a.shape[0]):
        for i in range(a.shape[1]):
            for j in range(a.shape[2]):
                ua = min(1.0, max(0.0, (a[c, i, j] + 1.0) / 2.0))
                ub = min(1.0, max(0.0, (b[c, i, j] + 1.0) / 2.0))
                total += (ua - ub) ** 2
                count += 1
    mse = total / count
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * math.log10(1.0 / mse))


def brute_ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """SSIM by direct sliding-window summation (valid positions only)."""
    half = (window - 1) / 2.0
    g = [math.exp(-((k - half) ** 2) / (2.0 * sigma**2)) for k in range(window)]
    kernel = [[gi * gj for gj in g] for gi in g]
    norm = sum(sum(row) for row in kernel)
    kernel = [[v / norm for v in row] for row in kernel]
    c1, c2 = 0.01**2, 0.03**2

    def unit(v):
        return min(1.0, max(0.0, (v + 1.0) / 2.0))

    channel_scores = []
    for c in range(a.shape[0]):
        scores = []
        for top in range(a.shape[1] - window + 1):
            for left in range(a.shape[2] - window + 1):
                mx = my = mxx = myy = mxy = 0.0
                for di in range(window):
                    for dj in range(window):
                        w = kernel[di][dj]
                        xv = unit(a[c, top + di, left + dj])
                        yv = unit(b[c, top + di, left + dj])
                        mx += w * xv
                        my += w * yv
                        mxx += w * xv * xv
                        myy += w * yv * yv
                        mxy += w * xv * yv
                vx, vy, cov = mxx - mx * mx, myy - my * my, mxy - mx * my
                scores.append(
                    ((2 * mx * my + c1) * (2 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2))
                )
        channel_scores.append(sum(scores) / len(scores))
    return sum(channel_scores) / len(channel_scores)


def walk_eval_count(n_steps: int, corrections: int) -> int:
    """Field evaluations of the masked sampler, counted by walking the loop
    contract directly: one advancing Euler step per grid node, plus, at every
    node except the last, ``corrections`` passes of one Euler step and one
    extrapolation each."""
    evals = 0
    for i in range(n_steps):
        evals += 1
        if i < n_steps - 1:
            evals += 2 * corrections
    return evals
