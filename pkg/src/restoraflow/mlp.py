"""Small tanh MLP velocity field trained with the conditional flow-matching
loss via hand-written reverse-mode differentiation.

The network maps the flattened sample concatenated with the scalar time,
``[x, t]``, to a velocity of the same dimension as ``x``.  Hidden layers use
tanh, the output layer is linear, parameters are float64 in memory and f32 on
disk.  Optimization is plain SGD with optional momentum; nothing adaptive.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .flow import VelocityField, conditional_path_array
from .tensors import FormatError, SeededRng

__all__ = [
    "MlpVelocityNet",
    "TrainConfig",
    "TrainingDiverged",
    "mlp_forward",
    "cfm_loss_batch",
    "train",
    "checkpoint_save",
    "checkpoint_load",
    "MlpVelocityField",
]

CHECKPOINT_MAGIC = b"RFNN"

# A sampler draws n flattened data samples (n, d) from the target distribution.
PriorSampler = Callable[[SeededRng, int], np.ndarray]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss explodes past the abort threshold."""


@dataclass
class TrainConfig:
    batch_size: int = 128
    step_count: int = 5000
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.step_count < 0:
            raise ValueError(f"step_count must be >= 0, got {self.step_count}")
        if self.learning_rate < 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


class MlpVelocityNet:
    """Fully connected net with widths ``[d_in + 1, h_1, ..., h_L, d_in]``."""

    def __init__(self, widths: list[int], weights: list[np.ndarray], biases: list[np.ndarray]):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive widths, got {widths}")
        if widths[-1] != widths[0] - 1:
            raise ValueError(
                f"output width {widths[-1]} must equal input width minus the time slot "
                f"({widths[0]} - 1)"
            )
        if len(weights) != len(widths) - 1 or len(biases) != len(widths) - 1:
            raise ValueError("one weight matrix and bias vector per layer required")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[i + 1], widths[i]):
                raise ValueError(f"layer {i} weight shape {w.shape} != {(widths[i + 1], widths[i])}")
            if b.shape != (widths[i + 1],):
                raise ValueError(f"layer {i} bias shape {b.shape} != {(widths[i + 1],)}")
        self.widths = widths
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]

    @classmethod
    def initialize(cls, widths: list[int], rng: SeededRng, scale: float = 1.0) -> "MlpVelocityNet":
        """Xavier-uniform weights (optionally rescaled), zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, (fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(widths, weights, biases)

    @property
    def d_in(self) -> int:
        return self.widths[0] - 1

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def check_finite(self) -> None:
        for p in self.parameters():
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("network parameters contain non-finite values")

    def forward_batch(self, x: np.ndarray, t: np.ndarray, keep_cache: bool = False):
        """Batched forward pass on ``(n, d_in)`` inputs and ``(n,)`` times.

        Returns the (n, d_in) output, plus per-layer activations when
        ``keep_cache`` is set (needed by :meth:`backward_batch`).
        """
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"input must be (n, {self.d_in}), got {x.shape}")
        a = np.concatenate([x, np.asarray(t, dtype=np.float64).reshape(-1, 1)], axis=1)
        cache = [a] if keep_cache else None
        for i in range(self.n_layers):
            z = a @ self.weights[i].T + self.biases[i]
            a = np.tanh(z) if i < self.n_layers - 1 else z
            if keep_cache:
                cache.append(a)
        return (a, cache) if keep_cache else a

    def backward_batch(self, cache: list[np.ndarray], grad_out: np.ndarray):
        """Reverse-mode gradients for a forward pass recorded in ``cache``.

        ``grad_out`` is dLoss/d(output), shape (n, d_out).  Returns per-layer
        (dW, db) pairs in layer order.
        """
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.n_layers
        delta = grad_out
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                delta = delta * (1.0 - cache[i + 1] ** 2)  # d tanh = 1 - tanh^2
            grads[i] = (delta.T @ cache[i], delta.sum(axis=0))
            if i > 0:
                delta = delta @ self.weights[i]
        return grads

    def clone(self) -> "MlpVelocityNet":
        return MlpVelocityNet(
            list(self.widths), [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )


def mlp_forward(net: MlpVelocityNet, x: np.ndarray, t: float) -> np.ndarray:
    """Velocity of a single flattened sample ``x`` of length d_in at time t."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.d_in,):
        raise ValueError(f"input must have length {net.d_in}, got shape {x.shape}")
    out = net.forward_batch(x[None, :], np.array([t]))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("network produced non-finite output")
    return out[0]


def cfm_loss_batch(
    net: MlpVelocityNet, prior_sampler: PriorSampler, batch: int, rng: SeededRng
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Monte-Carlo conditional flow-matching loss and exact parameter gradients.

    Per batch element: t ~ U[0,1], x0 ~ N(0,I), x1 from the target sampler;
    the regression target at the path point is the constant path velocity
    x1 - x0.  Loss is the batch mean of 0.5 ||v - (x1 - x0)||^2.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    d = net.d_in
    ts = rng.uniform(0.0, 1.0, batch)
    x0 = rng.normal((batch, d))
    x1 = np.asarray(prior_sampler(rng, batch), dtype=np.float64)
    if x1.shape != (batch, d):
        raise ValueError(f"prior sampler returned shape {x1.shape}, expected {(batch, d)}")
    xt = conditional_path_array(x0, x1, ts[:, None])
    out, cache = net.forward_batch(xt, ts, keep_cache=True)
    residual = out - (x1 - x0)
    loss = 0.5 * float(np.sum(residual**2)) / batch
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite flow-matching loss (stream seed {rng.seed})")
    grads = net.backward_batch(cache, residual / batch)
    return loss, grads


def train(
    net: MlpVelocityNet, prior_sampler: PriorSampler, cfg: TrainConfig
) -> tuple[MlpVelocityNet, np.ndarray]:
    """SGD training loop; mutates and returns ``net`` plus the full loss trace."""
    rng = SeededRng(cfg.seed)
    velocity = [np.zeros_like(p) for p in net.parameters()]
    trace = np.zeros(cfg.step_count)
    for step in range(cfg.step_count):
        loss, grads = cfm_loss_batch(net, prior_sampler, cfg.batch_size, rng)
        trace[step] = loss
        if loss > 1e6:
            raise TrainingDiverged(f"loss {loss:.3e} exceeded 1e6 at step {step} (seed {cfg.seed})")
        flat_grads = [g for pair in grads for g in pair]
        params = net.parameters()
        for p, v, g in zip(params, velocity, flat_grads):
            v *= cfg.momentum
            v += g
            p -= cfg.learning_rate * v
        net.check_finite()
    return net, trace


def smoothed_final_loss(trace: np.ndarray, window: int = 200) -> float:
    """Mean loss over the trailing window (whole trace when shorter)."""
    if trace.size == 0:
        return float("nan")
    return float(np.mean(trace[-min(window, trace.size):]))


# ---------------------------------------------------------------------------
# Checkpoint format: b"RFNN" | u32 n_widths | u32 widths[] |
#   per layer: f32 weight matrix (row-major, out x in), f32 bias vector
# ---------------------------------------------------------------------------


def checkpoint_save(net: MlpVelocityNet, path) -> None:
    """Serialize the net; parameters are stored as little-endian f32."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(net.widths)))
        f.write(struct.pack(f"<{len(net.widths)}I", *net.widths))
        for w, b in zip(net.weights, net.biases):
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def checkpoint_load(path) -> MlpVelocityNet:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 8:
        raise FormatError("truncated header")
    (n_widths,) = struct.unpack_from("<I", blob, 4)
    if not 2 <= n_widths <= 64:
        raise FormatError(f"implausible width count {n_widths}")
    header_end = 8 + 4 * n_widths
    if len(blob) < header_end:
        raise FormatError("truncated width list")
    widths = list(struct.unpack_from(f"<{n_widths}I", blob, 8))
    if min(widths) < 1:
        raise FormatError(f"zero width in {widths}")
    if widths[-1] != widths[0] - 1:
        raise FormatError(f"widths {widths} break the velocity-net contract (out = in - 1)")
    expected = sum((widths[i + 1] * widths[i] + widths[i + 1]) for i in range(n_widths - 1))
    payload = blob[header_end:]
    if len(payload) != 4 * expected:
        raise FormatError(f"payload holds {len(payload) // 4} values, widths demand {expected}")
    values = np.frombuffer(payload, dtype="<f4")
    if not np.all(np.isfinite(values)):
        raise FormatError("payload contains non-finite values")
    weights, biases, pos = [], [], 0
    for i in range(n_widths - 1):
        n_out, n_in = widths[i + 1], widths[i]
        weights.append(values[pos : pos + n_out * n_in].astype(np.float64).reshape(n_out, n_in))
        pos += n_out * n_in
        biases.append(values[pos : pos + n_out].astype(np.float64))
        pos += n_out
    return MlpVelocityNet(widths, weights, biases)


class MlpVelocityField(VelocityField):
    """Adapter exposing a trained net as a velocity field over images."""

    def __init__(self, net: MlpVelocityNet, shape: tuple[int, int, int]):
        super().__init__()
        c, h, w = shape
        if c * h * w != net.d_in:
            raise ValueError(f"shape {shape} has {c * h * w} entries, net expects {net.d_in}")
        self.net = net
        self.shape = tuple(shape)

    def _velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        out = self.net.forward_batch(x.reshape(1, -1), np.array([t]))
        return out.reshape(x.shape)

    def _velocity_batch(self, xs: np.ndarray, t: float) -> np.ndarray:
        n = xs.shape[0]
        out = self.net.forward_batch(xs.reshape(n, -1), np.full(n, t))
        return out.reshape(xs.shape)
