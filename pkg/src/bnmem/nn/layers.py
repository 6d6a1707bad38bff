"""Layers with hand-written forward and backward passes.

Forward functions return ``(out, cache)``; backward functions take the cache
back and return ``(grad_in, param_grads)``. Nothing is stored on the layer
between the two calls, so Eval-mode forwards are side-effect free.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteError, ShapeError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != c:
                raise ShapeError(f"{name} has length {len(getattr(self, name))}, expected {c}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def init(cls, num_channels, eps=DEFAULT_EPS, momentum=DEFAULT_MOMENTUM):
        return cls(
            gamma=np.ones(num_channels),
            beta=np.zeros(num_channels),
            running_mean=np.zeros(num_channels),
            running_var=np.ones(num_channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def num_channels(self):
        return len(self.gamma)


@dataclass
class BNCache:
    x_hat: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    # frozen: statistics are treated as constants in the backward pass
    frozen: bool


def bn_forward(state, batch, mode="train", track=True):
    """Batch normalization over axis 0 of a ``(B, C)`` array.

    Train mode normalizes with the population (1/B) batch statistics and,
    when ``track`` is set, folds them into the running averages. Eval mode
    uses the running statistics and leaves ``state`` untouched.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != state.num_channels:
        raise ShapeError(f"expected (B, {state.num_channels}) batch, got {batch.shape}")
    check_finite(batch, "batch-norm input")
    if mode == "train":
        if batch.shape[0] < 2:
            raise ShapeError("train-mode batch norm needs at least 2 samples")
        mean = batch.mean(axis=0)
        var = ((batch - mean) ** 2).mean(axis=0)
        if track:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * var
    elif mode == "eval":
        mean = state.running_mean
        var = state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (batch - mean) * inv_std
    out = state.gamma * x_hat + state.beta
    cache = BNCache(x_hat, mean, var, inv_std, state.gamma.copy(), frozen=(mode == "eval"))
    return out, cache


def bn_backward(cache, grad_out, frozen=None):
    """Gradients of a batch-norm layer.

    With live batch statistics the mean and variance are differentiated as
    functions of the batch. ``frozen=True`` (or an Eval-mode cache) treats
    them as constants, which makes the layer a per-channel affine map.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(f"grad shape {grad_out.shape} != cache shape {cache.x_hat.shape}")
    if frozen is None:
        frozen = cache.frozen
    grad_gamma = (grad_out * cache.x_hat).sum(axis=0)
    grad_beta = grad_out.sum(axis=0)
    dx_hat = grad_out * cache.gamma
    if frozen:
        grad_in = dx_hat * cache.inv_std
    else:
        b = grad_out.shape[0]
        grad_in = (cache.inv_std / b) * (
            b * dx_hat
            - dx_hat.sum(axis=0)
            - cache.x_hat * (dx_hat * cache.x_hat).sum(axis=0)
        )
    return grad_in, grad_gamma, grad_beta


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    kind = "dense"

    @classmethod
    def init(cls, fan_in, fan_out, rng):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, (fan_out, fan_in))
        return cls(w, np.zeros(fan_out))

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, mode="train", track=True):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense layer expects (B, {self.in_features}), got {x.shape}")
        return x @ self.weight.T + self.bias, x

    def backward(self, cache, g, frozen=False):
        return g @ self.weight, {"weight": g.T @ cache, "bias": g.sum(axis=0)}


@dataclass
class BatchNorm:
    state: BatchNormState

    kind = "batchnorm"

    @classmethod
    def init(cls, num_channels, eps=DEFAULT_EPS, momentum=DEFAULT_MOMENTUM):
        return cls(BatchNormState.init(num_channels, eps, momentum))

    def params(self):
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def forward(self, x, mode="train", track=True):
        return bn_forward(self.state, x, mode, track)

    def backward(self, cache, g, frozen=False):
        gi, gg, gb = bn_backward(cache, g, frozen=frozen or cache.frozen)
        return gi, {"gamma": gg, "beta": gb}


@dataclass
class ReLU:
    kind = "relu"

    def params(self):
        return {}

    def forward(self, x, mode="train", track=True):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, g, frozen=False):
        return g * cache, {}


@dataclass
class SoftmaxCrossEntropyHead:
    """Softmax + cross-entropy; ``reduction`` is ``"mean"`` or ``"sum"``."""

    reduction: str = "mean"
    kind = "head"

    def params(self):
        return {}

    def loss(self, logits, labels):
        labels = np.asarray(labels)
        n, k = logits.shape
        if labels.shape != (n,):
            raise ShapeError(f"{n} logits rows but {labels.shape} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        log_p = shifted - log_z[:, None]
        per_sample = -log_p[np.arange(n), labels]
        probs = np.exp(log_p)
        return per_sample, probs

    def grad_per_sample(self, probs, labels):
        """Row i is the gradient of the i-th sample's own loss."""
        g = probs.copy()
        g[np.arange(len(labels)), labels] -= 1.0
        return g
