"""Single-channel model of BN margin amplification.

A channel computes ``h = w.x + b``; the no-BN logit is ``z = a h + c`` and
the BN logit is ``z = a (gamma (h - mu) / sigma + beta) + c`` with
``(mu, sigma)`` held fixed within a step. The effective slope of ``z`` in
``h`` is ``a`` or ``a gamma / sigma``. Labels are +-1 with logistic loss.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    coupled_kernel,
    discrete_kernel,
    first_crossing_kernel,
    phi_neg,
    rk4_margin_at_kernel,
    rk4_time_to_kernel,
)
from .nn.layers import BatchNorm, BatchNormState, Dense, SoftmaxCrossEntropyHead
from .nn.network import EVAL, Network

REGIME_THRESHOLD = 4.0
PRE = "pre"
POST = "post"


def sigmoid(u):
    return phi_neg(-np.asarray(u, dtype=np.float64))


def _finite(*vals):
    for v in vals:
        if isinstance(v, float) and math.isfinite(v):
            continue
        if not np.all(np.isfinite(v)):
            raise ValueError("inputs must be finite")


@dataclass
class SingleChannelParams:
    w: np.ndarray
    b: float = 0.0
    a: float = 1.0
    c_head: float = 0.0
    gamma: float = 1.0
    beta: float = 0.0
    use_bn: bool = True

    def __post_init__(self):
        self.w = np.atleast_1d(np.asarray(self.w, dtype=np.float64))


@dataclass
class SingleChannelState:
    mu: float
    sigma: float
    margin: float
    t_dev: float
    x_star: np.ndarray = field(repr=False)
    y_star: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.y_star not in (-1, 1):
            raise ValueError("y_star must be +1 or -1")


def preactivation(params, x):
    return float(params.w @ np.asarray(x, dtype=np.float64) + params.b)


def logit(params, x, mu, sigma):
    h = preactivation(params, x)
    if params.use_bn:
        _check_sigma(sigma)
        return params.a * (params.gamma * (h - mu) / sigma + params.beta) + params.c_head
    return params.a * h + params.c_head


def tail_state(params, x_star, y_star, mu, sigma):
    """State of the tail sample; ``t`` is read off ``h* = mu + t sigma``."""
    x_star = np.asarray(x_star, dtype=np.float64)
    h = preactivation(params, x_star)
    _check_sigma(sigma)
    return SingleChannelState(mu, sigma, y_star * logit(params, x_star, mu, sigma), (h - mu) / sigma, x_star, y_star)


def _check_sigma(sigma):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")


def effective_slope(params, sigma=None):
    """``a`` without BN, ``a gamma / sigma`` with it."""
    if not params.use_bn:
        return params.a
    _check_sigma(sigma)
    return params.a * params.gamma / sigma


def margin_step(state, params, eta, x_norm_sq=None):
    """Margin gain ``eta * phi(-m) * s^2 * ||x*||^2`` of one w-only step."""
    if x_norm_sq is None:
        x_norm_sq = float(state.x_star @ state.x_star)
    _finite(state.margin, eta, x_norm_sq)
    s = effective_slope(params, state.sigma)
    return float(eta * phi_neg(state.margin) * s * s * x_norm_sq)


def amplification_ratio(gamma, sigma):
    """BN / no-BN per-step margin gain, ``(gamma / sigma)^2``."""
    _check_sigma(sigma)
    return (gamma / sigma) ** 2


def gamma_gradient(h_i, mu, sigma, a, y_i, z_i):
    """d loss_i / d gamma = -y phi(-y z) a (h - mu) / sigma."""
    _check_sigma(sigma)
    if y_i not in (-1, 1):
        raise ValueError("y_i must be +1 or -1")
    return float(-y_i * phi_neg(y_i * z_i) * a * (h_i - mu) / sigma)


def grad_norm_ratio(z_bn, z_nobn, y, gamma, sigma):
    """Influence ratio ``||grad_w||^2`` BN over no-BN on the same sample."""
    _check_sigma(sigma)
    return float((phi_neg(y * z_bn) / phi_neg(y * z_nobn)) ** 2 * (gamma / sigma) ** 2)


@dataclass
class DynamicsConfig:
    eta: float
    steps_max: int = 100_000
    c_eff: float = None
    target_margin: float = None
    window: int = 100
    tol: float = 1e-9

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.c_eff is not None and not self.c_eff > 0:
            raise ValueError("c_eff must be positive")
        if self.steps_max < 1:
            raise ValueError("steps_max must be positive")


@dataclass
class CoupledTrajectory:
    margin: np.ndarray  # m_0 .. m_n
    gamma: np.ndarray  # gamma_0 .. gamma_n
    delta_gamma: np.ndarray  # gamma_{k+1} - gamma_k, length n
    sigma: float
    aligned: bool
    converged: bool

    @property
    def amplification(self):
        return (self.gamma / self.sigma) ** 2

    @property
    def steps(self):
        return len(self.delta_gamma)

    def write_csv(self, path):
        amp = self.amplification
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "margin", "gamma", "delta_gamma", "amplification"])
            for k in range(len(self.margin)):
                dg = repr(float(self.delta_gamma[k])) if k < self.steps else ""
                w.writerow([k, repr(float(self.margin[k])), repr(float(self.gamma[k])), dg, repr(float(amp[k]))])


def coupled_dynamics(state, params, config):
    """Joint gradient descent on the tail sample's margin and on gamma.

    Per step, with ``p = phi(-m_k)`` and ``s_k = a gamma_k / sigma``::

        gamma_{k+1} = gamma_k + eta p y* a t
        m_{k+1}     = m_k + eta p s_k^2 ||x*||^2

    sigma and t stay fixed. The guarantees (monotone gamma, non-decreasing
    amplification) need ``y* a t > 0``; otherwise ``aligned`` is False and
    the recursion still runs. Stops early once gamma moves less than
    ``tol`` over ``window`` steps.
    """
    if not params.use_bn:
        raise ValueError("coupled dynamics need the BN model")
    _check_sigma(state.sigma)
    aligned = state.y_star * params.a * state.t_dev > 0
    x2 = float(state.x_star @ state.x_star)
    m, g, dg = coupled_kernel(
        float(state.margin), float(params.gamma), float(params.a), float(state.t_dev), float(state.y_star),
        float(state.sigma), float(config.eta), x2, int(config.steps_max), int(config.window), float(config.tol),
    )
    converged = len(dg) < config.steps_max
    return CoupledTrajectory(m, g, dg, state.sigma, bool(aligned), bool(converged))


def discrete_trajectory(m0, c_eff, steps):
    """``m_{k+1} = m_k + c phi(-m_k)`` for ``steps`` steps (includes m_0)."""
    if not c_eff > 0:
        raise ValueError("c_eff must be positive")
    return discrete_kernel(float(m0), float(c_eff), int(steps))


def steps_to_reach(m0, c_eff, target, steps_max=100_000):
    """First step index where the discrete margin reaches ``target``.

    Vectorized over its arguments. Returns ``(steps, final_margin,
    strictly_increasing)``; ``steps`` is -1 where ``steps_max`` ran out.
    """
    c = np.atleast_1d(np.asarray(c_eff, dtype=np.float64))
    m0 = np.broadcast_to(np.asarray(m0, dtype=np.float64), c.shape).copy()
    target = np.broadcast_to(np.asarray(target, dtype=np.float64), c.shape).copy()
    if np.any(c <= 0):
        raise ValueError("c_eff must be positive")
    return first_crossing_kernel(m0, c, target, int(steps_max))


def time_to_memorize(c_eff, m0, target):
    """Continuous time for ``dm/dt = c phi(-m)`` to carry m0 to ``target``.

    Closed form ``((M + e^M) - (m0 + e^m0)) / c``.
    """
    if not c_eff > 0:
        raise ValueError("c_eff must be positive")
    if not target > m0:
        raise ValueError("target margin must exceed the initial margin")
    return ((target + math.exp(target)) - (m0 + math.exp(m0))) / c_eff


def integrate_time_to(c_eff, m0, target, h=1e-4):
    """RK4 estimate of the same travel time (vectorized)."""
    c = np.atleast_1d(np.asarray(c_eff, dtype=np.float64))
    m0 = np.broadcast_to(np.asarray(m0, dtype=np.float64), c.shape).copy()
    target = np.broadcast_to(np.asarray(target, dtype=np.float64), c.shape).copy()
    return rk4_time_to_kernel(c, m0, target, float(h))


def integrate_margin(c_eff, m0, t_end, h=1e-4):
    """RK4 margin at time ``t_end`` (vectorized)."""
    c = np.atleast_1d(np.asarray(c_eff, dtype=np.float64))
    m0 = np.broadcast_to(np.asarray(m0, dtype=np.float64), c.shape).copy()
    t_end = np.broadcast_to(np.asarray(t_end, dtype=np.float64), c.shape).copy()
    return rk4_margin_at_kernel(c, m0, t_end, float(h))


def asymptotic_margin(c_eff, m0, t, regime):
    """Regime approximations: linear ``m0 + c t`` when m0 <= -4,
    logarithmic ``log(c t + e^m0)`` when m0 >= 4."""
    if not c_eff > 0:
        raise ValueError("c_eff must be positive")
    if regime == PRE:
        if m0 > -REGIME_THRESHOLD:
            raise ValueError(f"pre-saturation regime needs m0 <= -{REGIME_THRESHOLD}")
        return m0 + c_eff * t
    if regime == POST:
        if m0 < REGIME_THRESHOLD:
            raise ValueError(f"post-saturation regime needs m0 >= {REGIME_THRESHOLD}")
        return math.log(c_eff * t + math.exp(m0))
    raise ValueError(f"unknown regime {regime!r}")


# -- engine replica ---------------------------------------------------------------

def engine_replica(params, mu, sigma):
    """The single channel as an nn-core network.

    Dense(d->1) -> [BatchNorm(1) in Eval mode on (mu, sigma^2)] ->
    Dense(1->2) with logits ``(0, a u + c)``, so softmax cross-entropy on
    class ``(y+1)/2`` equals ``log(1 + exp(-y z))``.
    """
    d = len(params.w)
    layers = [Dense(params.w.reshape(1, d).copy(), np.array([float(params.b)]))]
    if params.use_bn:
        # eps far below sigma^2 so sqrt(var + eps) == sigma in float64
        state = BatchNormState(
            np.array([float(params.gamma)]), np.array([float(params.beta)]),
            np.array([float(mu)]), np.array([float(sigma) ** 2]), eps=1e-300, momentum=0.1,
        )
        layers.append(BatchNorm(state))
    layers.append(Dense(np.array([[0.0], [float(params.a)]]), np.array([0.0, float(params.c_head)])))
    layers.append(SoftmaxCrossEntropyHead())
    return Network(layers, mode=EVAL)


def replica_label(y):
    return np.array([1 if y > 0 else 0])


def replica_margin(net, x, y):
    z = net.logits(np.atleast_2d(x), mode=EVAL)
    return float(y * (z[0, 1] - z[0, 0]))


def replica_margin_step(params, state, eta):
    """Margin change after one literal w-only gradient step in the engine."""
    net = engine_replica(params, state.mu, state.sigma)
    x = state.x_star.reshape(1, -1)
    before = replica_margin(net, x, state.y_star)
    _, _, caches = net.forward(x, replica_label(state.y_star), mode=EVAL)
    grads = net.backward(caches)
    net.layers[0].weight -= eta * grads[0]["weight"]
    return replica_margin(net, x, state.y_star) - before


def replica_weight_grad_sq(params, x, y, mu, sigma):
    """``||d loss / d w||^2`` of one sample in the engine replica."""
    net = engine_replica(params, mu, sigma)
    norms = net.per_sample_grad_norms(np.atleast_2d(x), replica_label(y), mode=EVAL, first_layer_only=True)
    return float(norms[0] ** 2)
