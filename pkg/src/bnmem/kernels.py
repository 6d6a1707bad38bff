"""Sequential margin-dynamics loops: numba kernels and numpy fallbacks.

The fallbacks vectorize across problem instances instead of time steps,
so a batch of 100 integrations is one numpy loop over steps.
"""

import math

import numpy as np

from ._accel import njit, pick


@njit
def _phi_neg_nb(m):
    # 1 / (1 + e^m), evaluated without overflow on either side
    if m > 0.0:
        e = math.exp(-m)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(m))


def phi_neg(m):
    """``sigmoid(-m)`` elementwise for arrays or scalars."""
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(-np.abs(m))
    return np.where(m > 0, e / (1.0 + e), 1.0 / (1.0 + e))


# -- discrete map m <- m + c * phi(-m) ----------------------------------------

@njit
def _discrete_nb(m0, c, steps):
    out = np.empty(steps + 1)
    m = m0
    out[0] = m
    for k in range(steps):
        m = m + c * _phi_neg_nb(m)
        out[k + 1] = m
    return out


def _discrete_np(m0, c, steps):
    out = np.empty(steps + 1)
    m = float(m0)
    out[0] = m
    for k in range(steps):
        m = m + c * float(phi_neg(m))
        out[k + 1] = m
    return out


@njit
def _first_crossing_nb(m0, c, target, steps_max):
    # returns (steps, margin at stop, strictly increasing so far)
    out_steps = np.full(c.shape[0], -1, dtype=np.int64)
    out_m = np.empty(c.shape[0])
    mono = np.ones(c.shape[0], dtype=np.bool_)
    for j in range(c.shape[0]):
        m = m0[j]
        k = 0
        while True:
            if m >= target[j]:
                out_steps[j] = k
                break
            if k == steps_max:
                break
            nxt = m + c[j] * _phi_neg_nb(m)
            if not nxt > m:
                mono[j] = False
            m = nxt
            k += 1
        out_m[j] = m
    return out_steps, out_m, mono


def _first_crossing_np(m0, c, target, steps_max):
    m = np.array(m0, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    steps = np.full(m.shape, -1, dtype=np.int64)
    mono = np.ones(m.shape, dtype=bool)
    active = np.ones(m.shape, dtype=bool)
    for k in range(steps_max + 1):
        hit = active & (m >= target)
        steps[hit] = k
        active &= ~hit
        if k == steps_max or not active.any():
            break
        nxt = m + c * phi_neg(m)
        mono &= ~active | (nxt > m)
        m = np.where(active, nxt, m)
    return steps, m, mono


# -- RK4 on dm/dt = c * phi(-m) -------------------------------------------------

@njit
def _rk4_step_nb(m, c, h):
    k1 = c * _phi_neg_nb(m)
    k2 = c * _phi_neg_nb(m + 0.5 * h * k1)
    k3 = c * _phi_neg_nb(m + 0.5 * h * k2)
    k4 = c * _phi_neg_nb(m + h * k3)
    return m + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit
def _rk4_time_to_nb(c, m0, target, h):
    out = np.empty(c.shape[0])
    for j in range(c.shape[0]):
        m = m0[j]
        t = 0.0
        while True:
            nxt = _rk4_step_nb(m, c[j], h)
            if nxt >= target[j]:
                # linear interpolation inside the crossing step
                out[j] = t + h * (target[j] - m) / (nxt - m)
                break
            m = nxt
            t += h
    return out


def _rk4_step_np(m, c, h):
    k1 = c * phi_neg(m)
    k2 = c * phi_neg(m + 0.5 * h * k1)
    k3 = c * phi_neg(m + 0.5 * h * k2)
    k4 = c * phi_neg(m + h * k3)
    return m + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_time_to_np(c, m0, target, h):
    c = np.asarray(c, dtype=np.float64)
    m = np.array(m0, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    out = np.full(m.shape, np.nan)
    active = np.ones(m.shape, dtype=bool)
    k = 0
    while active.any():
        nxt = _rk4_step_np(m, c, h)
        hit = active & (nxt >= target)
        out[hit] = k * h + h * (target[hit] - m[hit]) / (nxt[hit] - m[hit])
        active &= ~hit
        m = np.where(active, nxt, m)
        k += 1
    return out


@njit
def _rk4_margin_at_nb(c, m0, t_end, h):
    out = np.empty(c.shape[0])
    for j in range(c.shape[0]):
        n = int(t_end[j] / h)
        m = m0[j]
        for _ in range(n):
            m = _rk4_step_nb(m, c[j], h)
        rest = t_end[j] - n * h
        if rest > 0.0:
            m = _rk4_step_nb(m, c[j], rest)
        out[j] = m
    return out


def _rk4_margin_at_np(c, m0, t_end, h):
    c = np.asarray(c, dtype=np.float64)
    m = np.array(m0, dtype=np.float64)
    t_end = np.asarray(t_end, dtype=np.float64)
    n = (t_end / h).astype(np.int64)
    for k in range(int(n.max()) if n.size else 0):
        m = np.where(k < n, _rk4_step_np(m, c, h), m)
    rest = t_end - n * h
    return np.where(rest > 0, _rk4_step_np(m, c, np.maximum(rest, 0.0)), m)


# -- coupled (margin, gamma) recursion -------------------------------------------

@njit
def _coupled_nb(m0, gamma0, a, t_dev, y, sigma, eta, x_norm_sq, steps_max, window, tol):
    margin = np.empty(steps_max + 1)
    gamma = np.empty(steps_max + 1)
    dgam = np.empty(steps_max)
    margin[0] = m0
    gamma[0] = gamma0
    n = steps_max
    for k in range(steps_max):
        p = _phi_neg_nb(margin[k])
        s = a * gamma[k] / sigma
        dgam[k] = eta * p * y * a * t_dev
        gamma[k + 1] = gamma[k] + dgam[k]
        margin[k + 1] = margin[k] + eta * p * s * s * x_norm_sq
        if k + 1 >= window and abs(gamma[k + 1] - gamma[k + 1 - window]) < tol:
            n = k + 1
            break
    return margin[: n + 1], gamma[: n + 1], dgam[:n]


def _coupled_np(m0, gamma0, a, t_dev, y, sigma, eta, x_norm_sq, steps_max, window, tol):
    margin = [float(m0)]
    gamma = [float(gamma0)]
    dgam = []
    for k in range(steps_max):
        p = float(phi_neg(margin[k]))
        s = a * gamma[k] / sigma
        dgam.append(eta * p * y * a * t_dev)
        gamma.append(gamma[k] + dgam[k])
        margin.append(margin[k] + eta * p * s * s * x_norm_sq)
        if k + 1 >= window and abs(gamma[k + 1] - gamma[k + 1 - window]) < tol:
            break
    return np.array(margin), np.array(gamma), np.array(dgam)


discrete_kernel = pick(_discrete_nb, _discrete_np)
first_crossing_kernel = pick(_first_crossing_nb, _first_crossing_np)
rk4_time_to_kernel = pick(_rk4_time_to_nb, _rk4_time_to_np)
rk4_margin_at_kernel = pick(_rk4_margin_at_nb, _rk4_margin_at_np)
coupled_kernel = pick(_coupled_nb, _coupled_np)

KERNEL_PAIRS = {
    "discrete": (_discrete_nb, _discrete_np),
    "first_crossing": (_first_crossing_nb, _first_crossing_np),
    "rk4_time_to": (_rk4_time_to_nb, _rk4_time_to_np),
    "rk4_margin_at": (_rk4_margin_at_nb, _rk4_margin_at_np),
    "coupled": (_coupled_nb, _coupled_np),
}
