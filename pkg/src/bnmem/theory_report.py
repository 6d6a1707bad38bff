"""Runs every single-channel invariant on seeded random draws.

Each check returns a :class:`CheckResult` with the worst residual seen and
a pass flag at the check's tolerance. ``run_all`` drives the ``theory``
subcommand.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import theory as T
from .rng import Xoshiro256


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float
    tolerance: float
    cases: int
    note: str = ""

    def to_dict(self):
        d = asdict(self)
        for k in ("residual", "tolerance"):
            if not math.isfinite(d[k]):
                d[k] = repr(d[k])
        return d


def _rng(seed, name):
    return Xoshiro256.derived(seed, "theory", name)


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def draw_params(rng, d=4, use_bn=True):
    w = rng.normal(d)
    a = float(rng.uniform(0.2, 2.0, 1)[0]) * (1 if rng.coins(1)[0] else -1)
    return T.SingleChannelParams(
        w=w, b=float(rng.normal(1)[0]), a=a, c_head=float(rng.normal(1)[0]),
        gamma=float(rng.uniform(0.2, 5.0, 1)[0]), beta=float(rng.normal(1)[0]), use_bn=use_bn,
    )


def check_amplification(seed, cases=1000):
    rng = _rng(seed, "amplification")
    worst = 0.0
    for _ in range(cases):
        g, sig, a, eta, x2 = rng.uniform(0.05, 10.0, 5)
        m = float(rng.uniform(-20, 20, 1)[0])
        st = T.SingleChannelState(0.0, sig, m, 0.0, np.zeros(1), 1)
        bn = T.SingleChannelParams(w=[0.0], a=a, gamma=g, use_bn=True)
        nobn = T.SingleChannelParams(w=[0.0], a=a, gamma=g, use_bn=False)
        ratio = T.margin_step(st, bn, eta, x2) / T.margin_step(st, nobn, eta, x2)
        worst = max(worst, _rel(ratio, T.amplification_ratio(g, sig)))
    return CheckResult("amplification_exact", bool(worst <= 1e-12), worst, 1e-12, cases)


def check_margin_step_engine(seed, cases=100):
    rng = _rng(seed, "margin-engine")
    worst = 0.0
    for _ in range(cases):
        p = draw_params(rng, use_bn=bool(rng.coins(1)[0]))
        x = rng.normal(len(p.w))
        mu = float(rng.normal(1)[0])
        sig = float(rng.uniform(0.3, 3.0, 1)[0])
        st = T.tail_state(p, x, 1 if rng.coins(1)[0] else -1, mu, sig)
        eta = 1e-3
        worst = max(worst, abs(T.margin_step(st, p, eta) - T.replica_margin_step(p, st, eta)))
    # one w step moves the logit along the gradient exactly; the O(eta^2)
    # term vanishes because z is linear in w
    return CheckResult("margin_step_vs_engine", bool(worst <= 1e-10), worst, 1e-10, cases)


def check_gamma_gradient(seed, cases=200):
    rng = _rng(seed, "gamma-grad")
    worst = 0.0
    h = 1e-6
    for _ in range(cases):
        hi, mu, c = rng.normal(3)
        sig = float(rng.uniform(0.3, 3.0, 1)[0])
        a = float(rng.uniform(0.2, 2.0, 1)[0])
        g, beta = float(rng.uniform(0.2, 3.0, 1)[0]), float(rng.normal(1)[0])
        y = 1 if rng.coins(1)[0] else -1

        def loss(gam):
            z = a * (gam * (hi - mu) / sig + beta) + c
            return math.log1p(math.exp(-y * z)) if -y * z < 30 else -y * z

        z = a * (g * (hi - mu) / sig + beta) + c
        fd = (loss(g + h) - loss(g - h)) / (2 * h)
        an = T.gamma_gradient(hi, mu, sig, a, y, z)
        if abs(an) > 1e-6:
            worst = max(worst, _rel(an, fd))
    return CheckResult("gamma_gradient_fd", bool(worst <= 1e-6), worst, 1e-6, cases)


def check_time_to_memorize(seed, cases=100, h=1e-4):
    rng = _rng(seed, "ttm")
    c = rng.uniform(0.5, 5.0, cases)
    m0 = rng.uniform(-4.0, 2.0, cases)
    target = m0 + rng.uniform(0.5, 4.0, cases)
    closed = np.array([T.time_to_memorize(ci, mi, Mi) for ci, mi, Mi in zip(c, m0, target)])
    num = T.integrate_time_to(c, m0, target, h)
    worst = float(np.max(np.abs(num - closed) / closed))
    return CheckResult("time_to_memorize_vs_rk4", bool(worst <= 1e-4), worst, 1e-4, cases)


def check_scale_law(seed, cases=200):
    rng = _rng(seed, "scale")
    worst = 0.0
    for _ in range(cases):
        c, k = rng.uniform(0.01, 10.0, 2)
        m0 = float(rng.uniform(-5, 5, 1)[0])
        M = m0 + float(rng.uniform(0.1, 10, 1)[0])
        worst = max(worst, _rel(T.time_to_memorize(c, m0, M) / T.time_to_memorize(k * c, m0, M), k))
    return CheckResult("time_scale_law", bool(worst <= 1e-12), worst, 1e-12, cases)


def check_discrete_divergence(seed, cases=200, target=20.0, steps_max=100_000, m0=0.0):
    rng = _rng(seed, "divergence")
    c = rng.uniform(0.01, 10.0, cases)
    steps, final, mono = T.steps_to_reach(m0, c, target, steps_max)
    crossed = steps >= 0
    note = f"crossed {int(crossed.sum())}/{cases}; strictly increasing {int(mono.sum())}/{cases}"
    return CheckResult("discrete_divergence", bool(mono.all() and crossed.all()),
                       float(max(target - final.min(), 0.0)), 0.0, cases, note)


def check_coupled(seed, cases=20):
    rng = _rng(seed, "coupled")
    worst_eq, ok_mono, ok_limit, worst_tel = 0.0, True, True, 0.0
    for _ in range(cases):
        a = float(rng.uniform(0.5, 2.0, 1)[0])
        t = float(rng.uniform(1.5, 4.0, 1)[0])
        sig = float(rng.uniform(0.2, 0.9, 1)[0])
        st = T.SingleChannelState(0.0, sig, float(rng.uniform(-3, 0, 1)[0]), t, np.array([1.0, 1.0]), 1)
        p = T.SingleChannelParams(w=[0.0, 0.0], a=a, gamma=1.0)
        traj = T.coupled_dynamics(st, p, T.DynamicsConfig(eta=0.5, steps_max=100_000))
        expect = 0.5 * T.phi_neg(traj.margin[:-1]) * abs(a) * abs(t)
        worst_eq = max(worst_eq, float(np.max(np.abs(traj.delta_gamma - expect))))
        ok_mono &= bool(np.all(np.diff(traj.amplification) >= 0))
        ok_limit &= bool(traj.gamma[-1] / sig > 1 and traj.delta_gamma[-1] < traj.delta_gamma[0])
        worst_tel = max(worst_tel, abs(traj.delta_gamma.sum() - (traj.gamma[-1] - traj.gamma[0])))
    ok = worst_eq <= 1e-12 and ok_mono and ok_limit and worst_tel <= 1e-12
    note = f"delta-gamma residual {worst_eq:.3g}; telescoping {worst_tel:.3g}; amplification monotone {ok_mono}; limit {ok_limit}"
    return CheckResult("coupled_dynamics", bool(ok), float(max(worst_eq, worst_tel)), 1e-12, cases, note)


def check_grad_norm_bridge(seed, cases=100):
    rng = _rng(seed, "bridge")
    worst = 0.0
    for _ in range(cases):
        p = draw_params(rng)
        q = T.SingleChannelParams(p.w, p.b, p.a, p.c_head, p.gamma, p.beta, use_bn=False)
        x = rng.normal(len(p.w))
        y = 1 if rng.coins(1)[0] else -1
        mu = float(rng.normal(1)[0])
        sig = float(rng.uniform(0.3, 3.0, 1)[0])
        sim = T.replica_weight_grad_sq(p, x, y, mu, sig) / T.replica_weight_grad_sq(q, x, y, mu, sig)
        th = T.grad_norm_ratio(T.logit(p, x, mu, sig), T.logit(q, x, mu, sig), y, p.gamma, sig)
        worst = max(worst, _rel(sim, th))
    return CheckResult("grad_norm_ratio_vs_engine", bool(worst <= 1e-6), worst, 1e-6, cases)


def check_post_regime(seed, cases=20):
    rng = _rng(seed, "post")
    worst = 0.0
    for _ in range(cases):
        c = float(rng.uniform(0.5, 2.0, 1)[0])
        t_end = float(rng.uniform(200.0, 400.0, 1)[0])
        exact = float(T.integrate_margin(c, 4.0, t_end, 1e-2)[0])
        worst = max(worst, _rel(T.asymptotic_margin(c, 4.0, t_end, T.POST), exact))
    return CheckResult("post_regime_vs_ode", bool(worst <= 0.02), worst, 0.02, cases)


def check_post_gap(seed, cases=20):
    rng = _rng(seed, "gap")
    worst = 0.0
    for _ in range(cases):
        ratio = float(rng.uniform(2.0, 6.0, 1)[0])
        c = float(rng.uniform(0.5, 2.0, 1)[0])
        t_end = 1e6
        gap = T.asymptotic_margin(ratio ** 2 * c, 4.0, t_end, T.POST) - T.asymptotic_margin(c, 4.0, t_end, T.POST)
        worst = max(worst, _rel(gap, 2 * math.log(ratio)))
    return CheckResult("post_regime_gap", bool(worst <= 0.05), worst, 0.05, cases)


ALL_CHECKS = (
    check_amplification, check_margin_step_engine, check_gamma_gradient, check_time_to_memorize,
    check_scale_law, check_discrete_divergence, check_coupled, check_grad_norm_bridge,
    check_post_regime, check_post_gap,
)


def run_all(seed=0):
    return [chk(seed) for chk in ALL_CHECKS]


def example_trajectory(seed=0):
    """An aligned coupled run for CSV export."""
    st = T.SingleChannelState(0.0, 0.5, -2.0, 3.0, np.array([1.0, 1.0]), 1)
    p = T.SingleChannelParams(w=[0.0, 0.0], a=1.0, gamma=1.0)
    return T.coupled_dynamics(st, p, T.DynamicsConfig(eta=0.5, steps_max=100_000))
