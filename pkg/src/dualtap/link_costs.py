"""Per-edge convex analysis for the two cost regimes.

Exponent convention: the BPR travel time uses ``power`` (4 in practice),
``tau(f) = t0 * (1 + gamma * (f / cap) ** power)``, and the conjugate
is written with ``mu = 1 / power``. The composite proximal step

    argmin_{t >= t0}  step * (g * t + sigma_conj(t)) + (t - t_k) ** 2 / 2

has a closed form on stable-dynamics edges. On BPR edges the substitution
``y = ((t - t0) / (t0 * gamma)) ** mu`` turns its stationarity condition into

    t0 * gamma * y ** power + step * cap * y + (t0 - t_k + step * g) = 0,

a depressed quartic when ``power == 4`` (solved by Ferrari's method) and
a monotone scalar equation otherwise (safeguarded Newton).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, RegimeMismatch
from .network import Bpr, CostRegime, StableDynamics

DOMAIN_RTOL = 1e-12


def _domain_excess(t, free_time):
    """``t - free_time`` clamped to zero inside the drift tolerance."""
    x = np.asarray(t, dtype=float) - free_time
    tol = DOMAIN_RTOL * np.maximum(1.0, free_time)
    if np.any(x < -tol):
        raise DomainError("toll below the free-flow time (outside dom sigma*)")
    return np.maximum(x, 0.0)


# -- scalar API ---------------------------------------------------------------

def tau(regime: CostRegime, f: float) -> float:
    """Travel time on a BPR edge at flow ``f``."""
    if isinstance(regime, StableDynamics):
        raise RegimeMismatch("stable-dynamics edges have no single-valued travel time")
    r = regime
    return r.free_time * (1.0 + r.gamma * (f / r.capacity) ** r.power)


def sigma(regime: CostRegime, f: float) -> float:
    """Primal potential ``integral_0^f tau``; linear ``t0 * f`` on stable edges."""
    if isinstance(regime, StableDynamics):
        return regime.free_time * f
    r = regime
    return r.free_time * f * (1.0 + r.gamma / (1.0 + r.power) * (f / r.capacity) ** r.power)


def sigma_conj(regime: CostRegime, t: float) -> float:
    """Fenchel conjugate of :func:`sigma` on ``t >= free_time``."""
    x = float(_domain_excess(t, regime.free_time))
    if isinstance(regime, StableDynamics):
        return regime.capacity * x
    r = regime
    mu = 1.0 / r.power
    return r.capacity * (x / (r.free_time * r.gamma)) ** mu * x / (1.0 + mu)


def sigma_conj_prime(regime: CostRegime, t: float) -> float:
    """Derivative of :func:`sigma_conj`; on BPR edges the inverse of :func:`tau`."""
    x = float(_domain_excess(t, regime.free_time))
    if isinstance(regime, StableDynamics):
        return regime.capacity
    r = regime
    return r.capacity * (x / (r.free_time * r.gamma)) ** (1.0 / r.power)


def solve_depressed_quartic_nonneg(p: float, q: float) -> float:
    """Nonnegative root of ``y**4 + p*y + q`` for ``p >= 0``; 0 when ``q > 0``."""
    return float(depressed_quartic_root(np.array([p], float), np.array([q], float))[0])


@dataclass(frozen=True)
class ProxInput:
    regime: CostRegime
    t_current: float
    g: float
    gamma_step: float


def prox_step(inp: ProxInput) -> float:
    """Exact composite proximal step for one edge."""
    r = inp.regime
    if isinstance(r, StableDynamics):
        return max(r.free_time, inp.t_current - inp.gamma_step * (inp.g + r.capacity))
    a = r.free_time * r.gamma
    b = inp.gamma_step * r.capacity
    c = r.free_time - inp.t_current + inp.gamma_step * inp.g
    if r.power == 4.0:
        y = solve_depressed_quartic_nonneg(b / a, c / a)
    else:
        y = _monotone_root(a, r.power, b, c)
    return r.free_time + a * y ** r.power


# -- quartic ------------------------------------------------------------------

def depressed_quartic_root(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Vectorised nonnegative root of ``y**4 + p*y + q = 0`` with ``p >= 0``.

    Ferrari: with ``m`` the (unique, positive) real root of the resolvent
    cubic ``m**3 - q*m - p**2/8``, the quartic splits into two quadratics
    and the nonnegative root belongs to ``y**2 + s*y + m - p/(2s)``,
    ``s = sqrt(2m)``. Coefficients are rescaled to O(1) first and the root
    gets two Newton polishing steps against cancellation when ``q -> 0-``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    y = np.zeros(np.broadcast(p, q).shape)
    p, q = np.broadcast_to(p, y.shape), np.broadcast_to(q, y.shape)
    live = q < 0
    if not live.any():
        return y
    pl, ql = p[live], q[live]
    lam = np.maximum((-ql) ** 0.25, np.cbrt(pl))
    ps = pl / lam ** 3
    qs = ql / lam ** 4

    z = np.empty_like(ps)
    pure = ps == 0
    z[pure] = (-qs[pure]) ** 0.25
    gen = ~pure
    if gen.any():
        pg, qg = ps[gen], qs[gen]
        # resolvent m**3 + P*m - p**2/8 = 0, P = -q >= 0: one real root
        P = -qg
        A = pg * pg / 16.0
        u = np.cbrt(A + np.sqrt(A * A + (P / 3.0) ** 3))
        v = P / (3.0 * u)
        m = (pg * pg / 8.0) / (u * u + P / 3.0 + v * v)
        s = np.sqrt(2.0 * m)
        num = pg / s - 2.0 * m
        z[gen] = num / (s + np.sqrt(2.0 * (pg / s - m)))

    for _ in range(2):
        h = z ** 4 + ps * z + qs
        dh = 4.0 * z ** 3 + ps
        ok = dh > 0
        z = np.where(ok, np.maximum(z - np.where(ok, h / np.where(ok, dh, 1.0), 0.0), 0.0), z)
    y[live] = lam * z
    return y


def _monotone_root(a: float, power: float, b: float, c: float) -> float:
    """Root ``y >= 0`` of ``a*y**power + b*y + c`` (increasing on y >= 0)."""
    if c >= 0:
        return 0.0
    h = lambda y: a * y ** power + b * y + c
    lo, hi = 0.0, 1.0
    while h(hi) < 0:
        lo, hi = hi, 2.0 * hi
    y = 0.5 * (lo + hi)
    for _ in range(200):
        hy = h(y)
        if hy == 0:
            return y
        if hy < 0:
            lo = y
        else:
            hi = y
        dh = a * power * y ** (power - 1) + b
        step = y - hy / dh if dh > 0 else lo
        y = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 4e-16 * max(1.0, hi):
            break
    return y


# -- array API (one entry per edge, arrays taken from a Network) --------------

def tau_array(net, f: np.ndarray) -> np.ndarray:
    """Edge costs at flow ``f``: BPR travel time, or ``free_time`` on stable edges."""
    f = np.asarray(f, dtype=float)
    bpr = net.free_time * (1.0 + net.gamma * (f / net.capacity) ** net.power)
    return np.where(net.stable, net.free_time, bpr)


def sigma_array(net, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    ft = net.free_time * f
    bpr = ft * (1.0 + net.gamma / (1.0 + net.power) * (f / net.capacity) ** net.power)
    return np.where(net.stable, ft, bpr)


def sigma_conj_array(net, t: np.ndarray) -> np.ndarray:
    x = _domain_excess(t, net.free_time)
    out = net.capacity * x
    b = ~net.stable
    if b.any():
        mu = 1.0 / net.power[b]
        out[b] = (net.capacity[b] * (x[b] / (net.free_time[b] * net.gamma[b])) ** mu
                  * x[b] / (1.0 + mu))
    return out


def sigma_conj_prime_array(net, t: np.ndarray) -> np.ndarray:
    x = _domain_excess(t, net.free_time)
    out = net.capacity.copy()
    b = ~net.stable
    if b.any():
        out[b] = net.capacity[b] * (x[b] / (net.free_time[b] * net.gamma[b])) ** (1.0 / net.power[b])
    return out


class ProxPlan:
    """Edge partition and constants for repeated vectorised prox steps."""

    def __init__(self, net):
        self.free_time = net.free_time
        self.capacity = net.capacity
        self.stable = np.flatnonzero(net.stable)
        bpr = ~net.stable
        self.quartic = np.flatnonzero(bpr & (net.power == 4.0))
        self.other = np.flatnonzero(bpr & (net.power != 4.0))
        self.scale = net.free_time * net.gamma
        self.power = net.power
        self._q_cap_over_scale = self.capacity[self.quartic] / self.scale[self.quartic]
        self._q_scale = self.scale[self.quartic]

    def step(self, t_k: np.ndarray, g: np.ndarray, gamma_step: float) -> np.ndarray:
        t0 = self.free_time
        out = np.empty_like(t_k)
        s = self.stable
        if s.size:
            out[s] = np.maximum(t0[s], t_k[s] - gamma_step * (g[s] + self.capacity[s]))
        qi = self.quartic
        if qi.size:
            p = gamma_step * self._q_cap_over_scale
            q = (t0[qi] - t_k[qi] + gamma_step * g[qi]) / self._q_scale
            y = depressed_quartic_root(p, q)
            y2 = y * y
            out[qi] = t0[qi] + self._q_scale * (y2 * y2)
        for e in self.other:
            a = self.scale[e]
            y = _monotone_root(a, self.power[e], gamma_step * self.capacity[e],
                               t0[e] - t_k[e] + gamma_step * g[e])
            out[e] = t0[e] + a * y ** self.power[e]
        return out


def prox_step_array(net, t_k, g, gamma_step) -> np.ndarray:
    return ProxPlan(net).step(np.asarray(t_k, float), np.asarray(g, float), float(gamma_step))
