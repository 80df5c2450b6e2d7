"""KL control of the bit: desirability, optimal protocol, erasing cost.

The desirability ``z = exp(-v)`` solves the linear backward equation
``dz/dt = -K z`` with ``(K z)_i = sum_j k_ij (z_j - z_i)``. For two states
``exp(K s) = Pi + exp(-s / tau_r) (I - Pi)`` where every row of ``Pi`` is the
equilibrium distribution, so everything is available in closed form. The
optimal rates are the Doob transform ``u_ij = k_ij z_j / z_i``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.integrate import solve_ivp

from .chain_core import Distribution, Generator, PassiveRates, equilibrium

LOG2 = math.log(2.0)
ODE_RTOL = 1e-11
ODE_ATOL = 1e-12
ERASE = (1.0, 0.0)
# rate * duration above which a segment is integrated with an implicit method
STIFF_LIMIT = 500.0


class ProtocolError(ValueError):
    """A protocol is malformed or evaluated outside its domain."""


# --------------------------------------------------------------------------
# desirability


class Desirability:
    """Solution of the backward equation on ``[0, tau_e]``.

    ``terminal`` is ``z(tau_e)``. Evaluation is closed form and vectorized
    over ``t``; :meth:`via_expm` gives the matrix-exponential route.
    """

    def __init__(self, rates: PassiveRates, terminal, tau_e: float):
        terminal = np.asarray(terminal, dtype=float)
        if terminal.shape != (2,) or np.any(terminal < 0) or not np.all(np.isfinite(terminal)):
            raise ValueError("terminal must be a finite nonnegative 2-vector")
        if not np.any(terminal > 0):
            raise ValueError("terminal (0, 0) gives z == 0 and infinite cost everywhere")
        if not tau_e > 0:
            raise ValueError("tau_e must be > 0")
        self.rates = rates
        self.tau_e = float(tau_e)
        self.terminal = terminal
        self._mean = float(equilibrium(rates).as_array() @ terminal)

    def __call__(self, t) -> np.ndarray:
        """``z(t)``; shape ``(2,)`` for scalar ``t``, else ``(2, len(t))``."""
        t = np.asarray(t, dtype=float)
        s = self.tau_e - t
        decay = np.exp(-self.rates.total * s)
        growth = -np.expm1(-self.rates.total * s)
        # both terms are nonnegative, so zero terminal entries keep full precision
        zt = self.terminal.reshape((2,) + (1,) * t.ndim)
        return zt * decay + self._mean * growth

    def log(self, t) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self(t))

    def via_expm(self, t: float) -> np.ndarray:
        gen = Generator.two_state(self.rates)
        return gen.propagator(self.tau_e - t) @ self.terminal

    def zero_states(self) -> tuple:
        return tuple(int(i) for i in np.flatnonzero(self.terminal == 0))


def solve_desirability(rates: PassiveRates, terminal, tau_e: float) -> Desirability:
    return Desirability(rates, terminal, tau_e)


class CostToGo(NamedTuple):
    v0: float
    v1: float

    @property
    def unbounded(self) -> tuple:
        """States whose cost-to-go is infinite."""
        return tuple(i for i, v in enumerate(self) if math.isinf(v))


def cost_to_go(z: Desirability, t: float) -> CostToGo:
    if not 0 <= t <= z.tau_e:
        raise ValueError("t must lie in [0, tau_e]")
    zt = z(t)
    return CostToGo(*(math.inf if zi <= 0 else -math.log(zi) for zi in zt))


def expected_cost(z: Desirability, p_init: Distribution) -> float:
    """Optimal KL cost ``sum_i p_i v_i(0)`` of steering ``p_init`` to the terminal."""
    v = cost_to_go(z, 0.0)
    total = 0.0
    for pi, vi in zip(p_init.as_array(), v):
        if pi > 0:
            total += pi * vi
    return total


def erasing_cost(tau_r: float, tau_e: float) -> float:
    """Minimal KL cost (nats) of erasing a symmetric bit from equilibrium."""
    if not tau_r > 0:
        raise ValueError("tau_r must be > 0")
    if not tau_e > 0:
        raise ValueError("tau_e must be > 0; the cost diverges at tau_e = 0")
    x = 2.0 * tau_e / tau_r
    if x > LOG2:
        log_term = math.log1p(-math.exp(-x))
    else:
        log_term = math.log(-math.expm1(-x))
    return LOG2 - 0.5 * log_term


# --------------------------------------------------------------------------
# protocols


class Protocol:
    """Time-dependent control rates ``u01(t), u10(t)`` on ``[0, horizon]``.

    Subclasses provide :meth:`rates` and, where possible, closed-form
    integrated hazards and their inverses. The generic fallbacks use adaptive
    quadrature and bisection.
    """

    horizon: float

    def rates(self, t):
        """Return ``(u01(t), u10(t))``; vectorized over ``t``."""
        raise NotImplementedError

    def log_rates(self, t):
        """``(log u01(t), log u10(t))``; ``-inf`` where a rate vanishes."""
        with np.errstate(divide="ignore"):
            return tuple(np.log(r) for r in self.rates(t))

    def exit_rate(self, state, t):
        u01, u10 = self.rates(t)
        return np.where(np.asarray(state) == 0, u01, u10)

    def log_exit_rate(self, state, t):
        l01, l10 = self.log_rates(t)
        return np.where(np.asarray(state) == 0, l01, l10)

    def breakpoints(self) -> np.ndarray:
        """Times where the rates may fail to be smooth, including both ends."""
        return np.array([0.0, self.horizon])

    def diverges_at_horizon(self, state: int) -> bool:
        """Whether the integrated exit hazard of ``state`` is infinite at the horizon."""
        return False

    def hazard(self, state, t0, t1):
        """Integrated exit rate of ``state`` over ``[t0, t1]``; vectorized."""
        state, t0, t1 = np.broadcast_arrays(np.asarray(state), np.asarray(t0, float), np.asarray(t1, float))
        out = np.empty(state.shape)
        for idx in np.ndindex(state.shape):
            out[idx] = _adaptive_simpson(
                lambda s, i=int(state[idx]): float(self.rates(s)[i]), float(t0[idx]), float(t1[idx]), 1e-10
            )
        return out

    def invert_hazard(self, state, t0, target):
        """Time ``t`` at which the hazard from ``t0`` reaches ``target``.

        Returns ``inf`` where the hazard up to the horizon stays below target.
        """
        state = np.asarray(state)
        t0 = np.asarray(t0, dtype=float)
        target = np.asarray(target, dtype=float)
        total = self.hazard(state, t0, np.full(t0.shape, self.horizon))
        hit = total >= target
        lo = t0.copy()
        hi = np.full(t0.shape, self.horizon)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            h = self.hazard(state[hit], t0[hit], mid[hit]) if np.any(hit) else np.empty(0)
            below = np.zeros(t0.shape, dtype=bool)
            below[hit] = h < target[hit]
            lo = np.where(below, mid, lo)
            hi = np.where(hit & ~below, mid, hi)
        return np.where(hit, hi, np.inf)

    def discretize(self, h: float, n_steps: int) -> np.ndarray:
        """One-step transition kernels ``[N, 2, 2]`` of the clock-tick chain."""
        t = np.arange(n_steps) * h
        u01, u10 = (np.broadcast_to(r, t.shape) for r in self.rates(t))
        a, b = h * u01, h * u10
        if np.any(a > 1) or np.any(b > 1):
            worst = float(max(a.max(), b.max()))
            raise ProtocolError(f"step h={h} too large: h * rate reaches {worst:.4g} > 1")
        kernels = np.empty((n_steps, 2, 2))
        kernels[:, 0, 0] = 1 - a
        kernels[:, 0, 1] = a
        kernels[:, 1, 0] = b
        kernels[:, 1, 1] = 1 - b
        return kernels


class Passive(Protocol):
    """The uncontrolled rates held constant."""

    def __init__(self, rates: PassiveRates, horizon: float):
        if not horizon > 0:
            raise ValueError("horizon must be > 0")
        self.passive = rates
        self.horizon = float(horizon)

    def __repr__(self):
        return f"Passive({self.passive!r}, horizon={self.horizon})"

    def rates(self, t):
        t = np.asarray(t, dtype=float)
        return np.full(t.shape, self.passive.k01), np.full(t.shape, self.passive.k10)

    def _k(self, state):
        return np.where(np.asarray(state) == 0, self.passive.k01, self.passive.k10)

    def hazard(self, state, t0, t1):
        return self._k(state) * (np.asarray(t1, float) - np.asarray(t0, float))

    def invert_hazard(self, state, t0, target):
        t = np.asarray(t0, float) + np.asarray(target, float) / self._k(state)
        return np.where(t <= self.horizon, t, np.inf)


class Grid(Protocol):
    """Piecewise-linear rates through the nodes ``(times, u01, u10)``."""

    def __init__(self, times, u01, u10):
        times = np.asarray(times, dtype=float)
        u01 = np.asarray(u01, dtype=float)
        u10 = np.asarray(u10, dtype=float)
        if times.ndim != 1 or len(times) < 2 or u01.shape != times.shape or u10.shape != times.shape:
            raise ProtocolError("grid needs >= 2 nodes with matching rate arrays")
        if times[0] != 0 or np.any(np.diff(times) <= 0):
            raise ProtocolError("grid times must start at 0 and strictly increase")
        for name, u in (("u01", u01), ("u10", u10)):
            if not np.all(np.isfinite(u)):
                raise ProtocolError(f"{name} has non-finite nodes")
            if np.any(u < 0):
                # linear interpolation between nonnegative nodes stays nonnegative
                bad = float(times[np.argmax(u < 0)])
                raise ProtocolError(f"{name} is negative at t={bad}")
        self.times = times
        self.u = np.vstack([u01, u10])
        self.horizon = float(times[-1])
        seg = np.diff(times)
        cum = np.zeros((2, len(times)))
        cum[:, 1:] = np.cumsum(0.5 * seg * (self.u[:, 1:] + self.u[:, :-1]), axis=1)
        self._cum = cum

    @classmethod
    def constant(cls, u01: float, u10: float, horizon: float) -> "Grid":
        return cls([0.0, horizon], [u01, u01], [u10, u10])

    @classmethod
    def sample(cls, protocol: Protocol, times) -> "Grid":
        u01, u10 = protocol.rates(np.asarray(times, dtype=float))
        return cls(times, u01, u10)

    def __repr__(self):
        return f"Grid(<{len(self.times)} nodes>, horizon={self.horizon})"

    def time_rescaled(self, factor: float) -> "Grid":
        """Protocol ``v(t) = factor * u(factor * t)`` on ``horizon / factor``."""
        return Grid(self.times / factor, factor * self.u[0], factor * self.u[1])

    def breakpoints(self) -> np.ndarray:
        return self.times

    def rates(self, t):
        t = np.asarray(t, dtype=float)
        return np.interp(t, self.times, self.u[0]), np.interp(t, self.times, self.u[1])

    def _cumulative(self, state, t):
        state = np.asarray(state)
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.horizon)
        j = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        t_lo = self.times[j]
        dt = t - t_lo
        width = self.times[j + 1] - t_lo
        r_lo = self.u[state, j]
        slope = (self.u[state, j + 1] - r_lo) / width
        return self._cum[state, j] + r_lo * dt + 0.5 * slope * dt * dt

    def hazard(self, state, t0, t1):
        return self._cumulative(state, t1) - self._cumulative(state, t0)

    def invert_hazard(self, state, t0, target):
        state, t0, target = np.broadcast_arrays(np.asarray(state), np.asarray(t0, float), np.asarray(target, float))
        goal = self._cumulative(state, t0) + target
        cum = self._cum[state]  # (..., n_nodes)
        hit = goal <= cum[..., -1]
        j = np.array([np.searchsorted(c, g, side="left") for c, g in zip(cum.reshape(-1, cum.shape[-1]), goal.ravel())])
        j = np.clip(j.reshape(goal.shape) - 1, 0, len(self.times) - 2)
        rem = goal - np.take_along_axis(cum, j[..., None], axis=-1)[..., 0]
        r_lo = self.u[state, j]
        slope = (self.u[state, j + 1] - r_lo) / (self.times[j + 1] - self.times[j])
        # solve r_lo * x + slope * x^2 / 2 = rem for the smallest x >= 0
        disc = np.maximum(r_lo * r_lo + 2.0 * slope * rem, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.where(
                np.abs(slope) * rem > 1e-14 * np.maximum(r_lo * r_lo, 1e-300),
                2.0 * rem / (r_lo + np.sqrt(disc)),
                rem / r_lo,
            )
        t = np.minimum(self.times[j] + x, self.times[j + 1])
        t = np.maximum(t, t0)
        return np.where(hit, t, np.inf)


class ClosedFormOptimal(Protocol):
    """Doob transform of the passive chain toward the terminal ``z``.

    ``u_ij(t) = k_ij z_j(t) / z_i(t)``. With terminal ``(1, 0)`` this is the
    erasure protocol: ``u01 -> 0`` and ``u10 -> inf`` as ``t -> tau_e``. The
    singular rate is only ever evaluated through ``z`` ratios. ``horizon`` may
    be set below ``tau_e`` to run the protocol on a truncated window.
    """

    def __init__(self, rates: PassiveRates, tau_e: float, terminal=ERASE, horizon: float | None = None):
        self.passive = rates
        self.z = Desirability(rates, terminal, tau_e)
        self.tau_e = self.z.tau_e
        self.horizon = self.tau_e if horizon is None else float(horizon)
        if not 0 < self.horizon <= self.tau_e:
            raise ValueError("horizon must lie in (0, tau_e]")

    @classmethod
    def truncated(cls, rates: PassiveRates, tau_e: float, eps: float) -> "ClosedFormOptimal":
        """Erasure protocol for ``tau_e`` stopped at ``tau_e - eps``."""
        if not 0 < eps < tau_e:
            raise ValueError("eps must lie in (0, tau_e)")
        return cls(rates, tau_e, ERASE, horizon=tau_e - eps)

    def __repr__(self):
        return (
            f"ClosedFormOptimal({self.passive!r}, tau_e={self.tau_e}, "
            f"terminal={tuple(self.z.terminal)}, horizon={self.horizon})"
        )

    def _k(self, state):
        return np.where(np.asarray(state) == 0, self.passive.k01, self.passive.k10)

    def rates(self, t):
        z0, z1 = self.z(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            u01 = self.passive.k01 * z1 / z0
            u10 = self.passive.k10 * z0 / z1
        return u01, u10

    def log_rates(self, t):
        lz = self.z.log(t)
        with np.errstate(invalid="ignore"):
            return (
                math.log(self.passive.k01) + lz[1] - lz[0],
                math.log(self.passive.k10) + lz[0] - lz[1],
            )

    def log_rate_ratio(self, state, t):
        """``log(u_ij / k_ij)`` out of ``state``, i.e. ``log z_j - log z_i``."""
        lz = self.z.log(t)
        state = np.asarray(state)
        return np.where(state == 0, lz[1] - lz[0], lz[0] - lz[1])

    def diverges_at_horizon(self, state: int) -> bool:
        return self.horizon == self.tau_e and self.z.terminal[state] == 0

    def hazard(self, state, t0, t1):
        # d/dt log z_i = k_ij - u_ij, so the integral has a closed form
        state = np.asarray(state)
        t0 = np.asarray(t0, dtype=float)
        t1 = np.asarray(t1, dtype=float)
        lz0 = self.z.log(t0)
        lz1 = self.z.log(t1)
        own0 = np.where(state == 0, lz0[0], lz0[1])
        own1 = np.where(state == 0, lz1[0], lz1[1])
        with np.errstate(invalid="ignore"):
            return self._k(state) * (t1 - t0) - (own1 - own0)

    def invert_hazard(self, state, t0, target):
        state, t0, target = np.broadcast_arrays(np.asarray(state), np.asarray(t0, float), np.asarray(target, float))
        out = np.full(t0.shape, np.inf)
        total = self.hazard(state, t0, np.full(t0.shape, self.horizon))
        hit = total >= target
        if not np.any(hit):
            return out
        s, a, g = state[hit], t0[hit], target[hit]
        # bisect on log of the remaining time so that jumps crowding the
        # singular endpoint are resolved to full relative precision
        span = self.horizon - a
        lo = np.full(a.shape, -745.0)  # log of the smallest positive double
        hi = np.log(span)
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            t = self.horizon - np.exp(mid)
            h = self.hazard(s, a, t)
            # hazard decreases as the remaining time grows
            reached = h >= g
            lo = np.where(reached, mid, lo)
            hi = np.where(reached, hi, mid)
        t = np.clip(self.horizon - np.exp(lo), a, self.horizon)
        out[hit] = t
        return out


def optimal_protocol(rates: PassiveRates, z: Desirability) -> ClosedFormOptimal:
    return ClosedFormOptimal(rates, z.tau_e, z.terminal)


# --------------------------------------------------------------------------
# marginals


def _adaptive_simpson(f, a: float, b: float, tol: float, depth: int = 50) -> float:
    """Adaptive Simpson quadrature of a scalar function on ``[a, b]``."""
    if b == a:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) * (fa + 4 * fm + fb) / 6

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) * (fa + 4 * flm + fm) / 6
        right = (b - m) * (fm + 4 * frm + fb) / 6
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15 * tol:
            return left + right + delta / 15
        return recurse(a, m, fa, flm, fm, left, tol / 2, depth - 1) + recurse(
            m, b, fm, frm, fb, right, tol / 2, depth - 1
        )

    return recurse(a, b, fa, fm, fb, whole, tol, depth)


def _segments(protocol: Protocol, t_end: float) -> np.ndarray:
    bp = protocol.breakpoints()
    bp = bp[(bp > 0) & (bp < t_end)]
    return np.concatenate([[0.0], bp, [t_end]])


def marginal_system(protocol: Protocol, p_init: Distribution):
    """ODE for the controlled marginal as ``(y0, rhs(t, y), p0(t, y))``.

    Generic protocols integrate ``p0`` directly. The closed-form optimal
    protocol is integrated in ``q = p_j / z_j`` for the state ``j`` with the
    smaller terminal desirability: ``q`` obeys a smooth ODE even where the
    rate out of ``j`` blows up, and ``p_j = q z_j`` is exactly zero at
    ``tau_e`` when ``z_j(tau_e) = 0``.
    """
    if isinstance(protocol, ClosedFormOptimal):
        z = protocol.z
        k = protocol.passive.as_array()
        j = int(np.argmin(z.terminal))
        o = 1 - j
        k_oj, k_jo = k[o], k[j]

        def rhs(t, y):
            zt = z(t)
            return k_oj * (1.0 - y * zt[j]) / zt[o] - k_jo * y

        def to_p0(t, y):
            pj = y * z(t)[j]
            return pj if j == 0 else 1.0 - pj

        return p_init[j] / z(0.0)[j], rhs, to_p0

    def rhs(t, y):
        u01, u10 = protocol.rates(t)
        return -u01 * y + u10 * (1.0 - y)

    return p_init.p0, rhs, lambda t, y: y


def integrate_marginal(protocol: Protocol, p_init: Distribution, t_end: float, extra=None, n_extra=0, rtol=ODE_RTOL, atol=ODE_ATOL):
    """Integrate the marginal (plus optional running integrals) to ``t_end``.

    ``extra(t, p0)`` returns the integrands of ``n_extra`` accumulated
    quantities. The solve is split at rate breakpoints. Returns a list of
    ``(a, b, dense_solution)`` segments and the ``to_p0`` map.
    """
    y0, rhs, to_p0 = marginal_system(protocol, p_init)

    def full_rhs(t, y):
        dy = [rhs(t, y[0])]
        if n_extra:
            dy.extend(extra(t, to_p0(t, y[0])))
        return dy

    state = np.concatenate([[y0], np.zeros(n_extra)])
    pieces = []
    edges = _segments(protocol, t_end)
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        method = "DOP853"
        if not isinstance(protocol, ClosedFormOptimal):
            u01, u10 = protocol.rates(np.array([a, 0.5 * (a + b), b]))
            if np.max(u01 + u10) * (b - a) > STIFF_LIMIT:
                method = "Radau"
        sol = solve_ivp(full_rhs, (a, b), state, method=method, rtol=rtol, atol=atol, dense_output=True)
        if not sol.success:
            raise RuntimeError(f"marginal integration failed on [{a}, {b}]: {sol.message}")
        pieces.append((a, b, sol.sol))
        state = sol.y[:, -1]
    return pieces, to_p0


def evaluate_pieces(pieces, times) -> np.ndarray:
    """Evaluate piecewise dense output at sorted ``times``; shape ``[dim, len]``."""
    times = np.asarray(times, dtype=float)
    dim = pieces[0][2](pieces[0][0]).shape[0]
    out = np.empty((dim, times.size))
    for n, (a, b, sol) in enumerate(pieces):
        last = n == len(pieces) - 1
        mask = (times >= a) & ((times < b) | (last & (times <= b * (1 + 1e-14))))
        if np.any(mask):
            out[:, mask] = sol(np.minimum(times[mask], b))
    return out


def controlled_marginal(protocol: Protocol, p_init: Distribution, times, rtol=ODE_RTOL, atol=ODE_ATOL) -> np.ndarray:
    """``p0`` at each of ``times`` (sorted, inside ``[0, horizon]``)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.size == 0:
        return np.empty(0)
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted")
    if times[0] < 0 or times[-1] > protocol.horizon * (1 + 1e-14):
        raise ValueError("times must lie in [0, horizon]")
    if times[-1] == 0:
        return np.full(times.shape, p_init.p0)
    pieces, to_p0 = integrate_marginal(protocol, p_init, times[-1], rtol=rtol, atol=atol)
    y = evaluate_pieces(pieces, times)[0]
    p0 = to_p0(times, y)
    p0 = np.where(times == 0, p_init.p0, p0)
    return np.clip(p0, 0.0, 1.0)


def evolve_controlled(protocol: Protocol, p_init: Distribution, t: float) -> Distribution:
    if not 0 <= t <= protocol.horizon:
        raise ValueError("t must lie in [0, horizon]")
    return Distribution.from_p0(float(controlled_marginal(protocol, p_init, [t])[0]))
