"""Two-state continuous-time Markov chain primitives.

The passive (uncontrolled) bit jumps 0 -> 1 at rate ``k01`` and 1 -> 0 at
rate ``k10``. Everything here is closed form; the n-state :class:`Generator`
exists for the matrix-exponential route used as a cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

NORM_ATOL = 1e-12


@dataclass(frozen=True)
class PassiveRates:
    """Constant uncontrolled rates of the bit."""

    k01: float
    k10: float

    def __post_init__(self):
        for name in ("k01", "k10"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")

    @classmethod
    def symmetric(cls, tau_r: float) -> "PassiveRates":
        """Equal rates giving reliability timescale ``tau_r``."""
        if not tau_r > 0:
            raise ValueError("tau_r must be > 0")
        k = 0.5 / tau_r
        return cls(k, k)

    @property
    def total(self) -> float:
        return self.k01 + self.k10

    def scaled(self, factor: float) -> "PassiveRates":
        return PassiveRates(factor * self.k01, factor * self.k10)

    def as_array(self) -> np.ndarray:
        return np.array([self.k01, self.k10])


@dataclass(frozen=True)
class Distribution:
    """Probability distribution ``(p0, p1)`` over the two states."""

    p0: float
    p1: float

    def __post_init__(self):
        if not (-NORM_ATOL <= self.p0 <= 1 + NORM_ATOL and -NORM_ATOL <= self.p1 <= 1 + NORM_ATOL):
            raise ValueError(f"probabilities out of [0, 1]: ({self.p0}, {self.p1})")
        if abs(self.p0 + self.p1 - 1.0) > NORM_ATOL:
            raise ValueError(f"distribution not normalized: {self.p0} + {self.p1}")

    @classmethod
    def from_p0(cls, p0: float) -> "Distribution":
        p0 = min(max(float(p0), 0.0), 1.0)
        return cls(p0, 1.0 - p0)

    @classmethod
    def point(cls, state: int) -> "Distribution":
        if state not in (0, 1):
            raise ValueError("state must be 0 or 1")
        return cls(1.0, 0.0) if state == 0 else cls(0.0, 1.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.p0, self.p1])

    def __getitem__(self, i: int) -> float:
        return (self.p0, self.p1)[i]


@dataclass(frozen=True, eq=False)
class Generator:
    """Rate matrix of an n-state chain (rows sum to zero).

    ``matrix[i, j]`` for ``i != j`` is the rate of jumping from ``i`` to ``j``.
    Acting on a column vector of state functions ``z`` it gives
    ``(K z)_i = sum_j k_ij (z_j - z_i)``.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
            raise ValueError("generator must be a square matrix with n >= 2")
        off = m - np.diag(np.diag(m))
        if np.any(off < 0):
            raise ValueError("off-diagonal rates must be >= 0")
        if np.any(np.abs(m.sum(axis=1)) > 1e-12 * max(1.0, np.abs(m).max())):
            raise ValueError("generator rows must sum to 0")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_offdiagonal(cls, rates) -> "Generator":
        off = np.array(rates, dtype=float)
        np.fill_diagonal(off, 0.0)
        return cls(off - np.diag(off.sum(axis=1)))

    @classmethod
    def two_state(cls, rates: PassiveRates) -> "Generator":
        return cls(np.array([[-rates.k01, rates.k01], [rates.k10, -rates.k10]]))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def propagator(self, t: float) -> np.ndarray:
        """Transition matrix ``exp(K t)``."""
        if t < 0:
            raise ValueError("t must be >= 0")
        return expm(self.matrix * t)

    def stationary(self) -> np.ndarray:
        """Stationary row vector (assumes an irreducible chain)."""
        n = self.n
        a = np.vstack([self.matrix.T, np.ones(n)])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(a, b, rcond=None)
        return pi


def equilibrium(rates: PassiveRates) -> Distribution:
    total = rates.total
    return Distribution(rates.k10 / total, rates.k01 / total)


def reliability_timescale(rates: PassiveRates) -> float:
    return 1.0 / rates.total


def evolve_passive(rates: PassiveRates, p_init: Distribution, t: float) -> Distribution:
    """Closed-form passive marginal at time ``t``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    pi0 = rates.k10 / rates.total
    p0 = pi0 + math.exp(-t * rates.total) * (p_init.p0 - pi0)
    return Distribution.from_p0(p0)


def passive_p0(rates: PassiveRates, p0_init: float, t):
    """Vectorized ``p0(t)`` for the passive chain; ``t`` may be an array."""
    pi0 = rates.k10 / rates.total
    return pi0 + np.exp(-np.asarray(t) * rates.total) * (p0_init - pi0)


def internal_energy_gap(rates: PassiveRates, kT: float = 1.0) -> float:
    """``E0 - E1`` implied by detailed balance."""
    if not kT > 0:
        raise ValueError("kT must be > 0")
    return kT * math.log(rates.k01 / rates.k10)


def relative_entropy(p, q) -> float:
    """``D(p || q)`` in nats with ``0 log 0 = 0``; infinite if support fails."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    total = 0.0
    for pi, qi in zip(p, q):
        if pi <= 0:
            continue
        if qi <= 0:
            return math.inf
        total += pi * math.log(pi / qi)
    return total
