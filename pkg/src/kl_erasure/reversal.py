"""Time reversal of controlled chains and the entropy-production identities.

Two objects go by "reversal" here:

* :func:`reverse` is the Bayesian reversal of a protocol with respect to its
  own marginal ``q``: rates ``q_j u_ji / q_i`` on the reversed clock. It
  reproduces ``q`` backwards and is an involution.
* The reversed path measure ``mu^rev_{u,q}`` traverses a path backwards from
  ``q`` at the horizon, jumping ``j -> i`` with the *unadjusted* forward rate
  ``u_ji``. For two states the instantaneous stationary law of ``u(t)`` is
  always in detailed balance, so the reversal with respect to it is ``u``
  itself. Its KL divergence from the forward measure is the total entropy
  production.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .chain_core import Distribution, PassiveRates, equilibrium, relative_entropy
from .estimators import (
    ConvergenceError,
    McEstimate,
    entropy_production_batch,
    forward_marginals,
    kernel_kl,
    kl_to_backward_chain,
    marginal_lookup,
    passive_kernel,
    path_log_probabilities,
    reversed_path_log_probabilities,
    enumerated_kl,
)
from .kl_control import ODE_ATOL, ODE_RTOL, Passive, Protocol, ProtocolError, controlled_marginal
from .path_space import MAX_ENUMERATION_STEPS, as_kernels, enumerate_states, sample_paths
from .thermo import integrate_ledger

# below this many samples Monte Carlo terms are reported as inconclusive
MIN_CONCLUSIVE_SAMPLES = 1000
# absolute slack for Monte Carlo comparisons whose standard error is pure rounding
MC_FLOOR = 1e-12


class ReversedProtocol(Protocol):
    """Bayesian reversal of ``base`` on the reversed clock ``s = tau_e - t``.

    ``rates(s)`` returns ``u~(tau_e - s)`` with
    ``u~_ij(t) = q_j(t) u_ji(t) / q_i(t)``, where ``q`` solves the base
    master equation with ``q(tau_e) = terminal``. Run from ``q(tau_e)`` it
    reproduces ``q(tau_e - s)``.
    """

    def __init__(self, base: Protocol, terminal: Distribution, rtol=ODE_RTOL, atol=ODE_ATOL):
        self.base = base
        self.terminal = terminal
        self.horizon = base.horizon
        for s in (0, 1):
            if base.diverges_at_horizon(s):
                raise ProtocolError(
                    "cannot reverse a protocol whose exit rate diverges at the horizon; truncate it first"
                )

        def rhs(t, y):
            u01, u10 = base.rates(t)
            return [-u01 * y[0] + u10 * (1.0 - y[0])]

        bp = base.breakpoints()
        edges = np.concatenate([[0.0], bp[(bp > 0) & (bp < self.horizon)], [self.horizon]])
        self._pieces = []
        y = terminal.p0
        for a, b in zip(edges[::-1][:-1], edges[::-1][1:]):
            sol = solve_ivp(rhs, (a, b), [y], method="DOP853", rtol=rtol, atol=atol, dense_output=True)
            if not sol.success:
                raise RuntimeError(f"backward marginal integration failed: {sol.message}")
            self._pieces.append((b, a, sol.sol))
            y = sol.y[0, -1]
        probe = np.linspace(0.0, self.horizon, 4001)[:-1]
        raw = self._raw_q0(probe)
        bad = (raw <= 0.0) | (raw >= 1.0)
        if np.any(bad[1:]):
            # latest interior time at which q touches the boundary, refined by root finding
            i = np.flatnonzero(bad)[-1]
            edge = 1.0 if raw[i] >= 1.0 else 0.0
            t_hit = brentq(lambda t: self._raw_q0(np.array([t]))[0] - edge, probe[i], probe[i + 1], xtol=1e-12)
            raise ProtocolError(f"reversed marginal q reaches the simplex boundary at t={t_hit:.12g}")

    def __repr__(self):
        return f"ReversedProtocol({self.base!r}, terminal={self.terminal})"

    def _raw_q0(self, t: np.ndarray) -> np.ndarray:
        flat = np.asarray(t, dtype=float).ravel()
        res = np.full(flat.shape, np.nan)
        for lo, hi, sol in self._pieces:
            mask = (flat >= lo) & (flat <= hi)
            if np.any(mask):
                res[mask] = sol(flat[mask])[0]
        return res.reshape(np.shape(t))

    def q0(self, t):
        """Base marginal ``q0`` at physical time ``t``."""
        return np.clip(self._raw_q0(np.asarray(t, dtype=float)), 0.0, 1.0)

    def physical_rates(self, t):
        """``(u~01(t), u~10(t))`` at physical time ``t``."""
        u01, u10 = self.base.rates(t)
        q0 = self.q0(t)
        q1 = 1.0 - q0
        with np.errstate(divide="ignore", invalid="ignore"):
            return q1 * u10 / q0, q0 * u01 / q1

    def rates(self, s):
        return self.physical_rates(self.horizon - np.asarray(s, dtype=float))

    def breakpoints(self) -> np.ndarray:
        return np.sort(self.horizon - self.base.breakpoints())


def reverse(protocol: Protocol, terminal: Distribution) -> ReversedProtocol:
    return ReversedProtocol(protocol, terminal)


# --------------------------------------------------------------------------
# reversed path measures on the clock-tick path space


def reversed_measure_kl(h: float, n_steps: int, protocol, p_init: Distribution, reversal, terminal) -> float:
    """``D(mu^h_{u,p} || mu^h,rev_{w,q})`` exactly, by the chain rule.

    ``reversal`` (protocol or kernels) supplies the backward jump
    probabilities of the reversed measure, ``terminal`` its law at step N.
    """
    k = as_kernels(protocol, h, n_steps)
    back = as_kernels(reversal, h, n_steps)
    return kl_to_backward_chain(p_init.as_array(), k, np.asarray(terminal, float), back)


def enumerated_reversed_kl(h: float, n_steps: int, protocol, p_init: Distribution, reversal, terminal) -> float:
    """Brute-force version of :func:`reversed_measure_kl` over all paths."""
    if n_steps > MAX_ENUMERATION_STEPS:
        raise ValueError(f"N={n_steps} exceeds the enumeration bound")
    states = enumerate_states(n_steps)
    k = as_kernels(protocol, h, n_steps)
    back = as_kernels(reversal, h, n_steps)
    log_p = path_log_probabilities(p_init.as_array(), k, states)
    log_q = reversed_path_log_probabilities(np.asarray(terminal, float), back, states)
    return enumerated_kl(log_p, log_q)


def _end_marginal(protocol: Protocol, p_init: Distribution) -> Distribution:
    return Distribution.from_p0(float(controlled_marginal(protocol, p_init, [protocol.horizon])[0]))


@dataclass
class Theorem1Report:
    ledger_S_tot: float
    mc_mean: float
    mc_std_error: float
    n_samples: int
    discrete_kl: float
    discrete_steps: int
    h: float
    mc_agrees: bool
    mc_inconclusive: bool
    discrete_gap: float
    discrete_tolerance: float
    discrete_agrees: bool

    @property
    def passed(self) -> bool:
        return self.discrete_agrees and (self.mc_agrees or self.mc_inconclusive)

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "passed": self.passed})


def verify_theorem1(
    protocol: Protocol,
    rates: PassiveRates,
    p_init: Distribution,
    n_samples: int,
    seed: int = 0,
    n_steps: int = 12,
    threads: int = 1,
    discrete_tolerance: float | None = None,
) -> Theorem1Report:
    """Total entropy production three ways.

    (a) ledger quadrature, (b) Monte Carlo mean of the pathwise jump
    log-ratio, (c) the exact discrete KL between the forward measure and the
    reversed measure started from ``p(tau_e)``. ``discrete_tolerance``
    defaults to ``h``, the order of the discretization error.
    """
    ledger = integrate_ledger(protocol, rates, p_init)
    paths = sample_paths(protocol, p_init, n_samples, seed, threads)
    est = McEstimate.from_samples(entropy_production_batch(paths, protocol, marginal_lookup(protocol, p_init)))
    h = protocol.horizon / n_steps
    p_end = _end_marginal(protocol, p_init)
    disc = reversed_measure_kl(h, n_steps, protocol, p_init, protocol, p_end.as_array())
    tol = h if discrete_tolerance is None else discrete_tolerance
    inconclusive = n_samples < MIN_CONCLUSIVE_SAMPLES
    gap = abs(disc - ledger.S_tot)
    return Theorem1Report(
        ledger_S_tot=ledger.S_tot,
        mc_mean=est.mean,
        mc_std_error=est.std_error,
        n_samples=est.n_samples,
        discrete_kl=disc,
        discrete_steps=n_steps,
        h=h,
        mc_agrees=est.agrees_with(ledger.S_tot, 3.0, MC_FLOOR),
        mc_inconclusive=inconclusive,
        discrete_gap=gap,
        discrete_tolerance=tol,
        discrete_agrees=gap <= tol,
    )


@dataclass
class IdentityResiduals:
    work_law_residual: float
    kl_cost_law_residual: float
    rearranged_residual: float
    discrete_exact_residual: float
    terms: dict = field(default_factory=dict)


def identity_residuals(
    protocol: Protocol,
    rates: PassiveRates,
    p_init: Distribution,
    h: float,
    n_steps: int,
    reversal_hook=None,
) -> IdentityResiduals:
    """Residuals of the two path-space first laws on the clock-tick space.

    * work: ``W = dF + D(mu_{u,p} || mu^rev_{u,p(tau_e)})``
    * KL cost: ``D(mu_{u,p} || mu_{k,p}) = dF + D(mu_{u,p} || mu^rev_{k,p(tau_e)})``
    * rearranged: ``D(mu_u || mu_k) + D(p(0) || pi) = D(mu_u || mu^rev_k) + D(p(tau_e) || pi)``

    ``p(tau_e)`` and ``dF`` come from the continuous marginal, so the first
    three residuals are O(h). The last uses the discrete end marginal, for
    which the KL-cost identity holds to rounding.

    ``reversal_hook`` replaces the passive backward kernels (negative controls).
    """
    if not math.isclose(h * n_steps, protocol.horizon, rel_tol=1e-12):
        raise ValueError("h * N must equal the protocol horizon")
    pi = equilibrium(rates).as_array()
    p = p_init.as_array()
    k_u = as_kernels(protocol, h, n_steps)
    k_passive = np.broadcast_to(passive_kernel(rates, h), k_u.shape).copy()
    back_passive = k_passive if reversal_hook is None else reversal_hook(k_passive)
    p_end = _end_marginal(protocol, p_init).as_array()
    m_end = forward_marginals(p, k_u)[-1]

    ledger = integrate_ledger(protocol, rates, p_init)
    delta_f = relative_entropy(p_end, pi) - relative_entropy(p, pi)
    d_rev_u = kl_to_backward_chain(p, k_u, p_end, k_u)
    d_cost = kernel_kl(p, k_u, p, k_passive)
    d_rev_k = kl_to_backward_chain(p, k_u, p_end, back_passive)
    d_rev_k_disc = kl_to_backward_chain(p, k_u, m_end, back_passive)

    work_law = ledger.W - (delta_f + d_rev_u)
    kl_cost_law = d_cost - (delta_f + d_rev_k)
    rearranged = (d_cost + relative_entropy(p, pi)) - (d_rev_k + relative_entropy(p_end, pi))
    disc = (d_cost + relative_entropy(p, pi)) - (d_rev_k_disc + relative_entropy(m_end, pi))
    terms = {
        "W": ledger.W,
        "delta_F": delta_f,
        "S_tot_ledger": ledger.S_tot,
        "D_forward_vs_reversed_u": d_rev_u,
        "D_cost": d_cost,
        "D_forward_vs_reversed_k": d_rev_k,
        "p_end": p_end.tolist(),
        "discrete_p_end": m_end.tolist(),
    }
    return IdentityResiduals(abs(work_law), abs(kl_cost_law), abs(rearranged), abs(disc), terms)


__all__ = [
    "ConvergenceError",
    "IdentityResiduals",
    "Passive",
    "ReversedProtocol",
    "Theorem1Report",
    "enumerated_reversed_kl",
    "identity_residuals",
    "reverse",
    "reversed_measure_kl",
    "verify_theorem1",
]
