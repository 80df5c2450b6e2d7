"""Stochastic-thermodynamics ledger of a protocol run (kT = 1, nats).

Energies are fixed by detailed balance, ``E0 - E1 = log(k01 / k10)``, and the
control acts through a potential with ``phi0 - phi1 = log(u01 k10 / (u10 k01))``.
Work and heat accrue at transitions, weighted by the net current
``J01 = p0 u01 - p1 u10``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .chain_core import Distribution, PassiveRates, equilibrium, relative_entropy
from .kl_control import ClosedFormOptimal, Grid, Protocol, evaluate_pieces, integrate_marginal

LOG2 = math.log(2.0)
# erasure runs stop this fraction of the horizon short of the singular endpoint
TERMINAL_GAP = 1e-13


class BoundaryError(ValueError):
    """A logarithm in the ledger diverges with nonzero flux in front of it."""


def energies(rates: PassiveRates) -> np.ndarray:
    """State energies with ``E0 = 0``."""
    return np.array([0.0, math.log(rates.k10 / rates.k01)])


def entropy(p: Distribution) -> float:
    return -sum(x * math.log(x) for x in p.as_array() if x > 0)


def free_energy(p: Distribution, rates: PassiveRates) -> float:
    """Nonequilibrium free energy ``E(p) - S(p)`` in the ``E0 = 0`` gauge."""
    return float(p.as_array() @ energies(rates)) - entropy(p)


def free_energy_gap(p: Distribution, rates: PassiveRates) -> float:
    """``F(p) - F(pi)``, evaluated as the relative entropy ``D(p || pi)``."""
    return relative_entropy(p.as_array(), equilibrium(rates).as_array())


def control_potential_gap(protocol: Protocol, rates: PassiveRates, t: float) -> float:
    """``phi0(t) - phi1(t) = log(u01 k10 / (u10 k01))``."""
    l01, l10 = (float(x) for x in protocol.log_rates(t))
    gap = l01 - l10 + math.log(rates.k10 / rates.k01)
    if not math.isfinite(gap):
        raise BoundaryError(
            f"control potential gap diverges at t={t}: log u01 = {l01}, log u10 = {l10} "
            "(the optimal erasure protocol is singular at tau_e)"
        )
    return gap


class PowerRates(NamedTuple):
    dE: float
    dW: float
    dQ: float
    dS: float
    dF: float
    dS_tot: float


def _xlog(j, log_term, name):
    """``j * log_term`` with ``0 * (+-inf) = 0``; raise if the flux is nonzero."""
    j = np.asarray(j, dtype=float)
    log_term = np.asarray(log_term, dtype=float)
    bad = ~np.isfinite(log_term) & (j != 0)
    if np.any(bad):
        raise BoundaryError(f"{name}: logarithm diverges where the current is nonzero")
    with np.errstate(invalid="ignore"):
        return np.where(j == 0, 0.0, j * log_term)


def power_from_state(p0, log_u01, log_u10, rates: PassiveRates) -> PowerRates:
    """Vectorized rates of change for marginal ``p0`` and log control rates."""
    p0 = np.asarray(p0, dtype=float)
    p1 = 1.0 - p0
    log_u01 = np.asarray(log_u01, dtype=float)
    log_u10 = np.asarray(log_u10, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        flux_fwd = np.where(p0 > 0, p0 * np.exp(log_u01), 0.0)
        flux_bwd = np.where(p1 > 0, p1 * np.exp(log_u10), 0.0)
        log_p0 = np.log(p0)
        log_p1 = np.log(p1)
    j = flux_fwd - flux_bwd
    log_k = math.log(rates.k10 / rates.k01)
    d_e = j * log_k
    # inf - inf only occurs at zero flux, where _xlog returns 0
    with np.errstate(invalid="ignore"):
        d_q = _xlog(j, log_u01 - log_u10, "dQ")
        d_w = _xlog(j, log_u01 - log_u10 + log_k, "dW")
        d_s = _xlog(j, log_p0 - log_p1, "dS")
        d_f = _xlog(j, log_k + log_p1 - log_p0, "dF")
        d_tot = _xlog(j, log_p0 + log_u01 - log_p1 - log_u10, "dS_tot")
    return PowerRates(d_e, d_w, d_q, d_s, d_f, d_tot)


def power_rates(p: Distribution, protocol: Protocol, rates: PassiveRates, t: float) -> PowerRates:
    l01, l10 = protocol.log_rates(t)
    return PowerRates(*(float(x) for x in power_from_state(p.p0, l01, l10, rates)))


LEDGER_KEYS = ("delta_E", "W", "Q", "delta_S", "delta_F", "S_tot")


@dataclass
class ThermoLedger:
    """Accumulated quantities of a run, plus time series on ``times``."""

    delta_E: float
    W: float
    Q: float
    delta_S: float
    delta_F: float
    S_tot: float
    p_start: Distribution
    p_end: Distribution
    t_end: float
    unbounded: tuple = ()
    series: dict = field(default_factory=dict, repr=False)

    @property
    def first_law_residual(self) -> float:
        return abs(self.W - self.Q - self.delta_E)

    @property
    def alternate_first_law_residual(self) -> float:
        return abs(self.W - self.delta_F - self.S_tot)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in LEDGER_KEYS}
        out.update(
            p_start=[self.p_start.p0, self.p_start.p1],
            p_end=[self.p_end.p0, self.p_end.p1],
            t_end=self.t_end,
            unbounded=list(self.unbounded),
        )
        return out

    def write_csv(self, fh, kT: float = 1.0) -> None:
        """Write the time series; energetic columns are multiplied by ``kT``."""
        cols = ["t", "p0", "u01", "u10", "J01", "dW", "dQ", "dS", "dF", "dS_tot"]
        cum = ["W", "Q", "S", "F", "S_tot"]
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols + [f"cum_{c}" for c in cum])
        scale = {"dW": kT, "dQ": kT, "dF": kT, "W": kT, "Q": kT, "F": kT}
        n = len(self.series["t"])
        for i in range(n):
            row = [self.series[c][i] * scale.get(c, 1.0) for c in cols]
            row += [self.series["cum_" + c][i] * scale.get(c, 1.0) for c in cum]
            writer.writerow([repr(float(x)) for x in row])


def _stop_time(protocol: Protocol, t_end: float) -> float:
    if t_end == protocol.horizon and any(protocol.diverges_at_horizon(s) for s in (0, 1)):
        return t_end * (1.0 - TERMINAL_GAP)
    return t_end


def integrate_ledger(
    protocol: Protocol,
    rates: PassiveRates,
    p_init: Distribution,
    tau_e: float | None = None,
    times=None,
    rtol: float = 1e-12,
    atol: float = 1e-14,
) -> ThermoLedger:
    """Integrate every ledger rate along the controlled marginal up to ``tau_e``.

    The running integrals are carried as extra ODE components next to the
    marginal so they share its adaptive step control. When an exit hazard
    diverges at the horizon the run stops a relative ``TERMINAL_GAP`` short of
    it; the integrands there only grow like ``log(tau_e - t)``, so the
    neglected tail is of order ``TERMINAL_GAP * log(TERMINAL_GAP)``.
    """
    t_req = protocol.horizon if tau_e is None else float(tau_e)
    if not 0 < t_req <= protocol.horizon * (1 + 1e-14):
        raise ValueError("tau_e must lie in (0, horizon]")
    t_stop = _stop_time(protocol, min(t_req, protocol.horizon))

    def extra(t, p0):
        l01, l10 = protocol.log_rates(t)
        pw = power_from_state(p0, l01, l10, rates)
        return [pw.dE, pw.dW, pw.dQ, pw.dS, pw.dF, pw.dS_tot]

    pieces, to_p0 = integrate_marginal(protocol, p_init, t_stop, extra=extra, n_extra=6, rtol=rtol, atol=atol)
    final = evaluate_pieces(pieces, [t_stop])[:, 0]
    totals = dict(zip(LEDGER_KEYS, (float(x) for x in final[1:])))
    p_end = Distribution.from_p0(float(to_p0(t_stop, final[0])))
    if isinstance(protocol, ClosedFormOptimal) and t_stop < t_req:
        # the marginal itself is exact at the endpoint
        p_end = Distribution.from_p0(float(to_p0(t_req, final[0])))
    unbounded = tuple(k for k, v in totals.items() if not math.isfinite(v))
    for k in unbounded:
        totals[k] = math.inf if totals[k] > 0 else -math.inf

    if times is None:
        times = np.linspace(0.0, t_stop, 201)
    times = np.clip(np.asarray(times, dtype=float), 0.0, t_stop)
    ys = evaluate_pieces(pieces, times)
    p0 = np.clip(to_p0(times, ys[0]), 0.0, 1.0)
    l01, l10 = protocol.log_rates(times)
    pw = power_from_state(p0, l01, l10, rates)
    u01, u10 = protocol.rates(times)
    series = {
        "t": times,
        "p0": p0,
        "u01": np.broadcast_to(u01, times.shape),
        "u10": np.broadcast_to(u10, times.shape),
        "J01": p0 * np.broadcast_to(u01, times.shape) - (1 - p0) * np.broadcast_to(u10, times.shape),
        "dW": pw.dW,
        "dQ": pw.dQ,
        "dS": pw.dS,
        "dF": pw.dF,
        "dS_tot": pw.dS_tot,
        "cum_E": ys[1],
        "cum_W": ys[2],
        "cum_Q": ys[3],
        "cum_S": ys[4],
        "cum_F": ys[5],
        "cum_S_tot": ys[6],
    }
    return ThermoLedger(p_start=p_init, p_end=p_end, t_end=t_stop, unbounded=unbounded, series=series, **totals)


# --------------------------------------------------------------------------
# quasi-static erasure and comparison bounds


def staircase_levels(rates: PassiveRates, n_stages: int, residual: float = 1e-6, schedule: str = "length") -> np.ndarray:
    """Potential of the state-1 well after each stage.

    The final level leaves equilibrium mass ``residual`` on state 1.
    ``schedule="free_energy"`` raises the equilibrium free energy by the same
    amount every stage; ``schedule="length"`` takes equal steps in
    thermodynamic length, which minimizes the quench dissipation to leading
    order.
    """
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    if not 0 < residual < 1:
        raise ValueError("residual must lie in (0, 1)")
    pi = equilibrium(rates)
    # equilibrium p1 at level phi is sigmoid(-(phi - offset))
    offset = math.log(pi.p1 / pi.p0)
    phi_max = math.log((1 - residual) / residual) + offset
    frac = np.arange(1, n_stages + 1) / n_stages
    if schedule == "free_energy":
        d_max = -math.log(pi.p0 + pi.p1 * math.exp(-phi_max))
        d = frac * d_max
        levels = -np.log((np.exp(-d) - pi.p0) / pi.p1)
    elif schedule == "length":
        def length(x):
            return 2.0 * np.arctan(np.tanh(x / 4.0))

        lo, hi = length(-offset), length(phi_max - offset)
        levels = 4.0 * np.arctanh(np.tan((lo + frac * (hi - lo)) / 2.0)) + offset
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    levels[-1] = phi_max
    return levels


def staircase_protocols(rates: PassiveRates, levels, stage_time: float) -> list[Grid]:
    """Constant-rate stages raising well 1 to each level (rate out of 1 grows)."""
    return [Grid.constant(rates.k01, rates.k10 * math.exp(phi), stage_time) for phi in levels]


def quasistatic_erasure_work(
    rates: PassiveRates,
    n_stages: int,
    stage_time: float,
    residual: float = 1e-6,
    schedule: str = "length",
) -> float:
    """Work of the quench-and-equilibrate staircase erasure, starting at equilibrium.

    Each stage holds constant rates, so the marginal relaxes exponentially and
    the work ``gap * integral(J01)`` equals ``level * (p0_end - p0_start)``.
    """
    if not stage_time > 0:
        raise ValueError("stage_time must be > 0")
    p0 = equilibrium(rates).p0
    work = 0.0
    for phi in staircase_levels(rates, n_stages, residual, schedule):
        u10 = rates.k10 * math.exp(phi)
        total = rates.k01 + u10
        target = u10 / total
        p0_end = target + math.exp(-total * stage_time) * (p0 - target)
        work += phi * (p0_end - p0)
        p0 = p0_end
    return work


def salamon_bound(tau_e: float, sigma: float) -> float:
    """Finite-time compression cost ``(1 + log2 / (sigma tau_e - log2)) log2``."""
    x = sigma * tau_e
    if not x > LOG2:
        raise ValueError(f"sigma * tau_e = {x} must exceed log 2 (pole of the bound)")
    return (1.0 + LOG2 / (x - LOG2)) * LOG2
