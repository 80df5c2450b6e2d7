"""Estimators of path-space relative entropies.

Exact discrete-time KL divergences are computed with the chain rule over
the Markov structure, which equals the sum over all ``2^(N+1)`` paths but
costs ``O(N)``. Brute-force enumeration is kept for small ``N`` as an
independent check.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .chain_core import Distribution, PassiveRates
from .kl_control import Protocol, controlled_marginal
from .path_space import (
    AbsoluteContinuityError,
    PathBatch,
    as_kernels,
    enumerate_states,
    log_exit_rate,
    log_rn_batch,
    sample_paths,
)


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples")
        if not self.std_error >= 0:
            raise ValueError("std_error must be >= 0")

    @classmethod
    def from_samples(cls, x) -> "McEstimate":
        x = np.asarray(x, dtype=float)
        n = x.size
        return cls(float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(n)), n)

    def agrees_with(self, value: float, n_se: float = 3.0, floor: float = 0.0) -> bool:
        return abs(self.mean - value) <= max(n_se * self.std_error, floor)

    def to_json(self, config: dict | None = None) -> str:
        digest = config_digest(config or {})
        return json.dumps(
            {"mean": self.mean, "std_error": self.std_error, "n_samples": self.n_samples, "config_digest": digest}
        )


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# Monte Carlo


def mc_kl(
    sampling: Protocol,
    reference: Protocol,
    p_init: Distribution,
    n: int,
    seed: int,
    threads: int = 1,
    paths: PathBatch | None = None,
) -> McEstimate:
    """Monte Carlo ``D(mu_sampling || mu_reference)`` from pathwise log-ratios.

    Pass ``paths`` (sampled under ``sampling``) to reuse one sample across
    several references (common random numbers).
    """
    if paths is None:
        paths = sample_paths(sampling, p_init, n, seed, threads)
    return McEstimate.from_samples(log_rn_batch(paths, sampling, reference))


def marginal_lookup(protocol: Protocol, p_init: Distribution):
    """Vectorized ``t -> p0(t)`` along the controlled marginal."""

    def p0(t):
        t = np.asarray(t, dtype=float)
        flat = t.ravel()
        order = np.argsort(flat)
        out = np.empty(flat.shape)
        if flat.size:
            out[order] = controlled_marginal(protocol, p_init, flat[order])
        return out.reshape(t.shape)

    return p0


def entropy_production_batch(batch: PathBatch, protocol: Protocol, marginal) -> np.ndarray:
    """Pathwise sum over jumps of ``log(p_i u_ij / (p_j u_ji))``.

    ``marginal`` maps times to ``p0`` and must be the marginal of the run.
    """
    idx, i, t = batch.jump_events()
    p0 = marginal(t)
    p_i = np.where(i == 0, p0, 1 - p0)
    p_j = 1 - p_i
    if np.any(p_i <= 0) or np.any(p_j <= 0):
        bad = int(np.argmax((p_i <= 0) | (p_j <= 0)))
        raise ValueError(f"marginal is on the simplex boundary at jump time t={t[bad]}")
    log_fwd = log_exit_rate(protocol, i, t)
    log_bwd = log_exit_rate(protocol, 1 - i, t)
    if np.any(~np.isfinite(log_bwd)):
        bad = int(np.argmax(~np.isfinite(log_bwd)))
        raise AbsoluteContinuityError(f"reverse rate vanishes at jump time t={t[bad]}")
    terms = np.log(p_i) - np.log(p_j) + log_fwd - log_bwd
    return np.bincount(idx, weights=terms, minlength=len(batch))


def trajectory_entropy_production(path, protocol: Protocol, marginals) -> float:
    return float(entropy_production_batch(PathBatch.from_paths([path]), protocol, marginals)[0])


def mc_entropy_production(
    protocol: Protocol, p_init: Distribution, n: int, seed: int, threads: int = 1
) -> McEstimate:
    paths = sample_paths(protocol, p_init, n, seed, threads)
    return McEstimate.from_samples(entropy_production_batch(paths, protocol, marginal_lookup(protocol, p_init)))


# --------------------------------------------------------------------------
# exact discrete-time KL


def _xlogy_ratio(w, a, b):
    """``sum w * log(a / b)`` over entries with ``w > 0``; inf if ``b == 0`` there."""
    w = np.asarray(w, float)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    live = w > 0
    if np.any(b[live] <= 0):
        raise AbsoluteContinuityError("reference assigns zero probability to a path of positive weight")
    return float(np.sum(w[live] * (np.log(a[live]) - np.log(b[live]))))


def forward_marginals(p_init, kernels: np.ndarray) -> np.ndarray:
    """Marginals ``[N + 1, 2]`` of the chain with the given one-step kernels."""
    m = np.empty((len(kernels) + 1, 2))
    m[0] = np.asarray(p_init, dtype=float)
    for j, k in enumerate(kernels):
        m[j + 1] = m[j] @ k
    return m


def kernel_kl(p_init, kernels: np.ndarray, ref_init, ref_kernels: np.ndarray) -> float:
    """KL between two forward discrete chains by the chain rule."""
    p_init = np.asarray(p_init, float)
    m = forward_marginals(p_init, kernels)
    total = _xlogy_ratio(p_init, p_init, ref_init)
    for j in range(len(kernels)):
        w = m[j][:, None] * kernels[j]
        total += _xlogy_ratio(w, kernels[j], ref_kernels[j])
    return total


def kl_to_backward_chain(p_init, kernels: np.ndarray, terminal, back_kernels: np.ndarray) -> float:
    """``D(P || R)`` where ``R`` runs backward in time from ``terminal`` at step N.

    ``R`` moves from ``b`` at step ``j + 1`` to ``a`` at step ``j`` with
    probability ``back_kernels[j, b, a]``.
    """
    p_init = np.asarray(p_init, float)
    m = forward_marginals(p_init, kernels)
    total = _xlogy_ratio(p_init, p_init, np.ones(2)) - _xlogy_ratio(m[-1], np.asarray(terminal, float), np.ones(2))
    for j in range(len(kernels)):
        w = m[j][:, None] * kernels[j]
        total += _xlogy_ratio(w, kernels[j], back_kernels[j].T)
    return total


def exact_discrete_kl(h: float, n_steps: int, sampling, reference, p_init: Distribution) -> float:
    """``D(mu^h_sampling || mu^h_reference)`` on the clock-tick path space.

    ``sampling`` and ``reference`` are protocols or ``[N, 2, 2]`` kernel arrays.
    """
    k = as_kernels(sampling, h, n_steps)
    ref = as_kernels(reference, h, n_steps)
    p = p_init.as_array()
    return kernel_kl(p, k, p, ref)


def path_log_probabilities(p_init, kernels: np.ndarray, states: np.ndarray | None = None) -> np.ndarray:
    """Log-probability of every path in ``{0,1}^(N+1)`` (brute force)."""
    n_steps = len(kernels)
    if states is None:
        states = enumerate_states(n_steps)
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(p_init, float))[states[:, 0]]
        for j in range(n_steps):
            logp = logp + np.log(kernels[j][states[:, j], states[:, j + 1]])
    return logp


def reversed_path_log_probabilities(terminal, back_kernels: np.ndarray, states: np.ndarray) -> np.ndarray:
    n_steps = len(back_kernels)
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(terminal, float))[states[:, -1]]
        for j in range(n_steps):
            logp = logp + np.log(back_kernels[j][states[:, j + 1], states[:, j]])
    return logp


def enumerated_kl(log_p: np.ndarray, log_q: np.ndarray) -> float:
    """``sum_paths P log(P / Q)`` from explicit path log-probabilities."""
    live = np.isfinite(log_p)
    if np.any(np.isneginf(log_q[live])):
        raise AbsoluteContinuityError("reference assigns zero probability to a path of positive weight")
    p = np.exp(log_p[live])
    return float(np.sum(p * (log_p[live] - log_q[live])))


# --------------------------------------------------------------------------
# discrete optimal control and Schrodinger bridge


def passive_kernel(rates: PassiveRates, h: float) -> np.ndarray:
    if not h * rates.total < 1:
        raise ValueError(f"step h={h} too large: h (k01 + k10) = {h * rates.total:.4g} must be < 1")
    return np.array([[1 - h * rates.k01, h * rates.k01], [h * rates.k10, 1 - h * rates.k10]])


@dataclass(frozen=True)
class DiscreteControl:
    kernels: np.ndarray
    z: np.ndarray
    h: float

    @property
    def n_steps(self) -> int:
        return len(self.kernels)


def _doob_kernels(log_passive: np.ndarray, log_beta: np.ndarray) -> np.ndarray:
    """Kernels ``P(a, b) beta_{j+1}(b) / beta_j(a)`` from backward log-messages."""
    n_steps = len(log_beta) - 1
    kernels = np.empty((n_steps, 2, 2))
    for j in range(n_steps):
        logk = log_passive + log_beta[j + 1][None, :] - log_beta[j][:, None]
        with np.errstate(invalid="ignore"):
            kernels[j] = np.where(np.isfinite(log_beta[j])[:, None], np.exp(logk), np.eye(2))
    return kernels


def discrete_backward_recursion(rates: PassiveRates, h: float, n_steps: int, terminal=(1.0, 0.0)) -> DiscreteControl:
    """``z_j = (I + h K) z_{j+1}`` and the induced optimal one-step kernels."""
    p = passive_kernel(rates, h)
    z = np.empty((n_steps + 1, 2))
    z[-1] = np.asarray(terminal, dtype=float)
    for j in range(n_steps - 1, -1, -1):
        z[j] = p @ z[j + 1]
    with np.errstate(divide="ignore"):
        kernels = _doob_kernels(np.log(p), np.log(z))
    return DiscreteControl(kernels, z, h)


@dataclass(frozen=True)
class BridgeResult:
    kernels: np.ndarray
    initial: np.ndarray
    kl: float
    iterations: int
    residuals: list = field(repr=False)


def _log_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return logsumexp(a[:, :, None] + b[None, :, :], axis=1)


def sinkhorn_bridge(
    h: float,
    n_steps: int,
    rates: PassiveRates,
    start: Distribution,
    end: Distribution,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> BridgeResult:
    """Discrete Schrodinger bridge between ``start`` and ``end`` by IPF.

    The bridge is ``a(i_0) P(path) b(i_N)``; the potentials ``log a`` and
    ``log b`` are fitted alternately on the endpoint coupling ``P^N`` in log
    space until the total-variation residual of the start marginal falls
    below ``tol``.
    """
    log_p = np.log(passive_kernel(rates, h))
    log_m = log_p
    for _ in range(n_steps - 1):
        log_m = _log_matmul(log_m, log_p)
    with np.errstate(divide="ignore"):
        log_start = np.log(start.as_array())
        log_end = np.log(end.as_array())
    f = np.zeros(2)
    g = np.zeros(2)
    residuals = []
    for it in range(1, max_iter + 1):
        f = log_start - logsumexp(log_m + g[None, :], axis=1)
        g = log_end - logsumexp(f[:, None] + log_m, axis=0)
        row = np.exp(logsumexp(f[:, None] + log_m + g[None, :], axis=1))
        residuals.append(0.5 * float(np.abs(row - start.as_array()).sum()))
        if residuals[-1] < tol:
            break
    else:
        raise ConvergenceError(f"IPF did not converge in {max_iter} iterations; residual {residuals[-1]:.3e}")
    log_beta = np.empty((n_steps + 1, 2))
    log_beta[-1] = g
    for j in range(n_steps - 1, -1, -1):
        log_beta[j] = logsumexp(log_p + log_beta[j + 1][None, :], axis=1)
    kernels = _doob_kernels(log_p, log_beta)
    initial = np.exp(f + log_beta[0])
    live_s = start.as_array() > 0
    live_e = end.as_array() > 0
    kl = float(
        np.sum(start.as_array()[live_s] * (f[live_s] - log_start[live_s]))
        + np.sum(end.as_array()[live_e] * g[live_e])
    )
    return BridgeResult(kernels, initial, kl, it, residuals)
