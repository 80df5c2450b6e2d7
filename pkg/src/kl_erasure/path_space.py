"""Trajectories of the bit and exact path-measure arithmetic.

Continuous paths are sampled by inverting the integrated exit hazard
(exponential time change), which stays exact when a rate blows up at the
horizon. Batches of paths are stored as padded arrays so that path
functionals vectorize.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .chain_core import Distribution
from .kl_control import Protocol, ProtocolError
from .rng import map_chunks, stream

MAX_ENUMERATION_STEPS = 22


class SamplingError(RuntimeError):
    """A sampled trajectory contradicts what the protocol guarantees."""


class AbsoluteContinuityError(ValueError):
    """A path has positive weight under one measure and zero under the other."""


@dataclass(frozen=True)
class Path:
    """Initial state plus ordered ``(time, target)`` jumps on ``[0, horizon]``."""

    initial_state: int
    jumps: tuple
    horizon: float

    def __post_init__(self):
        if self.initial_state not in (0, 1):
            raise ValueError("initial_state must be 0 or 1")
        jumps = tuple((float(t), int(s)) for t, s in self.jumps)
        prev_t, prev_s = 0.0, self.initial_state
        for t, s in jumps:
            if not prev_t < t:
                raise ValueError("jump times must be strictly increasing and > 0")
            if t > self.horizon:
                raise ValueError(f"jump at t={t} outside (0, {self.horizon}]")
            if s != 1 - prev_s:
                raise ValueError("two-state jumps must alternate states")
            prev_t, prev_s = t, s
        object.__setattr__(self, "jumps", jumps)

    @property
    def final_state(self) -> int:
        return self.jumps[-1][1] if self.jumps else self.initial_state

    @property
    def jump_times(self) -> np.ndarray:
        return np.array([t for t, _ in self.jumps])

    def state(self, t: float) -> int:
        if not 0 <= t <= self.horizon:
            raise ValueError("t outside [0, horizon]")
        s = self.initial_state
        for tj, target in self.jumps:
            if tj > t:
                break
            s = target
        return s

    def to_json(self) -> str:
        return json.dumps({"initial": self.initial_state, "jumps": [[t, s] for t, s in self.jumps], "horizon": self.horizon})

    @classmethod
    def from_json(cls, line: str) -> "Path":
        obj = json.loads(line)
        return cls(int(obj["initial"]), tuple((t, s) for t, s in obj["jumps"]), float(obj["horizon"]))


@dataclass(frozen=True)
class PathBatch:
    """Many paths as arrays: ``times[n, j]`` padded with ``inf`` past ``counts[n]``."""

    initial: np.ndarray
    times: np.ndarray
    counts: np.ndarray
    horizon: float

    def __len__(self):
        return len(self.initial)

    @property
    def final(self) -> np.ndarray:
        return (self.initial + self.counts) % 2

    def path(self, i: int) -> Path:
        s = int(self.initial[i])
        jumps = []
        for t in self.times[i, : self.counts[i]]:
            s = 1 - s
            jumps.append((float(t), s))
        return Path(int(self.initial[i]), tuple(jumps), self.horizon)

    def __iter__(self) -> Iterator[Path]:
        return (self.path(i) for i in range(len(self)))

    def state_at(self, t: float) -> np.ndarray:
        flips = (self.times <= t).sum(axis=1)
        return (self.initial + flips) % 2

    @classmethod
    def from_paths(cls, paths) -> "PathBatch":
        paths = list(paths)
        if not paths:
            raise ValueError("empty path list")
        horizon = paths[0].horizon
        width = max(1, max(len(p.jumps) for p in paths))
        times = np.full((len(paths), width), np.inf)
        for i, p in enumerate(paths):
            times[i, : len(p.jumps)] = p.jump_times
        return cls(
            np.array([p.initial_state for p in paths]),
            times,
            np.array([len(p.jumps) for p in paths]),
            horizon,
        )

    @classmethod
    def concat(cls, batches) -> "PathBatch":
        batches = list(batches)
        width = max(b.times.shape[1] for b in batches)
        times = np.vstack(
            [np.pad(b.times, ((0, 0), (0, width - b.times.shape[1])), constant_values=np.inf) for b in batches]
        )
        return cls(
            np.concatenate([b.initial for b in batches]),
            times,
            np.concatenate([b.counts for b in batches]),
            batches[0].horizon,
        )

    def segments(self):
        """Flattened holding segments ``(path index, state, t_start, t_end)``."""
        n, width = self.times.shape
        starts = np.hstack([np.zeros((n, 1)), self.times])
        ends = np.hstack([self.times, np.full((n, 1), np.inf)])
        k = np.arange(width + 1)
        valid = k[None, :] <= self.counts[:, None]
        ends = np.where(k[None, :] == self.counts[:, None], self.horizon, ends)
        states = (self.initial[:, None] + k[None, :]) % 2
        idx = np.broadcast_to(np.arange(n)[:, None], valid.shape)
        return idx[valid], states[valid], starts[valid], ends[valid]

    def jump_events(self):
        """Flattened jumps ``(path index, from state, time)``."""
        n, width = self.times.shape
        k = np.arange(width)
        valid = k[None, :] < self.counts[:, None]
        from_states = (self.initial[:, None] + k[None, :]) % 2
        idx = np.broadcast_to(np.arange(n)[:, None], valid.shape)
        return idx[valid], from_states[valid], self.times[valid]


# --------------------------------------------------------------------------
# sampling


def _draw_initial(p_init: Distribution, size: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(size) >= p_init.p0).astype(np.int64)


def _sample_chunk(protocol: Protocol, p_init: Distribution, size: int, rng, require_final=None) -> PathBatch:
    initial = _draw_initial(p_init, size, rng)
    state = initial.copy()
    t = np.zeros(size)
    counts = np.zeros(size, dtype=np.int64)
    times = np.full((size, 4), np.inf)
    active = np.arange(size)
    while active.size:
        draws = rng.exponential(size=active.size)
        t_next = protocol.invert_hazard(state[active], t[active], draws)
        stopped = ~np.isfinite(t_next)
        if np.any(stopped):
            stuck = state[active[stopped]]
            for s in (0, 1):
                if protocol.diverges_at_horizon(s) and np.any(stuck == s):
                    raise SamplingError(
                        f"exit hazard of state {s} diverges at the horizon but the draw could not be bracketed"
                    )
        moved = active[~stopped]
        if moved.size:
            slot = counts[moved]
            if slot.max() >= times.shape[1]:
                times = np.pad(times, ((0, 0), (0, times.shape[1])), constant_values=np.inf)
            times[moved, slot] = t_next[~stopped]
            counts[moved] += 1
            state[moved] = 1 - state[moved]
            t[moved] = t_next[~stopped]
        active = moved
    width = max(1, int(counts.max()))
    batch = PathBatch(initial, times[:, :width], counts, protocol.horizon)
    if require_final is not None and np.any(batch.final != require_final):
        bad = int(np.argmax(batch.final != require_final))
        raise SamplingError(
            f"path {bad} ends in state {int(batch.final[bad])} although the protocol must end in {require_final}; "
            "its integrated hazard is finite at the horizon"
        )
    return batch


def sample_paths(
    protocol: Protocol,
    p_init: Distribution,
    n: int,
    seed: int,
    threads: int = 1,
    require_final: int | None = None,
) -> PathBatch:
    """Sample ``n`` paths of the chain driven by ``protocol`` from ``p_init``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    chunks = map_chunks(lambda size, rng: _sample_chunk(protocol, p_init, size, rng, require_final), n, seed, threads)
    return PathBatch.concat(chunks)


def sample_path(protocol: Protocol, p_init: Distribution, rng_seed: int) -> Path:
    return _sample_chunk(protocol, p_init, 1, stream(rng_seed, 0)).path(0)


# --------------------------------------------------------------------------
# Radon-Nikodym derivatives


def log_exit_rate(protocol: Protocol, state, t):
    return protocol.log_exit_rate(state, t)


def log_rn_batch(batch: PathBatch, numerator: Protocol, denominator: Protocol) -> np.ndarray:
    """Pathwise ``log d mu_num / d mu_den`` for equal initial distributions."""
    n = len(batch)
    idx, from_state, t_jump = batch.jump_events()
    log_num = log_exit_rate(numerator, from_state, t_jump)
    log_den = log_exit_rate(denominator, from_state, t_jump)
    if np.any(np.isneginf(log_den) & np.isfinite(log_num)):
        bad = int(np.argmax(np.isneginf(log_den) & np.isfinite(log_num)))
        raise AbsoluteContinuityError(
            f"jump out of state {int(from_state[bad])} at t={t_jump[bad]} has zero rate under the denominator"
        )
    jump_term = np.bincount(idx, weights=log_num - log_den, minlength=n)
    sidx, s_state, s0, s1 = batch.segments()
    hz = numerator.hazard(s_state, s0, s1) - denominator.hazard(s_state, s0, s1)
    return jump_term - np.bincount(sidx, weights=hz, minlength=n)


def log_rn_derivative(path: Path, numerator: Protocol, denominator: Protocol) -> float:
    return float(log_rn_batch(PathBatch.from_paths([path]), numerator, denominator)[0])


# --------------------------------------------------------------------------
# discrete-time path space


@dataclass(frozen=True)
class DiscretePath:
    """States ``(i_0, ..., i_N)`` at clock ticks ``0, h, ..., N h``."""

    states: tuple
    h: float

    def __post_init__(self):
        if len(self.states) < 2:
            raise ValueError("a discrete path needs N >= 1 steps")
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if any(s not in (0, 1) for s in self.states):
            raise ValueError("states must be 0 or 1")

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def horizon(self) -> float:
        return self.n_steps * self.h


def as_kernels(protocol, h: float, n_steps: int) -> np.ndarray:
    """Kernels ``[N, 2, 2]`` from a protocol, or validate a given kernel array."""
    if isinstance(protocol, Protocol):
        return protocol.discretize(h, n_steps)
    kernels = np.asarray(protocol, dtype=float)
    if kernels.shape != (n_steps, 2, 2):
        raise ValueError(f"kernel array must have shape ({n_steps}, 2, 2)")
    if np.any(kernels < -1e-15) or np.any(np.abs(kernels.sum(axis=2) - 1) > 1e-12):
        raise ValueError("kernels must be row-stochastic")
    return kernels


def discrete_measure(dpath: DiscretePath, protocol, p_init: Distribution) -> float:
    """``p_{i_0} prod_j u^h_{i_j i_{j+1}}(j h)``."""
    kernels = as_kernels(protocol, dpath.h, dpath.n_steps)
    prob = p_init[dpath.states[0]]
    for j, (a, b) in enumerate(zip(dpath.states[:-1], dpath.states[1:])):
        prob *= kernels[j, a, b]
    return float(prob)


def enumerate_discrete(h: float, n_steps: int) -> Iterator[DiscretePath]:
    """Every element of ``{0, 1}^(N + 1)`` exactly once."""
    if n_steps < 1:
        raise ValueError("N must be >= 1")
    if n_steps > MAX_ENUMERATION_STEPS:
        raise ValueError(
            f"N={n_steps} exceeds the enumeration bound {MAX_ENUMERATION_STEPS}; "
            "use the chain-rule estimators or Monte Carlo sampling instead"
        )
    for states in itertools.product((0, 1), repeat=n_steps + 1):
        yield DiscretePath(states, h)


def enumerate_states(n_steps: int) -> np.ndarray:
    """All paths as an integer array ``[2^(N+1), N+1]`` (brute-force helper)."""
    if n_steps > MAX_ENUMERATION_STEPS:
        raise ValueError(f"N={n_steps} exceeds the enumeration bound {MAX_ENUMERATION_STEPS}")
    codes = np.arange(2 ** (n_steps + 1))
    shifts = np.arange(n_steps, -1, -1)
    return (codes[:, None] >> shifts[None, :]) & 1


def dump_paths(paths, fh) -> None:
    for p in paths:
        fh.write(p.to_json() + "\n")


def load_paths(fh) -> list[Path]:
    return [Path.from_json(line) for line in fh if line.strip()]


__all__ = [
    "AbsoluteContinuityError",
    "DiscretePath",
    "Path",
    "PathBatch",
    "ProtocolError",
    "SamplingError",
    "as_kernels",
    "discrete_measure",
    "dump_paths",
    "enumerate_discrete",
    "enumerate_states",
    "load_paths",
    "log_rn_batch",
    "log_rn_derivative",
    "sample_path",
    "sample_paths",
]
