"""Seeded trajectories of the behavior chain, windows, and mixing times.

Randomness comes from numpy's counter-based Philox generator. A run seed and a
stream index are folded into the 128-bit Philox key as
``key = seed + (stream << 64)``, so stream ``t`` of seed ``s`` never overlaps
any other (seed, stream) pair. The NAC loop draws segment ``t`` of its single
trajectory from stream ``t``; the chain state is carried across segments, so
the concatenation is one Markov trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import walk_chain
from .errors import ConfigurationError, NonMixingError
from .mdp import BehaviorPolicy, Mdp, state_transition_matrix, stationary_info

MIXING_CAP = 10**6
SEED_BITS = 64
TV_FLOOR = 1e-12


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator for ``(seed, stream)``; both must fit in 64 bits."""
    if not (0 <= seed < 2**SEED_BITS and 0 <= stream < 2**SEED_BITS):
        raise ConfigurationError("seed and stream must be unsigned 64-bit integers")
    return np.random.Generator(np.random.Philox(key=seed + (stream << SEED_BITS)))


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    seed: int
    start_state: int
    next_state: int | None = None

    def __post_init__(self):
        if len(self.states) != len(self.actions):
            raise ConfigurationError("states and actions must have equal length")

    def __len__(self) -> int:
        return len(self.states)

    def pairs(self, num_actions: int) -> np.ndarray:
        """Flattened state-action indices ``s * |A| + a``."""
        return self.states * num_actions + self.actions

    def segment(self, start: int, stop: int) -> "Trajectory":
        if not 0 <= start < stop <= len(self):
            raise IndexError(f"segment [{start}, {stop}) outside trajectory of length {len(self)}")
        nxt = int(self.states[stop]) if stop < len(self) else self.next_state
        return Trajectory(
            self.states[start:stop], self.actions[start:stop], self.seed,
            int(self.states[start]), nxt,
        )


def _cumulative(table: np.ndarray):
    cum = np.cumsum(table, axis=-1)
    last = np.array([np.flatnonzero(row > 0)[-1] for row in table.reshape(-1, table.shape[-1])])
    return cum, last.reshape(table.shape[:-1]).astype(np.int64)


def _walk(mdp: Mdp, behavior: BehaviorPolicy, start: int, length: int, rng) -> tuple:
    cum_pi, last_pi = _cumulative(behavior.table)
    cum_next, last_next = _cumulative(mdp.pair_transitions)
    uniforms = rng.random(2 * length)
    return walk_chain(cum_pi, last_pi, cum_next, last_next, int(start), uniforms, int(length))


def generate(
    mdp: Mdp, behavior: BehaviorPolicy, start: int, length: int, seed: int, stream: int = 0
) -> Trajectory:
    """Sample ``length`` pairs with ``A_k ~ pi_b(.|S_k)``, ``S_{k+1} ~ P_{A_k}(S_k, .)``."""
    if length < 1:
        raise ConfigurationError("trajectory length must be at least 1")
    if not 0 <= start < mdp.num_states:
        raise ConfigurationError(f"start state {start} out of range")
    if behavior.table.shape != (mdp.num_states, mdp.num_actions):
        raise ConfigurationError("behavior policy does not match the MDP")
    states, actions, nxt = _walk(mdp, behavior, start, length, rng_for(seed, stream))
    return Trajectory(states, actions, seed, int(start), int(nxt))


def generate_segments(
    mdp: Mdp, behavior: BehaviorPolicy, start: int, segment_length: int, count: int, seed: int
) -> Trajectory:
    """One trajectory of ``count`` consecutive segments, segment ``t`` from stream ``t``."""
    states, actions = [], []
    s = start
    for t in range(count):
        seg = generate(mdp, behavior, s, segment_length, seed, stream=t)
        states.append(seg.states)
        actions.append(seg.actions)
        s = seg.next_state
    return Trajectory(np.concatenate(states), np.concatenate(actions), seed, int(start), int(s))


def window(traj: Trajectory, k: int, n: int) -> np.ndarray:
    """Augmented sample ``X_k`` as an ``(n+1, 2)`` array of (state, action) rows."""
    if n < 0 or k < 0 or k + n >= len(traj):
        raise IndexError(f"window k={k}, n={n} does not fit a trajectory of length {len(traj)}")
    return np.stack([traj.states[k : k + n + 1], traj.actions[k : k + n + 1]], axis=1)


def tv_profile(mdp: Mdp, behavior: BehaviorPolicy, cap: int = MIXING_CAP, floor: float = 0.0):
    """Yield ``max_s TV(P^k(s,.), mu_b)`` for k = 0, 1, ... (at most ``cap`` + 1 values)."""
    P = state_transition_matrix(mdp, behavior)
    mu = stationary_info(mdp, behavior).mu_b
    Pk = np.eye(mdp.num_states)
    for _ in range(cap + 1):
        tv = 0.5 * float(np.max(np.abs(Pk - mu).sum(axis=1)))
        yield tv
        if tv <= floor:
            return
        Pk = Pk @ P


def mixing_time(mdp: Mdp, behavior: BehaviorPolicy, alpha: float, cap: int = MIXING_CAP) -> int:
    """Smallest k with ``max_s TV(P^k(s,.), mu_b) <= alpha``.

    Raises ``NonMixingError`` after ``cap`` steps, or earlier once the distance
    has stalled for 1000 steps (floating-point floor below ``alpha``).
    """
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    best, stalled = np.inf, 0
    for k, tv in enumerate(tv_profile(mdp, behavior, cap)):
        if tv <= alpha:
            return k
        if tv < best:
            best, stalled = tv, 0
        else:
            stalled += 1
            if stalled >= 1000:
                break
    raise NonMixingError(
        f"behavior chain did not mix to total variation {alpha:g} "
        f"(best {best:.3g} after {k} steps)"
    )


@dataclass(frozen=True)
class MixingInfo:
    """Mixing times on a grid of accuracies plus a geometric envelope ``C sigma^k``."""

    alphas: tuple
    t_alpha: tuple
    geo_C: float
    geo_sigma: float
    horizon: int

    def lookup(self, alpha: float) -> int:
        for a, t in zip(self.alphas, self.t_alpha):
            if a == alpha:
                return t
        raise KeyError(alpha)


class MixingProfile:
    """Cached TV sequence for fast repeated ``t_alpha`` queries."""

    def __init__(self, mdp: Mdp, behavior: BehaviorPolicy, cap: int = MIXING_CAP):
        values = []
        best, stalled = np.inf, 0
        for tv in tv_profile(mdp, behavior, cap, floor=0.0):
            values.append(tv)
            if tv < best:
                best, stalled = tv, 0
            else:
                stalled += 1
                if stalled >= 1000:
                    break
        self.tv = np.minimum.accumulate(np.array(values))
        self.P = state_transition_matrix(mdp, behavior)

    def t_alpha(self, alpha: float) -> int:
        if not 0 < alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")
        hits = np.flatnonzero(self.tv <= alpha)
        if not hits.size:
            raise NonMixingError(
                f"behavior chain does not mix to total variation {alpha:g}; "
                f"numerical floor is {self.tv[-1]:.3g}"
            )
        return int(hits[0])

    def envelope(self) -> tuple[float, float, int]:
        """Fit ``(C, sigma)`` with ``TV_k <= C sigma^k`` up to the noise floor."""
        S = self.P.shape[0]
        if S > 1:
            moduli = np.sort(np.abs(np.linalg.eigvals(self.P)))[::-1]
            sigma = float(min(max(moduli[1], 1e-3), 1 - 1e-9))
        else:
            sigma = 1e-3
        above = np.flatnonzero(self.tv > TV_FLOOR)
        horizon = int(above[-1]) + 1 if above.size else 1
        ks = np.arange(horizon)
        C = float(np.max(self.tv[:horizon] / sigma**ks)) if horizon else 1.0
        return max(C, 1e-300), sigma, horizon


def mixing_info(mdp: Mdp, behavior: BehaviorPolicy, alphas=(0.1, 0.01, 1e-3, 1e-4)) -> MixingInfo:
    profile = MixingProfile(mdp, behavior)
    C, sigma, horizon = profile.envelope()
    alphas = tuple(sorted(alphas, reverse=True))
    return MixingInfo(
        alphas=alphas,
        t_alpha=tuple(profile.t_alpha(a) for a in alphas),
        geo_C=C,
        geo_sigma=sigma,
        horizon=horizon,
    )
