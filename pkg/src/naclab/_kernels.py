"""Compiled inner loops: Markov-chain walking and the n-step TD recursion."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _draw(cum, u, last):
    for j in range(cum.shape[0]):
        if u < cum[j]:
            return j
    return last


@njit(cache=True)
def walk_chain(cum_policy, last_policy, cum_next, last_next, start, uniforms, length):
    """Walk ``length`` steps; returns (states, actions, state after the last pair).

    ``cum_next`` is indexed ``[s * A + a]``; two uniforms are consumed per step.
    """
    num_actions = cum_policy.shape[1]
    states = np.empty(length, dtype=np.int64)
    actions = np.empty(length, dtype=np.int64)
    s = start
    for k in range(length):
        a = _draw(cum_policy[s], uniforms[2 * k], last_policy[s])
        states[k] = s
        actions[k] = a
        row = s * num_actions + a
        s = _draw(cum_next[row], uniforms[2 * k + 1], last_next[row])
    return states, actions, s


@njit(cache=True)
def delta_sum(w, pairs, start, Phi, rewards, rho, gamma, n):
    """Multi-step correction for the window ``pairs[start..start+n]``.

    Arithmetic order is part of the contract (bit-exact tabular reduction):
    ``delta_i = (R_i + (gamma * rho_{i+1}) * q_{i+1}) - q_i``, accumulated as
    ``acc += coef * delta_i`` with ``coef *= gamma * rho_{i+1}`` starting at 1.
    """
    d = Phi.shape[1]
    acc = 0.0
    coef = 1.0
    q_cur = 0.0
    row = pairs[start]
    for j in range(d):
        q_cur += Phi[row, j] * w[j]
    for i in range(n):
        nxt = pairs[start + i + 1]
        q_next = 0.0
        for j in range(d):
            q_next += Phi[nxt, j] * w[j]
        r_next = rho[nxt]
        delta = (rewards[pairs[start + i]] + (gamma * r_next) * q_next) - q_cur
        acc += coef * delta
        coef *= gamma * r_next
        q_cur = q_next
    return acc


@njit(cache=True)
def critic_loop(pairs, Phi, rewards, rho, gamma, n, alphas, w0, record, threshold):
    """Run ``len(alphas)`` TD updates over the flattened pair sequence ``pairs``.

    ``record`` holds sorted iterate indices in ``[0, K]`` whose iterates are
    stored. Returns (w_K, recorded, diverged_at) with ``diverged_at = -1`` when
    every iterate stayed finite and at most ``threshold`` in max-norm.
    """
    K = alphas.shape[0]
    d = Phi.shape[1]
    w = w0.copy()
    recorded = np.full((len(record), d), np.nan)
    r = 0
    while r < len(record) and record[r] == 0:
        recorded[r] = w
        r += 1
    diverged_at = -1
    for k in range(K):
        acc = delta_sum(w, pairs, k, Phi, rewards, rho, gamma, n)
        step = alphas[k] * acc
        row = pairs[k]
        bad = False
        for j in range(d):
            w[j] = w[j] + step * Phi[row, j]
            if not abs(w[j]) <= threshold:
                bad = True
        while r < len(record) and record[r] == k + 1:
            recorded[r] = w
            r += 1
        if bad:
            diverged_at = k + 1
            break
    return w, recorded, diverged_at
