"""Finite MDPs, policy tables and exact (sampling-free) solvers.

State-action pairs are flattened as ``row = s * num_actions + a`` everywhere in
the package: feature matrices, Q-vectors, stationary distributions and the
state-action transition matrix all use this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import AssumptionViolation, ConfigurationError

STOCHASTIC_TOL = 1e-12
ERGODICITY_GAP = 1e-10


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_stochastic_rows(table: np.ndarray, what: str) -> None:
    if np.any(~np.isfinite(table)):
        raise ConfigurationError(f"{what} contains non-finite entries")
    if np.any(table < 0):
        idx = tuple(int(i) for i in np.argwhere(table < 0)[0])
        raise ConfigurationError(f"{what} has a negative entry at {idx}")
    sums = table.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > STOCHASTIC_TOL)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise ConfigurationError(f"{what} row {idx} sums to {sums[idx]!r}, not 1")


@dataclass(frozen=True)
class Mdp:
    """Finite discounted MDP.

    ``transitions[a, s, s']`` is the probability of moving from ``s`` to ``s'``
    under action ``a``; ``rewards[s, a]`` must lie in ``[-1, 1]``.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    discount: float

    def __post_init__(self):
        P = _frozen(self.transitions)
        R = _frozen(self.rewards)
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ConfigurationError(f"transitions must have shape (A, S, S), got {P.shape}")
        n_actions, n_states, _ = P.shape
        if n_actions < 1 or n_states < 1:
            raise ConfigurationError("need at least one state and one action")
        if R.shape != (n_states, n_actions):
            raise ConfigurationError(
                f"rewards must have shape ({n_states}, {n_actions}), got {R.shape}"
            )
        _check_stochastic_rows(P, "transition matrix")
        if not np.all(np.isfinite(R)) or np.max(np.abs(R)) > 1.0:
            raise ConfigurationError("rewards must satisfy |R(s,a)| <= 1")
        gamma = float(self.discount)
        if not 0.0 < gamma < 1.0:
            raise ConfigurationError(f"discount must lie in (0, 1), got {gamma}")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "discount", gamma)

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    @property
    def reward_vector(self) -> np.ndarray:
        """Rewards flattened in state-action row order."""
        return self.rewards.reshape(-1)

    @property
    def pair_transitions(self) -> np.ndarray:
        """``(S*A, S)`` matrix of next-state distributions, one row per pair."""
        return self.transitions.transpose(1, 0, 2).reshape(self.num_pairs, self.num_states)


@dataclass(frozen=True)
class FeatureMap:
    """Feature matrix with one row per state-action pair (row ``s*|A| + a``)."""

    matrix: np.ndarray

    def __post_init__(self):
        Phi = _frozen(self.matrix)
        if Phi.ndim != 2 or Phi.shape[1] < 1:
            raise ConfigurationError(f"feature matrix must be 2-D with d >= 1, got {Phi.shape}")
        if not np.all(np.isfinite(Phi)):
            raise ConfigurationError("feature matrix contains non-finite entries")
        l1 = np.abs(Phi).sum(axis=1)
        if np.max(l1) > 1.0 + STOCHASTIC_TOL:
            row = int(np.argmax(l1))
            raise ConfigurationError(f"feature row {row} has L1 norm {l1[row]:.6g} > 1")
        if np.linalg.matrix_rank(Phi) != Phi.shape[1]:
            raise ConfigurationError("feature columns are linearly dependent")
        object.__setattr__(self, "matrix", Phi)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def tabular(cls, num_states: int, num_actions: int) -> "FeatureMap":
        return cls(np.eye(num_states * num_actions))

    def check_compatible(self, mdp: Mdp) -> None:
        if self.matrix.shape[0] != mdp.num_pairs:
            raise ConfigurationError(
                f"feature matrix has {self.matrix.shape[0]} rows, MDP has {mdp.num_pairs} pairs"
            )


@dataclass(frozen=True)
class SoftmaxPolicy:
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", _frozen(self.theta).reshape(-1))

    def table(self, features: FeatureMap, num_actions: int) -> np.ndarray:
        return softmax_eval(features, self.theta, num_actions)


@dataclass(frozen=True)
class BehaviorPolicy:
    """Exploratory policy that generates all samples; every entry must be positive."""

    table: np.ndarray

    def __post_init__(self):
        table = _frozen(self.table)
        if table.ndim != 2:
            raise ConfigurationError(f"behavior table must be (S, A), got {table.shape}")
        _check_stochastic_rows(table, "behavior policy")
        if np.any(table <= 0):
            idx = tuple(int(i) for i in np.argwhere(table <= 0)[0])
            raise AssumptionViolation(
                f"behavior policy must give every action positive probability; entry {idx} is 0"
            )
        object.__setattr__(self, "table", table)

    @property
    def zeta_max(self) -> float:
        return float(np.max(1.0 / self.table))

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "BehaviorPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))


@dataclass(frozen=True)
class StationaryInfo:
    mu_b: np.ndarray
    kappa_b: np.ndarray

    @property
    def kappa_min(self) -> float:
        return float(self.kappa_b.min())

    @property
    def weight_matrix(self) -> np.ndarray:
        return np.diag(self.kappa_b)


def check_policy(mdp: Mdp, policy) -> np.ndarray:
    """Validate a ``(S, A)`` action-distribution table against ``mdp``."""
    table = np.asarray(policy, dtype=float)
    if table.shape != (mdp.num_states, mdp.num_actions):
        raise ConfigurationError(
            f"policy must have shape ({mdp.num_states}, {mdp.num_actions}), got {table.shape}"
        )
    _check_stochastic_rows(table, "policy")
    return table


def _as_table(policy) -> np.ndarray:
    if isinstance(policy, BehaviorPolicy):
        return policy.table
    return np.asarray(policy, dtype=float)


def state_transition_matrix(mdp: Mdp, policy) -> np.ndarray:
    """State-marginal chain ``P_pi(s, s') = sum_a pi(a|s) P_a(s, s')``."""
    table = check_policy(mdp, _as_table(policy))
    return np.einsum("sa,ast->st", table, mdp.transitions)


def policy_transition_matrix(mdp: Mdp, policy) -> np.ndarray:
    """State-action chain ``P_pi[(s,a), (s',a')] = P_a(s, s') * pi(a'|s')``."""
    table = check_policy(mdp, _as_table(policy))
    nxt = mdp.pair_transitions
    return (nxt[:, :, None] * table[None, :, :]).reshape(mdp.num_pairs, mdp.num_pairs)


def exact_q(mdp: Mdp, policy) -> np.ndarray:
    """Solve ``(I - gamma P_pi) Q = R`` for the state-action value vector."""
    P = policy_transition_matrix(mdp, policy)
    lhs = np.eye(mdp.num_pairs) - mdp.discount * P
    return np.linalg.solve(lhs, mdp.reward_vector)


def state_values(mdp: Mdp, policy, q: np.ndarray | None = None) -> np.ndarray:
    table = check_policy(mdp, _as_table(policy))
    if q is None:
        q = exact_q(mdp, table)
    return np.sum(table * q.reshape(mdp.num_states, mdp.num_actions), axis=1)


def _greedy(q_table: np.ndarray) -> np.ndarray:
    # Near-ties resolve to the lowest action index.
    scale = max(1.0, float(np.max(np.abs(q_table))))
    best = q_table.max(axis=1, keepdims=True)
    return np.argmax(q_table >= best - 1e-12 * scale, axis=1)


def optimal_values(mdp: Mdp, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Optimal state values and a deterministic greedy policy.

    Value iteration to ``tol`` followed by policy-iteration polishing, so the
    returned values are those of the returned policy to solver precision.
    """
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    gamma = mdp.discount
    R, P = mdp.rewards, mdp.transitions
    V = np.zeros(mdp.num_states)
    while True:
        Q = R + gamma * np.einsum("ast,t->sa", P, V)
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) <= tol * (1 - gamma) / 2:
            V = V_new
            break
        V = V_new
    greedy = _greedy(R + gamma * np.einsum("ast,t->sa", P, V))
    for _ in range(100 * mdp.num_states * mdp.num_actions + 10):
        table = np.eye(mdp.num_actions)[greedy]
        V = state_values(mdp, table)
        nxt = _greedy(R + gamma * np.einsum("ast,t->sa", P, V))
        if np.array_equal(nxt, greedy):
            break
        greedy = nxt
    return V, greedy


def stationary_info(mdp: Mdp, behavior: BehaviorPolicy) -> StationaryInfo:
    """Stationary state and state-action distributions of the behavior chain.

    Raises ``AssumptionViolation`` if the chain is reducible or periodic.
    """
    P = state_transition_matrix(mdp, behavior)
    S = mdp.num_states
    if S > 1:
        moduli = np.sort(np.abs(np.linalg.eigvals(P)))[::-1]
        if moduli[1] >= 1.0 - ERGODICITY_GAP:
            raise AssumptionViolation(
                "behavior chain must be irreducible and aperiodic with a full-support "
                f"behavior policy; second-largest eigenvalue modulus is {moduli[1]:.12f}"
            )
    A = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    mu = np.linalg.lstsq(A, b, rcond=None)[0]
    mu = np.clip(mu, 0.0, None)
    mu = mu / mu.sum()
    kappa = (mu[:, None] * behavior.table).reshape(-1)
    return StationaryInfo(mu_b=_frozen(mu), kappa_b=_frozen(kappa))


def discounted_visitation(mdp: Mdp, policy, start) -> np.ndarray:
    """``d = (1 - gamma) mu^T (I - gamma P_pi)^{-1}`` over states."""
    mu = np.asarray(start, dtype=float)
    if mu.shape != (mdp.num_states,) or np.any(mu < 0) or abs(mu.sum() - 1) > 1e-10:
        raise ConfigurationError("start must be a probability vector over states")
    P = state_transition_matrix(mdp, policy)
    gamma = mdp.discount
    d = (1 - gamma) * np.linalg.solve((np.eye(mdp.num_states) - gamma * P).T, mu)
    return d


def softmax_eval(features: FeatureMap, theta, num_actions: int) -> np.ndarray:
    """Softmax policy table ``pi_theta(a|s)`` from logits ``phi(s,a)^T theta``."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape != (features.dim,):
        raise ConfigurationError(f"theta must have length {features.dim}, got {theta.shape}")
    logits = (features.matrix @ theta).reshape(-1, num_actions)
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def max_ratio(target, behavior: BehaviorPolicy, all_mass: bool = False) -> float:
    """Largest importance ratio ``max pi(a|s) / pi_b(a|s)``.

    With ``all_mass`` the target is ignored and ``max 1 / pi_b(a|s)`` is
    returned, the bound over every possible target policy.
    """
    if all_mass:
        return behavior.zeta_max
    table = _as_table(target)
    if table.shape != behavior.table.shape:
        raise ConfigurationError("target and behavior tables differ in shape")
    return float(np.max(table / behavior.table))


def deterministic_policies(mdp: Mdp):
    """Iterate over all ``|A|^|S|`` deterministic policies as one-hot tables."""
    eye = np.eye(mdp.num_actions)
    for choice in product(range(mdp.num_actions), repeat=mdp.num_states):
        yield eye[list(choice)]


def random_mdp(
    rng: np.random.Generator,
    num_states: int,
    num_actions: int,
    discount: float,
    reward_low: float = -1.0,
    reward_high: float = 1.0,
) -> Mdp:
    """Dirichlet transitions and uniform rewards; used by tests and the gallery."""
    P = rng.dirichlet(np.ones(num_states), size=(num_actions, num_states))
    R = rng.uniform(reward_low, reward_high, size=(num_states, num_actions))
    return Mdp(P, R, discount)


def random_features(rng: np.random.Generator, num_pairs: int, dim: int) -> FeatureMap:
    """Random full-rank features rescaled so every row has L1 norm at most 1."""
    if not 1 <= dim <= num_pairs:
        raise ConfigurationError(f"full-rank features need 1 <= d <= {num_pairs}, got d={dim}")
    while True:
        Phi = rng.uniform(-1.0, 1.0, size=(num_pairs, dim))
        Phi /= np.abs(Phi).sum(axis=1).max()
        if np.linalg.matrix_rank(Phi) == dim:
            return FeatureMap(Phi)


def random_policy(rng: np.random.Generator, num_states: int, num_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(num_actions), size=num_states)
