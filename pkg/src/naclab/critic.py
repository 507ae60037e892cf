"""Off-policy n-step TD with linear features, its exact oracles and bounds.

One TD update at step ``k`` uses the window ``(S_k, A_k), ..., (S_{k+n}, A_{k+n})``
and moves ``w`` along ``phi(S_k, A_k) * Delta`` where

    Delta = sum_{i<n} gamma^i (rho_1 ... rho_i) delta_i,
    delta_i = R_i + gamma rho_{i+1} phi_{i+1}^T w - phi_i^T w,

with ``rho_j`` the importance ratio of the j-th pair of the window. The ratio
product starts at the pair after ``(S_k, A_k)`` because the first action is
the one being evaluated. Taking expectations under the stationary behavior
chain gives ``Phi^T K (T^n(Phi w) - Phi w)``, the residual of the n-step
projected Bellman equation, which :func:`expected_update` evaluates exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._kernels import critic_loop, delta_sum
from .errors import BoundInapplicable, ConfigurationError, NoUniqueSolution
from .mdp import (
    BehaviorPolicy,
    FeatureMap,
    Mdp,
    check_policy,
    max_ratio,
    policy_transition_matrix,
    stationary_info,
)
from .sampler import MixingProfile, Trajectory

DIVERGENCE_THRESHOLD = 1e8
MAX_RECORDED = 1000
SINGULAR_COND = 1e12
GATE_CONSTANT = 456.0
VARIANCE_CONSTANT = 114.0


def f_factor(x: float, n: int) -> float:
    """``1 + x + ... + x^n``, evaluated stably near ``x = 1``."""
    if x < 0 or n < 0:
        raise ConfigurationError("f_factor needs x >= 0 and n >= 0")
    if x == 1.0:
        return float(n + 1)
    if abs(x - 1.0) < 1e-4:
        # Closed form cancels badly here; the direct sum is exact to rounding.
        return float(np.sum(x ** np.arange(n + 1, dtype=float)))
    return (1.0 - x ** (n + 1)) / (1.0 - x)


def min_horizon(gamma: float, gamma_c: float, kappa_min: float) -> int:
    """Smallest ``n >= 1`` with ``gamma^n <= gamma_c * sqrt(kappa_min)``."""
    for name, v in (("gamma", gamma), ("gamma_c", gamma_c)):
        if not 0 < v < 1:
            raise ConfigurationError(f"{name} must lie in (0, 1)")
    if not 0 < kappa_min <= 1:
        raise ConfigurationError("kappa_min must lie in (0, 1]")
    target = gamma_c * math.sqrt(kappa_min)
    n = max(1, math.ceil((2 * math.log(gamma_c) + math.log(kappa_min)) / (2 * math.log(gamma))))
    # Rounding in the logarithms can be off by one either way.
    while n > 1 and gamma ** (n - 1) <= target:
        n -= 1
    while gamma**n > target:
        n += 1
    return n


def importance_ratio(target, behavior: BehaviorPolicy, s: int, a: int) -> float:
    return float(np.asarray(target, dtype=float)[s, a] / behavior.table[s, a])


@dataclass(frozen=True)
class StepSchedule:
    """``alpha_k = alpha`` (constant) or ``alpha / (k + h)^eta`` (diminishing)."""

    kind: str
    alpha: float
    eta: float = 1.0
    h: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "diminishing"):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if not self.alpha > 0:
            raise ConfigurationError("step size alpha must be positive")
        if self.kind == "diminishing":
            if not 0 < self.eta <= 1:
                raise ConfigurationError("eta must lie in (0, 1]")
            if not self.h > 0:
                raise ConfigurationError("offset h must be positive")

    @classmethod
    def constant(cls, alpha: float) -> "StepSchedule":
        return cls("constant", alpha)

    @classmethod
    def diminishing(cls, alpha: float, eta: float, h: float) -> "StepSchedule":
        return cls("diminishing", alpha, eta, h)

    def values(self, num_iters: int, start: int = 0) -> np.ndarray:
        k = np.arange(start, start + num_iters, dtype=float)
        if self.kind == "constant":
            return np.full(num_iters, float(self.alpha))
        return self.alpha / (k + self.h) ** self.eta

    def at(self, k: int) -> float:
        return float(self.values(1, start=k)[0])


@dataclass(frozen=True)
class CriticConfig:
    n: int
    schedule: StepSchedule
    num_iters: int
    w0: np.ndarray
    gamma_c: float
    theorem1_mode: bool = False
    threshold: float = DIVERGENCE_THRESHOLD
    thin: int | None = None

    def __post_init__(self):
        w0 = np.array(self.w0, dtype=float).reshape(-1)
        w0.setflags(write=False)
        object.__setattr__(self, "w0", w0)
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError("horizon n must be a positive integer")
        # K = 0 is accepted and returns w0, which keeps the zero-iteration case total.
        if int(self.num_iters) != self.num_iters or self.num_iters < 0:
            raise ConfigurationError("num_iters must be a nonnegative integer")
        if not 0 < self.gamma_c < 1:
            raise ConfigurationError("gamma_c must lie in (0, 1)")
        if self.theorem1_mode and self.schedule.kind != "constant":
            raise ConfigurationError("theorem1_mode requires a constant step size")
        if self.thin is not None and self.thin < 1:
            raise ConfigurationError("thin must be a positive integer")
        if not self.threshold > 0:
            raise ConfigurationError("divergence threshold must be positive")

    @property
    def stride(self) -> int:
        return self.thin if self.thin is not None else max(1, self.num_iters // MAX_RECORDED)


class CriticProblem:
    """An MDP, features, target and behavior policy with cached derived quantities."""

    def __init__(self, mdp: Mdp, features: FeatureMap, target, behavior: BehaviorPolicy):
        features.check_compatible(mdp)
        self.mdp = mdp
        self.features = features
        self.target = check_policy(mdp, target).copy()
        self.target.setflags(write=False)
        if behavior.table.shape != (mdp.num_states, mdp.num_actions):
            raise ConfigurationError("behavior policy does not match the MDP")
        self.behavior = behavior
        self._fixed_points: dict = {}

    @cached_property
    def stationary(self):
        return stationary_info(self.mdp, self.behavior)

    @cached_property
    def mixing(self) -> MixingProfile:
        return MixingProfile(self.mdp, self.behavior)

    @cached_property
    def rho(self) -> np.ndarray:
        return (self.target / self.behavior.table).reshape(-1)

    @cached_property
    def zeta(self) -> float:
        return max_ratio(self.target, self.behavior)

    @cached_property
    def P_pi(self) -> np.ndarray:
        return policy_transition_matrix(self.mdp, self.target)

    @cached_property
    def lambda_min(self) -> float:
        Phi = self.features.matrix
        gram = Phi.T @ (self.stationary.kappa_b[:, None] * Phi)
        return float(np.linalg.eigvalsh(gram)[0])

    def n_min(self, gamma_c: float) -> int:
        return min_horizon(self.mdp.discount, gamma_c, self.stationary.kappa_min)

    def fixed_point(self, n: int) -> "ProjectedFixedPoint":
        if n not in self._fixed_points:
            self._fixed_points[n] = solve_projected_bellman(self, n)
        return self._fixed_points[n]

    def with_target(self, target) -> "CriticProblem":
        out = CriticProblem(self.mdp, self.features, target, self.behavior)
        for name in ("stationary", "mixing", "lambda_min"):
            if name in self.__dict__:
                out.__dict__[name] = self.__dict__[name]
        return out


def _pairs(window: np.ndarray, num_actions: int) -> np.ndarray:
    window = np.asarray(window, dtype=np.int64)
    return window[:, 0] * num_actions + window[:, 1]


def td_step(w, window, problem: CriticProblem, n: int) -> np.ndarray:
    """Update direction ``F(w, X_k) = phi(S_k, A_k) * Delta`` for one window."""
    window = np.asarray(window)
    if window.ndim != 2 or window.shape[1] != 2 or window.shape[0] < n + 1:
        raise ConfigurationError(f"window needs {n + 1} (state, action) pairs, got shape {window.shape}")
    w = np.asarray(w, dtype=float)
    Phi = problem.features.matrix
    pairs = _pairs(window[: n + 1], problem.mdp.num_actions)
    acc = delta_sum(w, pairs, 0, Phi, problem.mdp.reward_vector, problem.rho, problem.mdp.discount, n)
    return Phi[pairs[0]] * acc


@dataclass(frozen=True)
class DivergenceReport:
    step: int
    max_abs: float
    threshold: float

    def __str__(self) -> str:
        return f"iterate left the region |w_j| <= {self.threshold:g} at step {self.step} (max |w_j| = {self.max_abs:.3g})"


@dataclass(frozen=True)
class CriticRun:
    steps: np.ndarray
    iterates: np.ndarray
    final: np.ndarray
    divergence: DivergenceReport | None = None
    errors: np.ndarray | None = None

    @property
    def diverged(self) -> bool:
        return self.divergence is not None

    def iterate_at(self, k: int) -> np.ndarray:
        idx = np.flatnonzero(self.steps == k)
        if not idx.size:
            raise KeyError(f"iterate {k} was not recorded")
        return self.iterates[idx[0]]

    def error_at(self, k: int) -> float:
        if self.errors is None:
            raise ValueError("run has no fixed point attached")
        idx = np.flatnonzero(self.steps == k)
        if not idx.size:
            raise KeyError(f"iterate {k} was not recorded")
        return float(self.errors[idx[0]])


def record_steps(num_iters: int, stride: int, checkpoints=()) -> np.ndarray:
    steps = set(range(0, num_iters + 1, stride))
    steps.add(num_iters)
    steps.update(int(c) for c in checkpoints if 0 <= c <= num_iters)
    return np.array(sorted(steps), dtype=np.int64)


def run_critic(
    segment: Trajectory,
    config: CriticConfig,
    problem: CriticProblem,
    w_pi: np.ndarray | None = None,
    checkpoints=(),
    step_offset: int = 0,
) -> CriticRun:
    """Run ``num_iters`` updates over ``segment``; needs ``len(segment) >= K + n``.

    The last window reaches index ``K - 1 + n``. ``step_offset`` shifts the
    step-size schedule so a run can resume a diminishing schedule.
    """
    K, n = config.num_iters, config.n
    d = problem.features.dim
    if config.w0.shape != (d,):
        raise ConfigurationError(f"w0 must have length {d}")
    if config.theorem1_mode:
        check_theorem1_gate(config, problem)
    steps = record_steps(K, config.stride, checkpoints)
    if K == 0:
        final = config.w0.copy()
        errs = None if w_pi is None else np.array([np.linalg.norm(final - w_pi)])
        return CriticRun(steps, final[None, :], final, None, errs)
    if len(segment) < K + n:
        raise ConfigurationError(f"segment has {len(segment)} pairs; {K + n} are needed")
    pairs = segment.pairs(problem.mdp.num_actions)[: K + n]
    alphas = config.schedule.values(K, start=step_offset)
    w, recorded, diverged_at = critic_loop(
        pairs,
        np.ascontiguousarray(problem.features.matrix),
        problem.mdp.reward_vector.copy(),
        problem.rho,
        problem.mdp.discount,
        n,
        alphas,
        np.array(config.w0),
        steps,
        float(config.threshold),
    )
    divergence = None
    if diverged_at >= 0:
        keep = steps < diverged_at
        steps = np.append(steps[keep], diverged_at)
        recorded = np.vstack([recorded[keep], w[None, :]])
        with np.errstate(invalid="ignore"):
            max_abs = float(np.max(np.abs(w))) if np.all(np.isfinite(w)) else math.inf
        divergence = DivergenceReport(int(diverged_at), max_abs, config.threshold)
    errors = None
    if w_pi is not None:
        with np.errstate(over="ignore", invalid="ignore"):
            errors = np.linalg.norm(recorded - np.asarray(w_pi)[None, :], axis=1)
    return CriticRun(steps, recorded, w.copy(), divergence, errors)


def _n_step_parts(problem: CriticProblem, n: int):
    """Return ``sum_{i<n} (gamma P)^i R`` and ``(gamma P)^n``."""
    gP = problem.mdp.discount * problem.P_pi
    power = np.eye(problem.mdp.num_pairs)
    acc = np.zeros(problem.mdp.num_pairs)
    R = problem.mdp.reward_vector
    for _ in range(n):
        acc = acc + power @ R
        power = power @ gP
    return acc, power


def expected_update(w, problem: CriticProblem, n: int) -> np.ndarray:
    """Stationary mean ``Phi^T K (T^n(Phi w) - Phi w)`` of the TD direction."""
    Phi = problem.features.matrix
    kappa = problem.stationary.kappa_b
    r_n, P_n = _n_step_parts(problem, n)
    q = Phi @ np.asarray(w, dtype=float)
    return Phi.T @ (kappa * (r_n + P_n @ q - q))


def certify_contraction(problem: CriticProblem, n: int) -> float:
    """``K``-weighted operator norm of ``Phi (Phi^T K Phi)^-1 Phi^T K (gamma P)^n``."""
    _, P_n = _n_step_parts(problem, n)
    return _weighted_norm(problem, P_n)


def _weighted_norm(problem: CriticProblem, P_n: np.ndarray) -> float:
    Phi = problem.features.matrix
    kappa = problem.stationary.kappa_b
    gram = Phi.T @ (kappa[:, None] * Phi)
    M = Phi @ np.linalg.solve(gram, Phi.T @ (kappa[:, None] * P_n))
    root = np.sqrt(kappa)
    similar = root[:, None] * M / root[None, :]
    top = np.linalg.eigvalsh(similar.T @ similar)[-1]
    return float(math.sqrt(max(top, 0.0)))


@dataclass(frozen=True)
class ProjectedFixedPoint:
    w_pi: np.ndarray
    residual: float
    lambda_min: float
    contraction_estimate: float
    n: int

    def norm_bound(self, gamma: float, gamma_c: float) -> float:
        """Closed-form bound ``2 / ((1-gamma) sqrt(1-gamma_c) sqrt(lambda_min))``."""
        return fixed_point_norm_bound(gamma, gamma_c, self.lambda_min)


def fixed_point_norm_bound(gamma: float, gamma_c: float, lambda_min: float) -> float:
    return 2.0 / ((1 - gamma) * math.sqrt(1 - gamma_c) * math.sqrt(lambda_min))


def solve_projected_bellman(problem: CriticProblem, n: int) -> ProjectedFixedPoint:
    """Solve ``Phi^T K (I - (gamma P)^n) Phi w = Phi^T K sum_{i<n} (gamma P)^i R``."""
    if n < 1:
        raise ConfigurationError("horizon n must be at least 1")
    Phi = problem.features.matrix
    kappa = problem.stationary.kappa_b
    r_n, P_n = _n_step_parts(problem, n)
    weighted = Phi.T * kappa[None, :]
    A = weighted @ (Phi - P_n @ Phi)
    b = weighted @ r_n
    # Relative to the Gram matrix so that d = 1 (where cond(A) is always 1) is covered too.
    scale = np.linalg.norm(weighted @ Phi, 2)
    if np.linalg.svd(A, compute_uv=False)[-1] * SINGULAR_COND <= scale:
        raise NoUniqueSolution(
            f"projected n-step Bellman system is singular for n={n}; "
            "the composed projection and n-step operator is not a contraction"
        )
    w = np.linalg.solve(A, b)
    q = Phi @ w
    residual = float(np.max(np.abs(weighted @ (r_n + P_n @ q - q))))
    return ProjectedFixedPoint(
        w_pi=w,
        residual=residual,
        lambda_min=problem.lambda_min,
        contraction_estimate=_weighted_norm(problem, P_n),
        n=n,
    )


def gate_capacity(problem: CriticProblem, n: int, gamma_c: float, zeta: float | None = None) -> float:
    """Right-hand side ``(1 - gamma_c) / (456 f(gamma zeta)^2)`` of the step-size gate."""
    zeta = problem.zeta if zeta is None else zeta
    f = f_factor(problem.mdp.discount * zeta, n)
    return (1 - gamma_c) / (GATE_CONSTANT * f**2)


def gate_holds(alpha: float, problem: CriticProblem, n: int, gamma_c: float, zeta=None) -> bool:
    tau = problem.mixing.t_alpha(alpha) + n + 1
    return alpha * tau <= gate_capacity(problem, n, gamma_c, zeta)


def check_theorem1_gate(config: CriticConfig, problem: CriticProblem, zeta=None) -> None:
    if config.schedule.kind != "constant":
        raise BoundInapplicable("constant-step bound needs a constant step size")
    n_min = problem.n_min(config.gamma_c)
    if config.n < n_min:
        raise BoundInapplicable(
            f"horizon n={config.n} is below the contraction horizon {n_min} "
            f"needed for gamma_c={config.gamma_c}"
        )
    alpha = config.schedule.alpha
    tau = problem.mixing.t_alpha(alpha) + config.n + 1
    cap = gate_capacity(problem, config.n, config.gamma_c, zeta)
    if alpha * tau > cap:
        raise BoundInapplicable(
            f"step size too large: alpha*(t_alpha+n+1) = {alpha * tau:.3g} exceeds "
            f"(1-gamma_c)/(456 f(gamma zeta)^2) = {cap:.3g}"
        )


def compliant_alpha(problem: CriticProblem, n: int, gamma_c: float, zeta=None, shrink: float = 1.0) -> float:
    """Largest step size on a fine grid satisfying the constant-step gate, times ``shrink``.

    Since ``t_alpha`` only grows as ``alpha`` shrinks, iterating
    ``alpha <- cap / (t_alpha + n + 1)`` decreases monotonically to a
    compliant value.
    """
    cap = gate_capacity(problem, n, gamma_c, zeta)
    alpha = min(cap / (n + 1), 0.999)
    for _ in range(200):
        tau = problem.mixing.t_alpha(alpha) + n + 1
        if alpha * tau <= cap * (1 + 1e-12):
            return alpha * shrink
        alpha = cap / tau
    raise BoundInapplicable("could not find a step size satisfying the gate")


@dataclass(frozen=True)
class CriticBound:
    """Right-hand side of a finite-sample critic bound split into its two terms."""

    k: int
    E1: float
    E2: float
    c1: float
    c2: float
    tau: int
    t_alpha: int
    zeta: float
    f: float
    lambda_min: float
    case: str = "constant"

    @property
    def total(self) -> float:
        return self.E1 + self.E2


def _constants(config: CriticConfig, problem: CriticProblem, w_pi: np.ndarray, zeta: float):
    f = f_factor(problem.mdp.discount * zeta, config.n)
    w0 = config.w0
    c1 = (np.linalg.norm(w0) + np.linalg.norm(w0 - w_pi) + 1.0) ** 2
    c2 = VARIANCE_CONSTANT * f**2 * (np.linalg.norm(w_pi) + 1.0) ** 2
    return float(c1), float(c2), f


def theorem1_bound(config: CriticConfig, problem: CriticProblem, k: int) -> CriticBound:
    """Constant-step bound on ``E||w_k - w_pi||^2`` (bias ``E1`` plus variance ``E2``)."""
    check_theorem1_gate(config, problem)
    alpha = config.schedule.alpha
    t_alpha = problem.mixing.t_alpha(alpha)
    tau = t_alpha + config.n + 1
    if k < tau:
        raise BoundInapplicable(f"bound holds only for k >= t_alpha + n + 1 = {tau}, got k={k}")
    w_pi = problem.fixed_point(config.n).w_pi
    c1, c2, f = _constants(config, problem, w_pi, problem.zeta)
    ell = (1 - config.gamma_c) * problem.lambda_min
    E1 = c1 * (1 - ell * alpha) ** (k - tau)
    E2 = c2 * alpha * tau / ell
    return CriticBound(k, E1, E2, c1, c2, tau, t_alpha, problem.zeta, f, problem.lambda_min)


def _t_sequence(problem: CriticProblem, alphas: np.ndarray) -> np.ndarray:
    tv = problem.mixing.tv
    idx = np.searchsorted(-tv, -alphas, side="left")
    if np.any(idx >= tv.size):
        raise BoundInapplicable("behavior chain does not mix to the smallest step size")
    return idx


def theorem3_bound(config: CriticConfig, problem: CriticProblem, k: int) -> CriticBound:
    """Diminishing-step bound with ``alpha_k = alpha / (k + h)^eta``.

    The step-size-sum condition on ``h`` is checked in the form
    ``sum_{i=j-t_j}^{j-1} alpha_i <= (1 - gamma_c) / (114 f^2)`` for every
    ``j`` in ``[k_hat, k]``. The returned ``tau`` field holds ``k_hat``.
    """
    return theorem3_bounds(config, problem, [k])[0]


def theorem3_bounds(config: CriticConfig, problem: CriticProblem, ks) -> list[CriticBound]:
    """:func:`theorem3_bound` at several iterations, sharing the precondition checks."""
    sched = config.schedule
    if sched.kind != "diminishing":
        raise BoundInapplicable("diminishing-step bound needs a diminishing schedule")
    ks = [int(k) for k in ks]
    k_max = max(ks)
    n = config.n
    n_min = problem.n_min(config.gamma_c)
    if n < n_min:
        raise BoundInapplicable(f"horizon n={n} is below the contraction horizon {n_min}")
    alphas = sched.values(k_max + 1)
    t = _t_sequence(problem, alphas)
    ok = np.flatnonzero(np.arange(k_max + 1) >= t + n + 1)
    if not ok.size or min(ks) < ok[0]:
        raise BoundInapplicable("bound holds only for k >= k_hat = min{j : j >= t_j + n + 1}")
    k_hat = int(ok[0])
    f = f_factor(problem.mdp.discount * problem.zeta, n)
    cap = (1 - config.gamma_c) / (VARIANCE_CONSTANT * f**2)
    csum = np.concatenate([[0.0], np.cumsum(alphas)])
    js = np.arange(k_hat, k_max + 1)
    window_sums = csum[js] - csum[np.maximum(js - t[js], 0)]
    if np.any(window_sums > cap):
        bad = int(js[np.argmax(window_sums > cap)])
        raise BoundInapplicable(
            f"offset h={sched.h:g} too small: step sizes over the mixing window at j={bad} "
            f"sum to more than (1-gamma_c)/(114 f^2) = {cap:.3g}"
        )
    w_pi = problem.fixed_point(n).w_pi
    c1, c2, f = _constants(config, problem, w_pi, problem.zeta)
    ell = (1 - config.gamma_c) * problem.lambda_min
    C, sigma, _ = problem.mixing.envelope()
    L1 = (1 + math.log(C / sigma)) / math.log(1 / sigma)
    a, h, eta = sched.alpha, sched.h, sched.eta
    la = ell * a
    kh = k_hat + h
    if eta < 1 and kh < (2 * eta / la) ** (1 / (1 - eta)):
        raise BoundInapplicable("k_hat + h is below (2 eta / (l alpha))^(1/(1-eta))")
    out = []
    for k in ks:
        kk = k + h
        log_term = math.log(kk / a) + 1
        if eta < 1:
            case = "eta<1"
            E1 = c1 * math.exp(-la / (1 - eta) * (kk ** (1 - eta) - kh ** (1 - eta)))
            E2 = 4 * c2 * a**2 * L1 / la * log_term / kk**eta
        elif math.isclose(la, 1.0, rel_tol=1e-12):
            case = "eta=1, l*alpha=1"
            E1 = c1 * kh / kk
            E2 = 8 * c2 * a**2 * L1 * math.log(kk / kh) * log_term / kk
        elif la < 1:
            case = "eta=1, l*alpha<1"
            E1 = c1 * (kh / kk) ** la
            E2 = 8 * c2 * a**2 * L1 / (1 - la) * log_term / kk**la
        else:
            case = "eta=1, l*alpha>1"
            E1 = c1 * (kh / kk) ** la
            E2 = 8 * math.e * c2 * a**2 * L1 / (la - 1) * log_term / kk
        out.append(CriticBound(k, E1, E2, c1, c2, k_hat, int(t[k]), problem.zeta, f,
                               problem.lambda_min, case))
    return out
