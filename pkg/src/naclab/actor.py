"""Policy updates: sampled natural actor-critic, exact NPG and least-squares QNPG.

All three loops share the softmax update ``theta <- theta + beta * w``; they
differ only in where ``w`` comes from (a sampled critic run, the exact
projected fixed point, or a weighted least-squares fit of the exact Q).
Every loop records exact diagnostics computed from the model, never from
the samples used by the algorithm.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .critic import (
    CriticConfig,
    CriticProblem,
    DivergenceReport,
    check_theorem1_gate,
    f_factor,
    fixed_point_norm_bound,
    run_critic,
)
from .errors import (
    BoundInapplicable,
    CertificationError,
    ConfigurationError,
    LeastSquaresDegeneracy,
)
from .mdp import (
    BehaviorPolicy,
    FeatureMap,
    Mdp,
    discounted_visitation,
    exact_q,
    optimal_values,
    softmax_eval,
    stationary_info,
)
from .sampler import generate, rng_for

EVAL_RULES = ("final-iterate", "uniform-sample", "all-iterates")
NU_CHOICES = ("discounted-visitation", "stationary")
GAP_TOLERANCE = 1e-10
# Stream index reserved for drawing the uniform output index; segment t uses stream t.
OUTPUT_INDEX_STREAM = 2**63


def natural_update(theta, w, beta: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w, dtype=float)
    if theta.shape != w.shape:
        raise ConfigurationError(f"theta {theta.shape} and w {w.shape} differ in shape")
    return theta + beta * w


def multiplicative_update(policy, features: FeatureMap, w, beta: float) -> np.ndarray:
    """Reweight ``pi(a|s)`` by ``exp(beta phi(s,a)^T w)`` and renormalize each row."""
    policy = np.asarray(policy, dtype=float)
    logits = beta * (features.matrix @ np.asarray(w, dtype=float)).reshape(policy.shape)
    # Shift in log space so the largest reweighted entry of each row is exp(0), even when
    # the mass sits on actions whose logits are far below the row maximum.
    with np.errstate(divide="ignore"):
        scores = np.log(policy) + logits
    out = np.exp(scores - scores.max(axis=1, keepdims=True))
    return out / out.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ActorConfig:
    T: int
    critic: CriticConfig
    beta: float | None = None
    theta0: np.ndarray | None = None
    eval_rule: str = "uniform-sample"
    theorem2: bool = False
    start: np.ndarray | None = None

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError("T must be a positive integer")
        if self.beta is not None and not self.beta > 0:
            raise ConfigurationError("beta must be positive")
        if self.eval_rule not in EVAL_RULES:
            raise ConfigurationError(f"eval_rule must be one of {EVAL_RULES}")

    def resolve_beta(self, num_actions: int) -> float:
        default = math.log(num_actions)
        if self.theorem2 and self.beta is not None and not math.isclose(self.beta, default):
            raise ConfigurationError(f"the actor bound fixes beta = log|A| = {default:.6g}")
        beta = default if self.beta is None else self.beta
        if not beta > 0:
            raise ConfigurationError("beta = log|A| is zero for a single action; pass beta explicitly")
        return beta

    def resolve_theta0(self, dim: int) -> np.ndarray:
        if self.theta0 is None:
            return np.zeros(dim)
        theta0 = np.asarray(self.theta0, dtype=float).reshape(-1)
        if theta0.shape != (dim,):
            raise ConfigurationError(f"theta0 must have length {dim}")
        return theta0

    def resolve_start(self, num_states: int) -> np.ndarray:
        if self.start is None:
            return np.full(num_states, 1.0 / num_states)
        return np.asarray(self.start, dtype=float)


@dataclass
class NacRun:
    """Trace of an actor loop; index ``t`` refers to the policy ``pi_t``.

    ``thetas`` and ``gaps``/``values`` have ``T + 1`` entries (the final
    policy included); ``critic_outputs``, ``xi_trace`` and ``wnorms`` have one
    entry per evaluated policy ``t < T``.
    """

    thetas: np.ndarray
    critic_outputs: np.ndarray
    gaps: np.ndarray
    values: np.ndarray
    xi_trace: np.ndarray
    wnorms: np.ndarray
    beta: float
    optimal_value: float
    eval_rule: str = "final-iterate"
    t_hat: int | None = None
    divergence: tuple[int, DivergenceReport] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.critic_outputs)

    @property
    def mean_gap(self) -> float:
        """Exact expectation over a uniform output index in ``{0, ..., T-1}``."""
        return float(np.mean(self.gaps[: self.T]))

    @property
    def evaluated_gap(self) -> float:
        if self.eval_rule == "final-iterate":
            return float(self.gaps[-1])
        if self.eval_rule == "uniform-sample":
            return float(self.gaps[self.t_hat])
        return self.mean_gap


def _clamped_gap(v_star: float, v: float) -> float:
    gap = v_star - v
    if gap < -GAP_TOLERANCE * max(1.0, abs(v_star)):
        raise ArithmeticError(f"policy value {v!r} exceeds the optimal value {v_star!r}")
    return max(gap, 0.0)


class _Oracle:
    """Exact values of softmax policies for diagnostics."""

    def __init__(self, mdp: Mdp, features: FeatureMap, start: np.ndarray):
        self.mdp, self.features, self.start = mdp, features, start
        v_star, _ = optimal_values(mdp)
        self.v_star = float(start @ v_star)

    def policy(self, theta) -> np.ndarray:
        return softmax_eval(self.features, theta, self.mdp.num_actions)

    def evaluate(self, table: np.ndarray):
        q = exact_q(self.mdp, table)
        v = float(self.start @ np.sum(table * q.reshape(table.shape), axis=1))
        return q, v, _clamped_gap(self.v_star, v)


def run_nac(
    mdp: Mdp,
    features: FeatureMap,
    behavior: BehaviorPolicy,
    config: ActorConfig,
    seed: int,
    start_state: int = 0,
) -> NacRun:
    """Sampled off-policy natural actor-critic on one behavior trajectory.

    Segment ``t`` covers trajectory indices ``[t(K+n), (t+1)(K+n))`` and is
    drawn from RNG stream ``t``; the chain state carries over between segments.
    Each critic run starts from ``w = 0``.
    """
    features.check_compatible(mdp)
    crit = config.critic
    K, n = crit.num_iters, crit.n
    if K < 1:
        raise ConfigurationError("the critic needs at least one iteration per actor step")
    beta = config.resolve_beta(mdp.num_actions)
    theta = config.resolve_theta0(features.dim)
    start = config.resolve_start(mdp.num_states)
    oracle = _Oracle(mdp, features, start)
    base = CriticProblem(mdp, features, oracle.policy(theta), behavior)
    if crit.theorem1_mode:
        check_theorem1_gate(crit, base, zeta=behavior.zeta_max)
    zero = CriticConfig(n, crit.schedule, K, np.zeros(features.dim), crit.gamma_c,
                        threshold=crit.threshold, thin=max(K, 1))

    thetas, outputs, gaps, values, xis, wnorms = [theta], [], [], [], [], []
    state = start_state
    divergence = None
    for t in range(config.T):
        table = oracle.policy(theta)
        problem = base.with_target(table)
        q, v, gap = oracle.evaluate(table)
        fp = problem.fixed_point(n)
        values.append(v)
        gaps.append(gap)
        xis.append(float(np.max(np.abs(q - features.matrix @ fp.w_pi))))
        wnorms.append(float(np.linalg.norm(fp.w_pi)))
        segment = generate(mdp, behavior, state, K + n, seed, stream=t)
        state = segment.next_state
        run = run_critic(segment, zero, problem)
        if run.diverged:
            divergence = (t, run.divergence)
            break
        outputs.append(run.final)
        theta = natural_update(theta, run.final, beta)
        thetas.append(theta)
    if divergence is None:
        _, v, gap = oracle.evaluate(oracle.policy(theta))
        values.append(v)
        gaps.append(gap)
    t_hat = None
    if config.eval_rule == "uniform-sample" and outputs:
        t_hat = int(rng_for(seed, OUTPUT_INDEX_STREAM).integers(0, len(outputs)))
    d = features.dim
    return NacRun(
        thetas=np.array(thetas),
        critic_outputs=np.array(outputs).reshape(-1, d),
        gaps=np.array(gaps),
        values=np.array(values),
        xi_trace=np.array(xis),
        wnorms=np.array(wnorms),
        beta=beta,
        optimal_value=oracle.v_star,
        eval_rule=config.eval_rule,
        t_hat=t_hat,
        divergence=divergence,
    )


def run_exact_npg(
    mdp: Mdp, features: FeatureMap, behavior: BehaviorPolicy, config: ActorConfig
) -> NacRun:
    """Deterministic NPG driven by the exact projected fixed point ``w_{pi_t}``.

    Every visited policy is re-certified: the composed projection and n-step
    operator must contract by ``gamma_c`` in the weighted norm.
    """
    features.check_compatible(mdp)
    n, gamma_c = config.critic.n, config.critic.gamma_c
    beta = config.resolve_beta(mdp.num_actions)
    if beta < math.log(mdp.num_actions):
        warnings.warn(
            f"beta={beta:.6g} is below log|A|={math.log(mdp.num_actions):.6g}; "
            "the exact-NPG rate bound assumes beta >= log|A|",
            stacklevel=2,
        )
    theta = config.resolve_theta0(features.dim)
    oracle = _Oracle(mdp, features, config.resolve_start(mdp.num_states))
    base = CriticProblem(mdp, features, oracle.policy(theta), behavior)

    thetas, outputs, gaps, values, xis, wnorms = [theta], [], [], [], [], []
    for t in range(config.T + 1):
        table = oracle.policy(theta)
        q, v, gap = oracle.evaluate(table)
        values.append(v)
        gaps.append(gap)
        if t == config.T:
            break
        fp = base.with_target(table).fixed_point(n)
        if fp.contraction_estimate > gamma_c:
            raise CertificationError(
                f"iterate {t}: weighted contraction {fp.contraction_estimate:.6g} exceeds gamma_c={gamma_c}"
            )
        outputs.append(fp.w_pi)
        xis.append(float(np.max(np.abs(q - features.matrix @ fp.w_pi))))
        wnorms.append(float(np.linalg.norm(fp.w_pi)))
        theta = natural_update(theta, fp.w_pi, beta)
        thetas.append(theta)
    return NacRun(
        thetas=np.array(thetas),
        critic_outputs=np.array(outputs),
        gaps=np.array(gaps),
        values=np.array(values),
        xi_trace=np.array(xis),
        wnorms=np.array(wnorms),
        beta=beta,
        optimal_value=oracle.v_star,
        eval_rule="final-iterate",
    )


def weighted_least_squares(features: FeatureMap, q: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Minimize ``sum weights * (q - Phi w)^2`` through the normal equations.

    Raises ``LeastSquaresDegeneracy`` when the rows with positive weight do
    not determine ``w`` uniquely.
    """
    Phi = features.matrix
    support = weights > 0
    if np.linalg.matrix_rank(Phi[support]) < features.dim:
        raise LeastSquaresDegeneracy(
            f"features restricted to the {int(support.sum())} positively weighted pairs "
            f"have rank below d={features.dim}"
        )
    gram = Phi.T @ (weights[:, None] * Phi)
    return np.linalg.solve(gram, Phi.T @ (weights * q))


def run_qnpg(
    mdp: Mdp,
    features: FeatureMap,
    config: ActorConfig,
    nu_choice: str = "discounted-visitation",
    behavior: BehaviorPolicy | None = None,
) -> NacRun:
    """QNPG with ``w^pi`` the ``nu(s) pi(a|s)``-weighted least-squares fit of ``Q^pi``.

    ``nu`` is the discounted visitation of ``pi`` from the start distribution,
    or the behavior chain's stationary distribution. Per-iterate weighted
    fitting error and minimum weight are kept in ``extra``.
    """
    if nu_choice not in NU_CHOICES:
        raise ConfigurationError(f"nu_choice must be one of {NU_CHOICES}")
    if nu_choice == "stationary" and behavior is None:
        raise ConfigurationError("stationary weighting needs a behavior policy")
    features.check_compatible(mdp)
    beta = config.resolve_beta(mdp.num_actions)
    theta = config.resolve_theta0(features.dim)
    start = config.resolve_start(mdp.num_states)
    oracle = _Oracle(mdp, features, start)
    mu_b = stationary_info(mdp, behavior).mu_b if nu_choice == "stationary" else None

    thetas, outputs, gaps, values, xis, wnorms = [theta], [], [], [], [], []
    eps_bias, min_weight = [], []
    for t in range(config.T + 1):
        table = oracle.policy(theta)
        q, v, gap = oracle.evaluate(table)
        values.append(v)
        gaps.append(gap)
        if t == config.T:
            break
        nu = discounted_visitation(mdp, table, start) if mu_b is None else mu_b
        weights = (nu[:, None] * table).reshape(-1)
        w = weighted_least_squares(features, q, weights)
        resid = q - features.matrix @ w
        outputs.append(w)
        xis.append(float(np.max(np.abs(resid))))
        wnorms.append(float(np.linalg.norm(w)))
        eps_bias.append(float(np.sum(weights * resid**2)))
        min_weight.append(float(weights.min()))
        theta = natural_update(theta, w, beta)
        thetas.append(theta)
    return NacRun(
        thetas=np.array(thetas),
        critic_outputs=np.array(outputs),
        gaps=np.array(gaps),
        values=np.array(values),
        xi_trace=np.array(xis),
        wnorms=np.array(wnorms),
        beta=beta,
        optimal_value=oracle.v_star,
        eval_rule="all-iterates",
        extra={"eps_bias": np.array(eps_bias), "min_weight": np.array(min_weight), "nu": nu_choice},
    )


def xi_proxy(run: NacRun) -> float:
    """Largest ``||Q^{pi_t} - Phi w_t||_inf`` over visited policies.

    This lower-bounds the supremum over all parameters, which is not computable.
    """
    if len(run.xi_trace) == 0:
        raise ConfigurationError("run has an empty approximation-error trace")
    return float(np.max(run.xi_trace))


def fact1_bound(gamma: float, beta: float, num_actions: int, T: int, offset: int = 0) -> float:
    """``log|A| / ((1-gamma) beta (T+offset)) + 1 / ((1-gamma)^2 (T+offset))``."""
    m = T + offset
    if m < 1:
        raise BoundInapplicable("exact-NPG bound needs T + offset >= 1")
    return math.log(num_actions) / ((1 - gamma) * beta * m) + 1 / ((1 - gamma) ** 2 * m)


def qnpg_bound(gamma: float, T: int, xi_error: float = 0.0) -> float:
    """``2 / ((1-gamma)^2 T) + 4 xi_error / (1-gamma)^2``."""
    return 2 / ((1 - gamma) ** 2 * T) + 4 * xi_error / (1 - gamma) ** 2


def qnpg_weighted_bound(run: NacRun, gamma: float) -> float:
    """Bound with ``sqrt(eps_bias / lambda)`` in place of the max-norm error."""
    eps = float(np.max(run.extra["eps_bias"]))
    lam = float(np.min(run.extra["min_weight"]))
    if lam <= 0:
        raise BoundInapplicable("some state-action pair has zero weight")
    return 2 / ((1 - gamma) ** 2 * run.T) + 4 / (1 - gamma) ** 2 * math.sqrt(eps / lam)


@dataclass(frozen=True)
class BoundReport:
    A1: float
    A2: float
    A3: float
    A4: float
    c3: float
    c3_visited: float | None
    T: int
    K: int
    alpha: float
    lambda_min: float
    gamma: float
    gamma_c: float
    zeta_max: float
    t_alpha: int
    n: int
    xi: float
    xi_label: str = "proxy (visited-iterate maximum; lower-bounds the supremum over all policies)"

    @property
    def total(self) -> float:
        return self.A1 + self.A2 + self.A3 + self.A4

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["total"] = self.total
        return out


def theorem2_bound(
    mdp: Mdp,
    features: FeatureMap,
    behavior: BehaviorPolicy,
    config: ActorConfig,
    xi: float = 0.0,
    visited_max_wnorm: float | None = None,
) -> BoundReport:
    """Four-term bound on ``V*(mu) - E V^{pi_That}(mu)`` for the sampled actor-critic.

    ``c3`` uses the closed-form bound on ``max_pi ||w_pi||`` so the result
    holds for every policy the actor might visit; the visited maximum is
    echoed as ``c3_visited`` for comparison.
    """
    crit = config.critic
    config.resolve_beta(mdp.num_actions)
    problem = CriticProblem(mdp, features, behavior.table, behavior)
    check_theorem1_gate(crit, problem, zeta=behavior.zeta_max)
    alpha, n, K, T = crit.schedule.alpha, crit.n, crit.num_iters, config.T
    gamma, gamma_c = mdp.discount, crit.gamma_c
    t_alpha = problem.mixing.t_alpha(alpha)
    tau = t_alpha + n + 1
    if K < tau:
        raise BoundInapplicable(f"critic iterations K={K} below t_alpha + n + 1 = {tau}")
    lam = problem.lambda_min
    c3 = 1 + fixed_point_norm_bound(gamma, gamma_c, lam)
    scale = 1 / (1 - gamma) ** 2
    A1 = 2 * scale / T
    A2 = 4 * xi * scale
    A3 = 4 * scale * c3 * (1 - (1 - gamma_c) * lam * alpha) ** ((K - tau) / 2)
    f = f_factor(gamma * behavior.zeta_max, n)
    A4 = 44 * c3 * f * math.sqrt(alpha * tau) * scale / (math.sqrt(1 - gamma_c) * math.sqrt(lam))
    return BoundReport(
        A1=A1, A2=A2, A3=A3, A4=A4, c3=c3,
        c3_visited=None if visited_max_wnorm is None else 1 + visited_max_wnorm,
        T=T, K=K, alpha=alpha, lambda_min=lam, gamma=gamma, gamma_c=gamma_c,
        zeta_max=behavior.zeta_max, t_alpha=t_alpha, n=n, xi=xi,
    )
