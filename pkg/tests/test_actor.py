from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from conftest import random_instance
from naclab.actor import (
    ActorConfig,
    NacRun,
    fact1_bound,
    multiplicative_update,
    natural_update,
    qnpg_bound,
    qnpg_weighted_bound,
    run_exact_npg,
    run_nac,
    run_qnpg,
    theorem2_bound,
    weighted_least_squares,
    xi_proxy,
)
from naclab.critic import CriticConfig, CriticProblem, StepSchedule, compliant_alpha, f_factor
from naclab.errors import (
    BoundInapplicable,
    CertificationError,
    ConfigurationError,
    LeastSquaresDegeneracy,
)
from naclab.harness import gallery
from naclab.mdp import (
    BehaviorPolicy,
    FeatureMap,
    Mdp,
    discounted_visitation,
    exact_q,
    optimal_values,
    random_features,
    softmax_eval,
    state_values,
)


def _exact_critic(problem: CriticProblem, gamma_c: float = 0.5, K: int = 1) -> CriticConfig:
    n = problem.n_min(gamma_c)
    return CriticConfig(n, StepSchedule.constant(0.1), K, np.zeros(problem.features.dim), gamma_c)


def _tabular_setup(seed, S=3, A=2, gamma=0.9):
    rng = np.random.default_rng(seed)
    mdp, features, behavior, target = random_instance(rng, S, A, gamma, reward_low=0.0)
    return mdp, features, behavior, CriticProblem(mdp, features, target, behavior)


# natural_update


def test_natural_update_zero_direction_and_zero_step():
    theta = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(natural_update(theta, np.zeros(3), 0.7), theta)
    np.testing.assert_array_equal(natural_update(theta, np.array([1.0, 2.0, 3.0]), 0.0), theta)


def test_natural_update_matches_loop(rng):
    theta, w, beta = rng.normal(size=6), rng.normal(size=6), 0.37
    expected = [theta[i] + beta * w[i] for i in range(6)]
    np.testing.assert_array_equal(natural_update(theta, w, beta), expected)


def test_natural_update_shape_mismatch():
    with pytest.raises(ConfigurationError):
        natural_update(np.zeros(3), np.zeros(4), 1.0)


# multiplicative_update


def test_multiplicative_update_zero_w_keeps_policy(rng):
    features = random_features(rng, 6, 3)
    pi = softmax_eval(features, rng.normal(size=3), 2)
    np.testing.assert_allclose(multiplicative_update(pi, features, np.zeros(3), 2.0), pi, atol=1e-15)


def test_multiplicative_update_tabular_is_exponentiated_q(rng):
    features = FeatureMap.tabular(3, 2)
    pi = np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])
    q = rng.normal(size=6)
    beta = 0.8
    expected = pi * np.exp(beta * q.reshape(3, 2))
    expected /= expected.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(multiplicative_update(pi, features, q, beta), expected, atol=1e-14)


def test_multiplicative_update_equals_parameter_step_on_1000_draws():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        S, A = int(rng.integers(1, 5)), int(rng.integers(2, 4))
        d = int(rng.integers(1, min(6, S * A + 1)))
        features = random_features(rng, S * A, d)
        theta, w = rng.normal(scale=2.0, size=d), rng.normal(scale=2.0, size=d)
        beta = float(rng.uniform(0, 3))
        lhs = multiplicative_update(softmax_eval(features, theta, A), features, w, beta)
        rhs = softmax_eval(features, theta + beta * w, A)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    assert worst < 1e-12


def test_multiplicative_update_survives_mass_on_low_logit_action():
    # All mass on action 0 while action 1 carries the larger logit: the naive shift by
    # max logit underflows every product in the row.
    features = FeatureMap(np.eye(2))
    out = multiplicative_update(np.array([[1.0, 0.0]]), features, np.array([-900.0, 0.0]), 1.0)
    np.testing.assert_array_equal(out, [[1.0, 0.0]])


@example(seed=142, beta=45.0)
@given(st.integers(0, 2**32 - 1), st.floats(0, 50))
def test_multiplicative_update_rows_stay_normalized(seed, beta):
    rng = np.random.default_rng(seed)
    features = random_features(rng, 8, 3)
    pi = softmax_eval(features, rng.normal(size=3), 2)
    for _ in range(20):
        pi = multiplicative_update(pi, features, rng.normal(scale=5, size=3), beta)
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(pi >= 0)


# ActorConfig


def test_actor_config_validation(rng):
    problem = _tabular_setup(0)[3]
    crit = _exact_critic(problem)
    for bad in (dict(T=0), dict(T=2, beta=0.0), dict(T=2, eval_rule="best")):
        with pytest.raises(ConfigurationError):
            ActorConfig(critic=crit, **bad)
    assert ActorConfig(T=1, critic=crit).resolve_beta(3) == math.log(3)
    with pytest.raises(ConfigurationError):
        ActorConfig(T=1, critic=crit, beta=0.3, theorem2=True).resolve_beta(2)


# run_nac


def test_nac_zero_step_keeps_initial_policy():
    mdp, features, behavior, problem = _tabular_setup(3)
    crit = CriticConfig(2, StepSchedule.constant(0.05), 50, np.zeros(6), 0.5)
    theta0 = np.linspace(-1, 1, 6)
    run = run_nac(mdp, features, behavior, ActorConfig(T=1, critic=crit, beta=1e-300, theta0=theta0), seed=4)
    np.testing.assert_array_equal(run.thetas[-1], theta0)
    assert run.gaps[-1] == pytest.approx(run.gaps[0], abs=1e-15)
    pi0 = softmax_eval(features, theta0, 2)
    v_star, _ = optimal_values(mdp)
    expected_gap = np.mean(v_star) - np.mean(state_values(mdp, pi0))
    assert run.gaps[0] == pytest.approx(expected_gap, abs=1e-12)


def test_nac_theta_trace_follows_critic_outputs():
    mdp, features, behavior, problem = _tabular_setup(5)
    crit = CriticConfig(3, StepSchedule.constant(0.05), 200, np.zeros(6), 0.5)
    run = run_nac(mdp, features, behavior, ActorConfig(T=5, critic=crit), seed=11)
    assert run.thetas.shape == (6, 6) and run.critic_outputs.shape == (5, 6)
    for t in range(5):
        np.testing.assert_array_equal(run.thetas[t + 1], run.thetas[t] + run.beta * run.critic_outputs[t])
    assert np.all(run.gaps >= 0)
    assert 0 <= run.t_hat < 5 and run.divergence is None
    assert run.evaluated_gap == run.gaps[run.t_hat]


def test_nac_is_reproducible_per_seed():
    mdp, features, behavior, _ = _tabular_setup(6)
    crit = CriticConfig(2, StepSchedule.constant(0.05), 100, np.zeros(6), 0.5)
    cfg = ActorConfig(T=3, critic=crit)
    a, b = run_nac(mdp, features, behavior, cfg, 9), run_nac(mdp, features, behavior, cfg, 9)
    np.testing.assert_array_equal(a.thetas, b.thetas)
    assert a.t_hat == b.t_hat
    c = run_nac(mdp, features, behavior, cfg, 10)
    assert not np.array_equal(a.thetas, c.thetas)


def test_nac_records_critic_divergence_with_iterate():
    mdp, features, behavior, _ = _tabular_setup(4)
    # A threshold below the first iterate's norm forces the divergence path on the first segment.
    crit = CriticConfig(2, StepSchedule.constant(0.5), 500, np.zeros(6), 0.5, threshold=1e-3)
    run = run_nac(mdp, features, behavior, ActorConfig(T=3, critic=crit), seed=0)
    assert run.divergence is not None
    t, report = run.divergence
    assert t == 0 and report.step <= 500
    assert run.T == 0 and len(run.gaps) == 1 and run.t_hat is None


def test_nac_policy_rows_stay_normalized():
    mdp, features, behavior, _ = _tabular_setup(7)
    crit = CriticConfig(2, StepSchedule.constant(0.1), 100, np.zeros(6), 0.5)
    run = run_nac(mdp, features, behavior, ActorConfig(T=10, critic=crit, beta=5.0), seed=1)
    for theta in run.thetas:
        np.testing.assert_allclose(softmax_eval(features, theta, 2).sum(axis=1), 1.0, atol=1e-12)


# run_exact_npg


def test_exact_npg_bandit_converges_to_best_arm():
    mdp = Mdp(np.ones((3, 1, 1)), np.array([[0.2, 0.9, 0.5]]), 0.5)
    features = FeatureMap.tabular(1, 3)
    behavior = BehaviorPolicy.uniform(1, 3)
    problem = CriticProblem(mdp, features, behavior.table, behavior)
    run = run_exact_npg(mdp, features, behavior, ActorConfig(T=60, critic=_exact_critic(problem)))
    assert np.all(np.diff(run.gaps) <= 1e-15)
    final = softmax_eval(features, run.thetas[-1], 3)
    assert final[0, 1] > 0.99
    assert run.gaps[-1] < 1e-2


def test_exact_npg_tabular_equals_classical_npg():
    mdp, features, behavior, problem = _tabular_setup(8)
    run = run_exact_npg(mdp, features, behavior, ActorConfig(T=5, critic=_exact_critic(problem)))
    theta = np.zeros(6)
    for t in range(5):
        q = exact_q(mdp, softmax_eval(features, theta, 2))
        np.testing.assert_allclose(run.critic_outputs[t], q, atol=1e-9)
        theta = theta + run.beta * q
    np.testing.assert_allclose(run.thetas[-1], theta, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_exact_npg_monotone_and_rate_bound(seed):
    mdp, features, behavior, problem = _tabular_setup(100 + seed, S=4, A=3, gamma=0.9)
    run = run_exact_npg(mdp, features, behavior, ActorConfig(T=200, critic=_exact_critic(problem)))
    assert np.all(np.diff(run.values) >= -1e-12)
    for T in range(1, 201):
        # The final policy after T updates is pi_T; the bound is checked both as printed
        # (denominator T) and in the tighter form that counts T + 1 evaluated policies.
        assert run.gaps[T] <= fact1_bound(0.9, run.beta, 3, T)
        assert run.gaps[T] <= fact1_bound(0.9, run.beta, 3, T, offset=1)


def test_exact_npg_warns_below_log_actions():
    mdp, features, behavior, problem = _tabular_setup(9)
    with pytest.warns(UserWarning, match="below log"):
        run_exact_npg(mdp, features, behavior, ActorConfig(T=1, critic=_exact_critic(problem), beta=0.1))


def test_exact_npg_certification_failure_names_iterate():
    inst = gallery.load("deadly-triad")
    crit = CriticConfig(1, StepSchedule.constant(0.1), 1, np.zeros(inst.features.dim), inst.gamma_c)
    cfg = ActorConfig(T=3, critic=crit, beta=1.0, theta0=np.zeros(inst.features.dim))
    with pytest.raises(CertificationError, match="iterate 0"):
        run_exact_npg(inst.mdp, inst.features, inst.behavior, cfg)


def test_exact_npg_rate_bound_value():
    assert fact1_bound(0.9, 1.0, 2, 10) == pytest.approx(math.log(2) / (0.1 * 10) + 1 / (0.01 * 10))
    with pytest.raises(BoundInapplicable):
        fact1_bound(0.9, 1.0, 2, 0)


# run_qnpg


def test_weighted_least_squares_recovers_exact_fit(rng):
    features = random_features(rng, 8, 3)
    w_true = rng.normal(size=3)
    weights = rng.uniform(0.1, 1.0, size=8)
    np.testing.assert_allclose(weighted_least_squares(features, features.matrix @ w_true, weights), w_true)


def test_weighted_least_squares_matches_lstsq(rng):
    features = random_features(rng, 10, 4)
    q, weights = rng.normal(size=10), rng.uniform(0.1, 1.0, size=10)
    root = np.sqrt(weights)
    expected = np.linalg.lstsq(root[:, None] * features.matrix, root * q, rcond=None)[0]
    np.testing.assert_allclose(weighted_least_squares(features, q, weights), expected, atol=1e-10)


def test_weighted_least_squares_rank_deficient():
    features = FeatureMap(np.array([[0.5, 0.5], [0.25, 0.25], [0.1, 0.2]]))
    with pytest.raises(LeastSquaresDegeneracy):
        weighted_least_squares(features, np.ones(3), np.array([1.0, 1.0, 0.0]))


@pytest.mark.parametrize("nu", ["discounted-visitation", "stationary"])
def test_qnpg_tabular_fits_q_exactly(nu):
    mdp, features, behavior, problem = _tabular_setup(12, S=3, A=2, gamma=0.8)
    run = run_qnpg(mdp, features, ActorConfig(T=30, critic=_exact_critic(problem)), nu, behavior)
    assert xi_proxy(run) < 1e-10
    assert np.all(run.extra["eps_bias"] < 1e-20)
    for T in (1, 5, 30):
        sub = np.mean(run.gaps[:T])
        assert sub <= qnpg_bound(0.8, T) + 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_qnpg_realizable_average_gap_bound(seed):
    mdp, features, behavior, problem = _tabular_setup(200 + seed, S=4, A=2, gamma=0.9)
    run = run_qnpg(mdp, features, ActorConfig(T=300, critic=_exact_critic(problem)))
    for T in range(1, 301):
        assert np.mean(run.gaps[:T]) <= 2 / ((1 - 0.9) ** 2 * T) + 1e-10


def test_qnpg_matches_exact_npg_when_q_is_representable():
    mdp, features, behavior, problem = _tabular_setup(13)
    cfg = ActorConfig(T=20, critic=_exact_critic(problem))
    a = run_qnpg(mdp, features, cfg)
    b = run_exact_npg(mdp, features, behavior, cfg)
    np.testing.assert_allclose(a.thetas, b.thetas, atol=1e-7)


def test_qnpg_misspecified_reports_bias_and_min_weight():
    inst = gallery.load("linear-3x2")
    cfg = ActorConfig(T=10, critic=_exact_critic(inst.problem(), inst.gamma_c))
    run = run_qnpg(inst.mdp, inst.features, cfg)
    start = np.full(inst.mdp.num_states, 1 / inst.mdp.num_states)
    theta = np.zeros(inst.features.dim)
    for t in range(10):
        pi = softmax_eval(inst.features, theta, inst.mdp.num_actions)
        nu = discounted_visitation(inst.mdp, pi, start)
        weights = [nu[s] * pi[s, a] for s in range(inst.mdp.num_states) for a in range(inst.mdp.num_actions)]
        assert run.extra["min_weight"][t] == pytest.approx(min(weights), rel=1e-12)
        resid = exact_q(inst.mdp, pi) - inst.features.matrix @ run.critic_outputs[t]
        assert run.extra["eps_bias"][t] == pytest.approx(float(np.dot(weights, resid**2)), rel=1e-9)
        theta = theta + run.beta * run.critic_outputs[t]
    assert run.extra["eps_bias"].max() > 0
    bound = qnpg_weighted_bound(run, inst.mdp.discount)
    assert bound >= run.mean_gap and math.isfinite(bound)


def test_qnpg_reports_underflowed_weights_as_degenerate():
    # Long runs drive suboptimal action probabilities below the float64 range; the fit
    # then has pairs with exactly zero weight and must not be silently completed.
    # Here the logit gap grows by beta * 1 per iteration and passes the exp range near t = 1100.
    mdp = Mdp(np.ones((2, 1, 1)), np.array([[0.0, 1.0]]), 0.9)
    features = FeatureMap.tabular(1, 2)
    behavior = BehaviorPolicy.uniform(1, 2)
    problem = CriticProblem(mdp, features, behavior.table, behavior)
    with pytest.raises(LeastSquaresDegeneracy, match="rank below"):
        run_qnpg(mdp, features, ActorConfig(T=2000, critic=_exact_critic(problem)))


def test_qnpg_stationary_needs_behavior():
    mdp, features, behavior, problem = _tabular_setup(14)
    with pytest.raises(ConfigurationError):
        run_qnpg(mdp, features, ActorConfig(T=1, critic=_exact_critic(problem)), "stationary")
    with pytest.raises(ConfigurationError):
        run_qnpg(mdp, features, ActorConfig(T=1, critic=_exact_critic(problem)), "uniform")


# xi_proxy


def _run_with_trace(trace):
    return NacRun(np.zeros((1, 1)), np.zeros((len(trace), 1)), np.zeros(1), np.zeros(1),
                  np.array(trace), np.zeros(len(trace)), 1.0, 0.0)


def test_xi_proxy_single_and_empty():
    assert xi_proxy(_run_with_trace([0.25])) == 0.25
    with pytest.raises(ConfigurationError):
        xi_proxy(_run_with_trace([]))


def test_xi_proxy_equals_rescan_of_stored_iterates():
    inst = gallery.load("linear-3x2")
    problem = inst.problem()
    cfg = ActorConfig(T=8, critic=_exact_critic(problem, inst.gamma_c))
    run = run_exact_npg(inst.mdp, inst.features, inst.behavior, cfg)
    rescan = 0.0
    for t in range(run.T):
        pi = softmax_eval(inst.features, run.thetas[t], inst.mdp.num_actions)
        w = problem.with_target(pi).fixed_point(cfg.critic.n).w_pi
        rescan = max(rescan, float(np.max(np.abs(exact_q(inst.mdp, pi) - inst.features.matrix @ w))))
    assert xi_proxy(run) == pytest.approx(rescan, rel=1e-12)
    assert xi_proxy(run) > 0


def test_xi_proxy_tabular_is_roundoff():
    mdp, features, behavior, problem = _tabular_setup(15)
    run = run_exact_npg(mdp, features, behavior, ActorConfig(T=5, critic=_exact_critic(problem)))
    assert xi_proxy(run) < 1e-12


# actor bound


def _compliant_config(inst, T=10, K=None):
    problem = CriticProblem(inst.mdp, inst.features, inst.behavior.table, inst.behavior)
    n = problem.n_min(inst.gamma_c)
    alpha = compliant_alpha(problem, n, inst.gamma_c, zeta=inst.behavior.zeta_max)
    tau = problem.mixing.t_alpha(alpha) + n + 1
    K = 4 * tau if K is None else K
    crit = CriticConfig(n, StepSchedule.constant(alpha), K, np.zeros(inst.features.dim), inst.gamma_c, theorem1_mode=True)
    return ActorConfig(T=T, critic=crit, theorem2=True), problem


def _brute_tv(P, mu, k):
    Pk = np.linalg.matrix_power(P, k)
    return float(np.max(0.5 * np.abs(Pk - mu[None, :]).sum(axis=1)))


def test_actor_bound_matches_second_implementation():
    inst = gallery.load("tabular-4x2")
    cfg, problem = _compliant_config(inst)
    report = theorem2_bound(inst.mdp, inst.features, inst.behavior, cfg, xi=0.01)
    gamma, gamma_c = inst.mdp.discount, inst.gamma_c
    alpha, n, K = cfg.critic.schedule.alpha, cfg.critic.n, cfg.critic.num_iters
    # Independent pieces: mixing time by matrix powers, lambda_min by the explicit Gram sum.
    P = np.einsum("sa,ast->st", inst.behavior.table, inst.mdp.transitions)
    mu = problem.stationary.mu_b
    t_alpha = 0
    while _brute_tv(P, mu, t_alpha) > alpha:
        t_alpha += 1
    kappa = (mu[:, None] * inst.behavior.table).reshape(-1)
    gram = sum(kappa[i] * np.outer(inst.features.matrix[i], inst.features.matrix[i]) for i in range(len(kappa)))
    lam = min(np.linalg.eigvalsh(gram))
    zeta = float(np.max(1 / inst.behavior.table))
    x = gamma * zeta
    f = n + 1 if x == 1 else (1 - x ** (n + 1)) / (1 - x)
    c3 = 1 + 2 / ((1 - gamma) * math.sqrt(1 - gamma_c) * math.sqrt(lam))
    tau = t_alpha + n + 1
    assert report.t_alpha == t_alpha
    assert report.A1 == pytest.approx(2 / ((1 - gamma) ** 2 * 10), rel=1e-15)
    assert report.A2 == pytest.approx(4 * 0.01 / (1 - gamma) ** 2, rel=1e-15)
    a3 = 4 * c3 * (1 - (1 - gamma_c) * lam * alpha) ** ((K - tau) / 2) / (1 - gamma) ** 2
    a4 = 44 * c3 * f * math.sqrt(alpha * tau) / ((1 - gamma) ** 2 * math.sqrt(1 - gamma_c) * math.sqrt(lam))
    assert report.A3 == pytest.approx(a3, rel=1e-10)
    assert report.A4 == pytest.approx(a4, rel=1e-10)
    assert report.c3 == pytest.approx(c3, rel=1e-12)
    assert f == pytest.approx(f_factor(x, n), rel=1e-12)
    assert report.total == pytest.approx(report.A1 + report.A2 + report.A3 + report.A4)


def test_actor_bound_a1_halves_when_T_doubles():
    inst = gallery.load("tabular-4x2")
    cfg, _ = _compliant_config(inst, T=7)
    cfg2, _ = _compliant_config(inst, T=14)
    a = theorem2_bound(inst.mdp, inst.features, inst.behavior, cfg)
    b = theorem2_bound(inst.mdp, inst.features, inst.behavior, cfg2)
    assert b.A1 == a.A1 / 2
    assert (a.A2, a.A3, a.A4) == (b.A2, b.A3, b.A4)
    assert a.A2 == 0.0 and all(v >= 0 for v in (a.A1, a.A3, a.A4))


def test_actor_bound_gate_failures():
    inst = gallery.load("tabular-4x2")
    cfg, problem = _compliant_config(inst)
    crit = cfg.critic
    too_big = CriticConfig(crit.n, StepSchedule.constant(0.5), crit.num_iters, crit.w0, crit.gamma_c, theorem1_mode=True)
    with pytest.raises(BoundInapplicable, match="step size too large"):
        theorem2_bound(inst.mdp, inst.features, inst.behavior, ActorConfig(T=5, critic=too_big, theorem2=True))
    short = CriticConfig(crit.n, crit.schedule, crit.n + 1, crit.w0, crit.gamma_c, theorem1_mode=True)
    with pytest.raises(BoundInapplicable, match="below t_alpha"):
        theorem2_bound(inst.mdp, inst.features, inst.behavior, ActorConfig(T=5, critic=short, theorem2=True))
    low_n = CriticConfig(1, crit.schedule, crit.num_iters, crit.w0, crit.gamma_c, theorem1_mode=True)
    if problem.n_min(crit.gamma_c) > 1:
        with pytest.raises(BoundInapplicable, match="horizon"):
            theorem2_bound(inst.mdp, inst.features, inst.behavior, ActorConfig(T=5, critic=low_n, theorem2=True))
