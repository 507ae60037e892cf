from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from naclab.mdp import BehaviorPolicy, FeatureMap, random_features, random_mdp, random_policy

settings.register_profile(
    "naclab", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("naclab")


def random_instance(rng, S, A, gamma, d=None, reward_low=-1.0, reward_high=1.0):
    """Random MDP, features (tabular when ``d`` is None), behavior and target tables."""
    mdp = random_mdp(rng, S, A, gamma, reward_low, reward_high)
    features = FeatureMap.tabular(S, A) if d is None else random_features(rng, S * A, d)
    behavior = BehaviorPolicy(0.2 / A + 0.8 * random_policy(rng, S, A))
    target = random_policy(rng, S, A)
    return mdp, features, behavior, target


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
