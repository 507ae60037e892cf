"""Canonical instances with stored certification records.

Each instance is produced by a deterministic builder and frozen into
``gallery.json`` next to this module, together with a certification record
(contraction horizon, smallest Gram eigenvalue, weighted contraction at
``n = 1`` and at the contraction horizon). Tests rebuild every instance and
recompute every record against the frozen copy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..critic import CriticProblem, certify_contraction, expected_update
from ..errors import ConfigurationError, ConstructionError
from ..formats import Instance, parse_instance
from ..mdp import BehaviorPolicy, FeatureMap, Mdp, random_features, random_mdp

GALLERY_PATH = Path(__file__).with_name("gallery.json")
RECORD_KEYS = ("n_min", "lambda_min", "kappa_min", "zeta", "contraction_n1", "contraction_nmin")


@dataclass
class CanonicalInstance(Instance):
    record: dict = field(default_factory=dict)

    def problem(self) -> CriticProblem:
        return CriticProblem(self.mdp, self.features, self.target, self.behavior)


def certify(instance: Instance) -> dict:
    """Certification record computed live from the instance definition."""
    problem = CriticProblem(instance.mdp, instance.features, instance.target, instance.behavior)
    n_min = problem.n_min(instance.gamma_c)
    record = {
        "n_min": n_min,
        "lambda_min": problem.lambda_min,
        "kappa_min": problem.stationary.kappa_min,
        "zeta": problem.zeta,
        "contraction_n1": certify_contraction(problem, 1),
        "contraction_nmin": certify_contraction(problem, n_min),
    }
    on_policy = problem.with_target(instance.behavior.table)
    record["on_policy_contraction_n1"] = certify_contraction(on_policy, 1)
    return record


def _uniform(S: int, A: int) -> BehaviorPolicy:
    return BehaviorPolicy.uniform(S, A)


def build_tabular_2x2() -> Instance:
    rng = np.random.default_rng(11)
    P = rng.dirichlet(np.full(2, 2.0), size=(2, 2))
    R = rng.uniform(-0.2, 0.2, size=(2, 2))
    return Instance(
        mdp=Mdp(P, R, 0.5),
        features=FeatureMap.tabular(2, 2),
        behavior=_uniform(2, 2),
        target=np.array([[0.6, 0.4], [0.35, 0.65]]),
        gamma_c=0.1,
        name="tabular-2x2",
        notes="Small-reward tabular instance; a small gamma_c keeps the drift rate close to (1-gamma_c)*lambda_min.",
    )


def build_linear_3x2() -> Instance:
    rng = np.random.default_rng(12)
    return Instance(
        mdp=random_mdp(rng, 3, 2, 0.6),
        features=random_features(rng, 6, 3),
        behavior=_uniform(3, 2),
        target=np.array([[0.7, 0.3], [0.5, 0.5], [0.4, 0.6]]),
        gamma_c=0.5,
        name="linear-3x2",
        notes="Three random features over six state-action pairs.",
    )


def build_tabular_4x2() -> Instance:
    rng = np.random.default_rng(13)
    P = rng.dirichlet(np.full(4, 2.0), size=(2, 4))
    R = rng.uniform(0.0, 1.0, size=(4, 2))
    return Instance(
        mdp=Mdp(P, R, 0.5),
        features=FeatureMap.tabular(4, 2),
        behavior=_uniform(4, 2),
        target=np.full((4, 2), 0.5),
        gamma_c=0.5,
        name="tabular-4x2",
        notes="Four states, two actions, identity features (d = 8); used for actor-critic bound checks.",
    )


def build_sweep_2x2() -> Instance:
    rng = np.random.default_rng(0)
    return Instance(
        mdp=random_mdp(rng, 2, 2, 0.7, reward_low=0.0, reward_high=1.0),
        features=FeatureMap.tabular(2, 2),
        behavior=_uniform(2, 2),
        target=np.full((2, 2), 0.5),
        gamma_c=0.5,
        name="sweep-2x2",
        notes="Canonical tabular instance for the sample-complexity sweep.",
    )


def _triad_candidate(p: float, gamma: float) -> Instance:
    P = np.zeros((2, 2, 2))
    P[0, :, 0] = 1.0  # action 0 always leads to state 0
    P[1, :, 1] = 1.0  # action 1 always leads to state 1
    # Feature 0.5 on (s0, a1) and 1.0 on (s1, a1): the classical 1 -> 2 geometry, halved
    # so every row has L1 norm at most 1.
    Phi = np.array([[0.0], [0.5], [0.0], [1.0]])
    return Instance(
        mdp=Mdp(P, np.zeros((2, 2)), gamma),
        features=FeatureMap(Phi),
        behavior=BehaviorPolicy(np.array([[1 - p, p], [1 - p, p]])),
        target=np.array([[0.0, 1.0], [0.0, 1.0]]),
        gamma_c=0.5,
        name="deadly-triad",
        notes=(
            "Two states, one feature, zero rewards (so w_pi = 0). The target always takes "
            f"action 1; the behavior takes it with probability {p}. One-step off-policy TD "
            "diverges; TD at the contraction horizon converges."
        ),
        extra={"demo": {"alpha": 0.05, "w0": [1.0], "num_iters": 100000}},
    )


def build_deadly_triad_instance(seed: int = 7, budget: int = 1000, max_horizon: int = 40) -> Instance:
    """Search for a two-state off-policy instance where one-step TD is unstable.

    Candidates draw the behavior's probability of the target action; a
    candidate is accepted when the weighted contraction at ``n = 1`` exceeds
    1.05, the mean one-step TD dynamics are unstable, and the contraction
    horizon stays at most ``max_horizon``.
    """
    rng = np.random.default_rng(seed)
    for _ in range(budget):
        p = round(float(rng.uniform(0.02, 0.3)), 3)
        inst = _triad_candidate(p, 0.9)
        problem = CriticProblem(inst.mdp, inst.features, inst.target, inst.behavior)
        unstable = expected_update(np.ones(1), problem, 1)[0] > 0
        if (
            certify_contraction(problem, 1) > 1.05
            and unstable
            and problem.n_min(inst.gamma_c) <= max_horizon
        ):
            return inst
    raise ConstructionError(f"no divergent instance found in {budget} candidates")


BUILDERS = {
    "tabular-2x2": build_tabular_2x2,
    "linear-3x2": build_linear_3x2,
    "tabular-4x2": build_tabular_4x2,
    "sweep-2x2": build_sweep_2x2,
    "deadly-triad": build_deadly_triad_instance,
}


def freeze(path: Path = GALLERY_PATH) -> dict:
    """Rebuild every instance and write definitions plus records to ``path``."""
    doc = {}
    for name, build in BUILDERS.items():
        inst = build()
        body = inst.to_dict()
        body.update(inst.extra)
        doc[name] = {"instance": body, "certification": certify(inst)}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def _load_doc() -> dict:
    if not GALLERY_PATH.exists():
        raise ConfigurationError(f"gallery file {GALLERY_PATH} is missing")
    return json.loads(GALLERY_PATH.read_text())


def names() -> list[str]:
    return list(BUILDERS)


def load(name: str) -> CanonicalInstance:
    doc = _load_doc()
    if name not in doc:
        raise ConfigurationError(f"unknown gallery instance {name!r}; known: {', '.join(doc)}")
    entry = doc[name]
    inst = parse_instance(json.dumps(entry["instance"]), source=f"gallery:{name}")
    return CanonicalInstance(
        mdp=inst.mdp,
        features=inst.features,
        behavior=inst.behavior,
        target=inst.target,
        gamma_c=inst.gamma_c,
        name=inst.name,
        notes=inst.notes,
        extra=inst.extra,
        record=entry["certification"],
    )
