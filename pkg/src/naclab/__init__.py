"""Off-policy n-step TD critic, natural actor-critic and exact NPG on finite MDPs."""

from .errors import (
    AssumptionViolation,
    BoundInapplicable,
    CertificationError,
    ConfigurationError,
    ConstructionError,
    LeastSquaresDegeneracy,
    NaclabError,
    NonMixingError,
    NoUniqueSolution,
)
from .mdp import BehaviorPolicy, FeatureMap, Mdp, SoftmaxPolicy, StationaryInfo

__all__ = [
    "AssumptionViolation",
    "BehaviorPolicy",
    "BoundInapplicable",
    "CertificationError",
    "ConfigurationError",
    "ConstructionError",
    "FeatureMap",
    "LeastSquaresDegeneracy",
    "Mdp",
    "NaclabError",
    "NonMixingError",
    "NoUniqueSolution",
    "SoftmaxPolicy",
    "StationaryInfo",
]
