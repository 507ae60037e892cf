"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations


class NaclabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NaclabError, ValueError):
    """Malformed input: wrong shapes, invalid probabilities, bad config fields."""


class AssumptionViolation(NaclabError):
    """A modelling assumption required by the analysis does not hold."""


class NonMixingError(AssumptionViolation):
    """The behavior chain did not reach the requested mixing accuracy."""


class NoUniqueSolution(NaclabError):
    """The projected Bellman system is singular for the requested horizon."""


class LeastSquaresDegeneracy(NaclabError):
    """Weighted least-squares problem has no unique minimizer."""


class BoundInapplicable(NaclabError):
    """A finite-sample bound was requested outside its hypotheses."""


class CertificationError(NaclabError):
    """Contraction certificate failed where one was required."""


class ConstructionError(NaclabError):
    """A search-based instance construction exhausted its budget."""
