"""Exception taxonomy shared across the package.

The split mirrors how failures are reported downstream: configuration and
parameter errors are caller mistakes, numerical defects mean a computation
produced something it guarantees not to, and degenerate likelihoods are a
data/model mismatch in the Bayesian path. Tolerance-not-met is deliberately
*not* an exception; greedy drivers report it as a flag on their result.
"""


class ConfigurationError(ValueError):
    """A config file, argument combination, or precondition is invalid."""


class InvalidParameterError(ValueError):
    """A parameter value lies outside its admissible range."""


class InsufficientSamplesError(ValueError):
    """An operation needs more samples than the accumulator has seen."""


class NumericalDefectError(RuntimeError):
    """A solver or estimator violated one of its numerical guarantees."""


class DegenerateLikelihoodError(RuntimeError):
    """All importance weights underflowed; the posterior is unresolvable."""
