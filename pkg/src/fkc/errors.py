"""Exception hierarchy shared by every fkc module."""


class FKCError(Exception):
    """Base class for all fkc errors."""


class StructuralError(FKCError):
    """Objects defined on incompatible state spaces or grids."""


class HypothesisViolation(FKCError):
    """A penalized model produced zero expected weight from some state."""


class ModelDegeneracy(FKCError):
    """A normalizer that must be positive vanished (e.g. a Q-process row)."""


class DegenerateWeights(FKCError):
    """All particle weights collapsed to zero."""


class ConfigurationError(FKCError):
    """Invalid scenario, rate specification or distribution."""
