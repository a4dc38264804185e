"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid user-supplied parameters (cohort spec, geometry, training config)."""


class ShapeMismatchError(ValueError):
    """Grids or batches that must be co-registered have different shapes."""


class InvariantError(RuntimeError):
    """An internal invariant was breached at runtime (e.g. a violated majorant)."""


class OrganAbsentError(ValueError):
    """Mean organ dose requested for an empty mask or a massless organ."""
