"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter value."""


class ShapeError(ValueError):
    """Array arguments whose shapes or dimensions do not line up."""


class DomainError(ValueError):
    """Values outside the documented domain of an operation."""


class FittingError(RuntimeError):
    """Dual-potential fitting could not run to completion."""


class EstimationError(ValueError):
    """Distance estimation called with unusable inputs."""


class OracleScopeError(ValueError):
    """Exact oracle invoked outside its tractable regime."""


class CollectionError(RuntimeError):
    """Rollout-state collection could not satisfy the request."""


class StaleCacheError(RuntimeError):
    """Gradient cache used after the state it was built from moved on."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; last good checkpoint retained."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
