"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid or inconsistent scenario configuration."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a statistics function."""


class MeshError(Exception):
    """Invalid mesh construction or incompatible mesh pair."""


class MeshMismatch(MeshError):
    """Two states or meshes that were expected to share a mesh do not."""


class MassOutOfRange(ValueError):
    """Requested anion mass target outside the attainable open interval."""


class NoConvergence(Exception):
    """Newton iteration failed to reach tolerance."""

    def __init__(self, iterations, final_norm, message=""):
        self.iterations = iterations
        self.final_norm = final_norm
        super().__init__(
            message or f"no convergence after {iterations} iterations "
            f"(residual {final_norm:.3e})"
        )


class StepFailure(Exception):
    """Time step failed even after exhausting step bisection."""
