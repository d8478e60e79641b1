"""Exception hierarchy. CLI exit codes map onto these classes."""


class PanelFEError(Exception):
    """Base class for all package errors."""


class InputError(PanelFEError):
    """Malformed input: unreadable files, bad columns, duplicate cells."""


class ValidationError(PanelFEError):
    """Data fails a family- or design-level identification check."""


class DisconnectedPanelError(ValidationError):
    """The unit-period incidence graph has more than one component."""

    def __init__(self, components):
        self.components = components
        parts = "; ".join(
            f"component {k}: units {sorted(c['units'])[:8]}{'...' if len(c['units']) > 8 else ''}, "
            f"periods {sorted(c['periods'])[:8]}{'...' if len(c['periods']) > 8 else ''}"
            for k, c in enumerate(components)
        )
        super().__init__(
            f"unit-period incidence graph is disconnected ({len(components)} components): {parts}"
        )


class ConvergenceError(PanelFEError):
    """An iterative solver did not reach its tolerance."""


class SeparationError(ConvergenceError):
    """A fixed effect diverges (perfect classification or zero-count group)."""


class SingularHessianError(PanelFEError):
    """The concentrated Hessian is singular or not positive definite."""
