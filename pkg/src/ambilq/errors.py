"""Exception types shared across the toolkit."""


class AmbilqError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(AmbilqError):
    """Problem configuration failed to parse or has inconsistent shapes."""


class CFLError(AmbilqError):
    """Explicit time step violates the monotonicity restriction dt*s2/dx^2 <= 1/2."""


class BudgetExceededError(AmbilqError):
    """A sweep or enumeration would exceed its configured node budget."""


class SingularGainError(AmbilqError):
    """Feedback-gain denominator R + D'PD*gamma lost invertibility."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class PositivityLossError(AmbilqError):
    """Riccati state P(t) lost positive semidefiniteness (or blew up)."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class AlignmentError(AmbilqError):
    """Simulation step does not divide a scenario interval."""


class ScenarioShapeError(AmbilqError):
    """Worst-case search returned a scenario without the expected switch shape."""


class AdjointMismatchError(AmbilqError):
    """The two closed forms of the adjoint diffusion coefficient disagree."""


class DomainTooSmallWarning(UserWarning):
    """Spatial domain looks too narrow for the requested payoff/horizon."""
