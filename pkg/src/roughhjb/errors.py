"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an argument violates an operation's precondition."""


class ValidationFailure(ValueError):
    """Raised when an object fails a structural check.

    ``offending`` carries whatever the check found (grid points, indices).
    """

    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = offending if offending is not None else []


class UnsupportedFunctional(TypeError):
    """A functional cannot provide what was asked (bumped input, missing derivative)."""


class UnsupportedConfiguration(ValueError):
    pass


class OutOfDomain(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Non-finite state during stepping; ``last_valid`` is the last finite grid index."""

    def __init__(self, message, last_valid):
        super().__init__(message)
        self.last_valid = last_valid


class UnboundedHamiltonian(ArithmeticError):
    pass
