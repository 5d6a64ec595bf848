"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on shapes, dimensions or value ranges was violated."""


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, time: float, message: str | None = None):
        self.time = float(time)
        super().__init__(message or f"non-finite state at t={self.time:.6g}")


class SamplingError(RuntimeError):
    """Rejection sampling ran out of retries."""


class UnsupportedLibraryError(ValueError):
    """A basis library is not control-affine or is otherwise malformed."""


class ConditioningError(ArithmeticError):
    """A linear system was singular or too badly conditioned to solve."""


class StabilityError(ValueError):
    """A matrix required to be Hurwitz is not."""


class InfeasibleError(RuntimeError):
    """A single-constraint QP has an empty feasible set."""

    def __init__(self, message: str, state=None):
        self.state = state
        super().__init__(message)
