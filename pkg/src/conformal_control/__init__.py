"""Conformally robust CLF/CBF control from sparse learned dynamics."""
from .errors import (
    ConditioningError,
    ContractError,
    DivergenceError,
    InfeasibleError,
    SamplingError,
    StabilityError,
    UnsupportedLibraryError,
)

__version__ = "0.1.0"
