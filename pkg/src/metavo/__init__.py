"""Self-supervised monocular visual odometry with online meta-adaptation."""

from .errors import DataError, DegenerateWindowWarning, DomainError, NumericalError
from .geometry import Intrinsics, PoseSE3

__version__ = "0.1.0"

__all__ = ["DataError", "DegenerateWindowWarning", "DomainError", "NumericalError", "Intrinsics", "PoseSE3"]
