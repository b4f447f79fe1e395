"""Submovement decomposition of movement velocity signals."""

__version__ = "0.1.0"

from .primitive import Submovement, compose, minjerk_velocity
from .signal import PositionSeries, VelocitySeries, signed_tangential_velocity

__all__ = [
    "PositionSeries",
    "Submovement",
    "VelocitySeries",
    "__version__",
    "compose",
    "minjerk_velocity",
    "signed_tangential_velocity",
]
