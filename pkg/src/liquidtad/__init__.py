"""Parallel liquid relaxation blocks, a pyramid temporal detector and its tooling."""
__version__ = "0.1.0"

from .detector import ActionSegment, Detector, PyramidConfig  # noqa: E402
from .liquid import Backend, BackendKind, DecayParams, DecaySharingMode, DtPolicy  # noqa: E402

__all__ = [
    "ActionSegment",
    "Backend",
    "BackendKind",
    "DecayParams",
    "DecaySharingMode",
    "Detector",
    "DtPolicy",
    "PyramidConfig",
    "__version__",
]
