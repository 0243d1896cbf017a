"""tabmodal: pre-train tabular encoders with images that are only needed at training time.

The library couples two self-supervised objectives through one shared tabular
encoder: recovering which features of a corrupted row were resampled
(masked-feature pretext) and aligning row embeddings with embeddings of the
paired image (cross-modal contrastive learning). Downstream models consume
tabular data alone.
"""

from tabmodal.tensor import (
    DomainError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    grad_check,
    precision,
    set_default_dtype,
)

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "precision",
    "set_default_dtype",
    "__version__",
]
