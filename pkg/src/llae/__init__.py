"""Discrete-latent autoencoder with a tractable logical model of its code.

Phase I trains a small categorical autoencoder; phase II learns a PSDD
over the binarized feature layer, giving exact conditional queries and
conditional generative sampling over codes the decoder can render.
"""

from .errors import (
    CircuitFormatError,
    DecodeError,
    IdxFormatError,
    RejectedOperationError,
    TrainingDivergedError,
    ZeroEvidenceError,
)

__all__ = [
    "CircuitFormatError",
    "DecodeError",
    "IdxFormatError",
    "RejectedOperationError",
    "TrainingDivergedError",
    "ZeroEvidenceError",
]

__version__ = "0.1.0"
