"""Latent space of 3D motions for a single object, driven by sparse keypoint trajectories."""

from .errors import DomainError, NumericError, CorruptArtifactError

__version__ = "0.1.0"

__all__ = ["DomainError", "NumericError", "CorruptArtifactError", "__version__"]
