"""
Exception hierarchy for the reconstruction pipeline
"""

from typing import Optional


class LungEitError(Exception):
    """Base class for all pipeline errors"""


class MeshError(LungEitError, ValueError):
    """Mesh construction precondition or quality failure"""


class MeshQualityError(MeshError):
    """No admissible ring count gives every element an angle above the quality bound"""

    def __init__(self, message: str, min_angle: float):
        super().__init__(f"{message} (best minimum angle {min_angle:.2f} deg)")
        self.min_angle = min_angle


class DimensionMismatchError(LungEitError, ValueError):
    """Vector, frame or image length does not match its counterpart"""

    def __init__(self, what: str, expected: int, got: int):
        super().__init__(f"{what}: expected length {expected}, got {got}")
        self.expected = expected
        self.got = got


class ShapeMismatchError(LungEitError, ValueError):
    """Layer input shape incompatible with its spec"""

    def __init__(self, layer_index: int, kind: str, message: str):
        super().__init__(f"layer {layer_index} ({kind}): {message}")
        self.layer_index = layer_index
        self.kind = kind


class ModelConfigError(LungEitError, ValueError):
    """Model hyperparameters violate a construction constraint"""


class ForwardSolveError(LungEitError):
    """Linear solve of the shunt-model system failed or did not converge"""

    def __init__(self, message: str, residual: Optional[float] = None):
        if residual is not None:
            message = f"{message} (relative residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class FilterError(LungEitError, ValueError):
    """Invalid boundary filter parameters"""


class ArtifactMismatchError(LungEitError):
    """Upstream artifact is missing or was built against different settings"""

    def __init__(self, message: str, offending_hash: Optional[str] = None):
        if offending_hash:
            message = f"{message} [hash {offending_hash}]"
        super().__init__(message)
        self.offending_hash = offending_hash


class TrainingDivergedError(LungEitError):
    """Loss became non-finite during training"""

    def __init__(self, stage: str, epoch: int, checkpoint: Optional[str] = None):
        message = f"{stage} diverged at epoch {epoch}"
        if checkpoint:
            message += f"; last good checkpoint at {checkpoint}"
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
        self.checkpoint = checkpoint


class StaleCacheError(LungEitError):
    """Backward pass requested on a consumed or missing forward cache"""


class VerificationError(LungEitError):
    """One or more property checks failed"""
