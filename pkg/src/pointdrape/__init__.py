"""Point-based clothed-body shape modeling.

Learns pose-dependent clothing deformation as displacement fields over an
articulated capsule body, with a pose-independent coarse stage, predicted
blend-skinning weights regularized by a diffused+smoothed weight field, and
density-adaptive regularization/upsampling. Ships with a procedural
articulated-body + garment data generator for end-to-end training and
evaluation at desk scale.
"""

from .errors import ConfigError, FormatError, ValidationError

__version__ = "0.1.0"

__all__ = ["ValidationError", "ConfigError", "FormatError", "__version__"]
