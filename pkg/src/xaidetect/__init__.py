"""XAI-conditioned detection of adversarial attacks on toy deepfake detectors."""

from .gradcore import FAKE, REAL, LossSpec, ModelBundle
from .xai import IgConfig, XaiMap

__all__ = ["FAKE", "REAL", "IgConfig", "LossSpec", "ModelBundle", "XaiMap"]
__version__ = "0.1.0"
