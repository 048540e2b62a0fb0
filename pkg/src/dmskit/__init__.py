"""Driver-monitoring toolkit: single- and multi-modality activity classifiers with
attentional feature fusion, open-set inference, frame-similarity analysis and
FLOPs/latency benchmarking."""

from .core import ClassLabel, Clip, Modality
from .models import DMSModel, ModelSpec, build_model

__all__ = ["ClassLabel", "Clip", "DMSModel", "Modality", "ModelSpec", "build_model"]
__version__ = "0.1.0"
