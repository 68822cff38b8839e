"""Coarse-to-fine temporal grounding over precomputed long-video features."""

from .config import PipelineConfig
from .core import Span, dot, iou, min_max_normalize
from .ranking import ground

__all__ = ["PipelineConfig", "Span", "dot", "ground", "iou", "min_max_normalize"]
__version__ = "0.1.0"
