"""Vertebrae labelling in CT via two-view butterfly heatmap regression."""

__version__ = "0.1.0"

from .core import (AnnotationSet, BoundingBox, HeatmapStack, VertebraLabel,  # noqa: F401
                   Volume, label_from_index, label_from_name)
