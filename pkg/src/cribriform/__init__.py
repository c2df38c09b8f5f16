"""Cribriform growth pattern detection in prostate biopsies.

Preprocessing, an SE-residual segmentation network trained with weighted
Dice loss, fold assignment, ensemble inference and biopsy/annotation level
evaluation, all in numpy.
"""

from .core import (
    DESK_GEOMETRY,
    PAPER_GEOMETRY,
    WORKING_RESOLUTION,
    AnnotationSet,
    BiopsyImage,
    CribriformError,
    Geometry,
    Label,
    PixelScale,
    Region,
)

__version__ = "0.1.0"
