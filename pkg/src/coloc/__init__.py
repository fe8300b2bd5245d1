"""Conditioned localization and classification for sound event detection.

Two single-output CRNNs solve SELD without permutation-invariant training:
a class-agnostic localizer detects sources one at a time, each step
conditioned on the directions already found, and a classifier labels each
recovered direction. See README.md for the pipeline and file formats.
"""

__version__ = "0.1.0"

from .geometry import angular_distance, azel_to_doa, doa_to_azel, lp_norm
from .tracks import FrameEvent, StackedTracks, stack_tracks
from .inference import SeldOutput, run_pipeline, ssg_localize, classify_tracks
from .metrics import SeldScores, seld_scores

__all__ = [
    "__version__",
    "angular_distance",
    "azel_to_doa",
    "doa_to_azel",
    "lp_norm",
    "FrameEvent",
    "StackedTracks",
    "stack_tracks",
    "SeldOutput",
    "run_pipeline",
    "ssg_localize",
    "classify_tracks",
    "SeldScores",
    "seld_scores",
]
