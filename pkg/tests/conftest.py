"""Shared fixtures: the hand-worked stacking example and tiny scene helpers."""

import numpy as np
import pytest

from coloc import scenes, tracks
from coloc.tracks import FrameEvent

# Hand-worked reference case: five input tracks over 8 label frames, 13
# classes, stacked into 3 rows. Cells are (x, y, z, class); DOAs are rounded
# to one decimal so stacking must be checked with unit_tol disabled.
EXAMPLE_N_FRAMES = 8
EXAMPLE_N_CLASSES = 13
EXAMPLE_INPUT_TRACKS = {
    0: {3: (-0.9, 0.2, 0.1, 8), 4: (-0.9, 0.2, 0.1, 8), 5: (-0.8, 0.2, 0.2, 8)},
    1: {6: (0.7, 0.5, -0.5, 11), 7: (0.7, 0.5, -0.5, 11)},
    2: {
        0: (-0.5, 0.6, 0.3, 3),
        1: (-0.4, 0.7, 0.3, 3),
        2: (-0.4, 0.7, 0.3, 3),
        3: (-0.4, 0.8, 0.3, 3),
        4: (-0.3, 0.8, 0.4, 3),
    },
    3: {
        2: (0.5, -0.7, 0.5, 7),
        3: (0.5, -0.7, 0.5, 7),
        4: (0.5, -0.7, 0.5, 7),
        5: (0.6, -0.7, 0.4, 7),
        6: (0.6, -0.7, 0.4, 7),
    },
    4: {1: (0.2, 0.7, -0.2, 3), 2: (0.2, 0.8, -0.1, 3)},
}
_E = (0.0, 0.0, 0.0, 13.0)  # empty cell
EXAMPLE_STACKED = [
    # row 0, frames 0..7
    [
        (-0.5, 0.6, 0.3, 3),
        (-0.4, 0.7, 0.3, 3),
        (-0.4, 0.7, 0.3, 3),
        (-0.9, 0.2, 0.1, 8),
        (-0.9, 0.2, 0.1, 8),
        (-0.8, 0.2, 0.2, 8),
        (0.7, 0.5, -0.5, 11),
        (0.7, 0.5, -0.5, 11),
    ],
    # row 1
    [
        _E,
        (0.2, 0.7, -0.2, 3),
        (0.5, -0.7, 0.5, 7),
        (-0.4, 0.8, 0.3, 3),
        (-0.3, 0.8, 0.4, 3),
        (0.6, -0.7, 0.4, 7),
        (0.6, -0.7, 0.4, 7),
        _E,
    ],
    # row 2
    [
        _E,
        _E,
        (0.2, 0.8, -0.1, 3),
        (0.5, -0.7, 0.5, 7),
        (0.5, -0.7, 0.5, 7),
        _E,
        _E,
        _E,
    ],
]


def example_events():
    events = []
    for track_id, frames in EXAMPLE_INPUT_TRACKS.items():
        for frame, (x, y, z, cls) in frames.items():
            events.append(FrameEvent(frame, track_id, cls, np.array([x, y, z])))
    return events


def example_expected_cells():
    return np.array(EXAMPLE_STACKED, dtype=np.float64)


@pytest.fixture
def stacking_example():
    return example_events(), example_expected_cells()


def tiny_scene_config(**kwargs):
    defaults = dict(
        duration_s=2.0,
        n_classes=4,
        max_overlap=2,
        events_min=1,
        events_max=3,
        event_dur_min_s=0.4,
        event_dur_max_s=1.5,
    )
    defaults.update(kwargs)
    return scenes.SceneConfig(**defaults)


def random_unit(rng, shape=()):
    v = rng.normal(size=shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_truth(rng, n_tracks=3, n_frames=12, n_classes=6, p_active=0.6):
    """Random bottom-compacted stacked tracks for oracle tests."""
    st = tracks.empty_stacked(n_tracks, n_frames, n_classes)
    for t in range(n_frames):
        count = int(rng.binomial(n_tracks, p_active))
        for row in range(count):
            st.cells[row, t, :3] = random_unit(rng)
            st.cells[row, t, 3] = rng.integers(0, n_classes)
    return st
