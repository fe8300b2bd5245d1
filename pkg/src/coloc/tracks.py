"""Ground-truth representation: per-frame events, stacked tracks, meta CSV I/O.

A *stacked-tracks* tensor packs the events of a chunk into shape
(n_tracks, n_frames, 4) where the last axis holds (x, y, z, class_index).
Per frame, active events are written bottom-up ordered by their input
track id; every unused cell is (0, 0, 0, n_classes), i.e. the silence
class sits at the origin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import geometry


@dataclass
class FrameEvent:
    """One active source in one label frame."""

    frame: int
    track_id: int
    class_id: int
    doa: np.ndarray  # xyz, unit norm for real ground truth


@dataclass
class StackedTracks:
    """(n_tracks, n_frames, 4) tensor of bottom-compacted per-frame events."""

    cells: np.ndarray
    n_classes: int

    @property
    def n_tracks(self) -> int:
        return self.cells.shape[0]

    @property
    def n_frames(self) -> int:
        return self.cells.shape[1]

    def occupied(self) -> np.ndarray:
        """Boolean (n_tracks, n_frames) mask of non-empty cells."""
        return self.cells[:, :, 3] != self.n_classes

    def frame_counts(self) -> np.ndarray:
        """Number of active events per frame, shape (n_frames,)."""
        return self.occupied().sum(axis=0)

    def copy(self) -> "StackedTracks":
        return StackedTracks(self.cells.copy(), self.n_classes)


def empty_stacked(n_tracks: int, n_frames: int, n_classes: int) -> StackedTracks:
    cells = np.zeros((n_tracks, n_frames, 4), dtype=np.float64)
    cells[:, :, 3] = n_classes
    return StackedTracks(cells, n_classes)


def stack_tracks(
    events: list[FrameEvent],
    n_tracks: int,
    n_frames: int,
    n_classes: int,
    unit_tol: float | None = 1e-6,
) -> StackedTracks:
    """Build the stacked-tracks tensor from an event list.

    Per frame, events are sorted ascending by track id and written into rows
    0, 1, ... (an event therefore changes row when one below it ends).  At
    most n_tracks events per frame are kept, lowest track ids first.

    unit_tol bounds |norm(doa) - 1|; pass None to skip the check (used for
    hand-written fixtures with rounded coordinates).
    """
    st = empty_stacked(n_tracks, n_frames, n_classes)
    per_frame: dict[int, list[FrameEvent]] = {}
    seen: set[tuple[int, int]] = set()
    for ev in events:
        if not 0 <= ev.frame < n_frames:
            raise ValueError(f"event frame {ev.frame} outside [0, {n_frames})")
        if not 0 <= ev.class_id < n_classes:
            raise ValueError(f"event class {ev.class_id} outside [0, {n_classes})")
        key = (ev.frame, ev.track_id)
        if key in seen:
            raise ValueError(f"duplicate event for frame {ev.frame}, track {ev.track_id}")
        seen.add(key)
        if unit_tol is not None:
            norm = float(np.linalg.norm(ev.doa))
            if abs(norm - 1.0) > unit_tol:
                raise ValueError(
                    f"event doa has norm {norm:.6f}, expected unit "
                    f"(frame {ev.frame}, track {ev.track_id})"
                )
        per_frame.setdefault(ev.frame, []).append(ev)
    for frame, evs in per_frame.items():
        evs.sort(key=lambda e: e.track_id)
        for row, ev in enumerate(evs[:n_tracks]):
            st.cells[row, frame, :3] = np.asarray(ev.doa, dtype=np.float64)
            st.cells[row, frame, 3] = ev.class_id
    return st


def _compact(cells: np.ndarray, n_classes: int) -> np.ndarray:
    """Push non-empty cells of each frame to the bottom, preserving row order."""
    n_tracks, n_frames, _ = cells.shape
    out = np.zeros_like(cells)
    out[:, :, 3] = n_classes
    for t in range(n_frames):
        rows = [n for n in range(n_tracks) if cells[n, t, 3] != n_classes]
        for dst, src in enumerate(rows):
            out[dst, t] = cells[src, t]
    return out


def permute_and_restack(st: StackedTracks, rng: np.random.Generator) -> StackedTracks:
    """Apply one random row permutation to the whole tensor, then re-compact.

    The per-frame multiset of (xyz, class) cells is unchanged; only the row
    assignment moves.  This is the training-time occupancy augmentation.
    """
    perm = rng.permutation(st.n_tracks)
    return StackedTracks(_compact(st.cells[perm], st.n_classes), st.n_classes)


def truncate_overlap(events: list[FrameEvent], max_overlap: int = 3) -> list[FrameEvent]:
    """Keep at most max_overlap events per frame (lowest track ids win)."""
    per_frame: dict[int, list[FrameEvent]] = {}
    for ev in events:
        per_frame.setdefault(ev.frame, []).append(ev)
    out: list[FrameEvent] = []
    for frame in sorted(per_frame):
        evs = sorted(per_frame[frame], key=lambda e: e.track_id)
        out.extend(evs[:max_overlap])
    return out


# Meta CSV: one event per row, `frame,class,track,azimuth_deg,elevation_deg`,
# angles formatted with 4 decimals.  No header line.

def write_meta_csv(events: list[FrameEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for ev in events:
            az, el = geometry.doa_to_azel(ev.doa)
            writer.writerow(
                [ev.frame, ev.class_id, ev.track_id, f"{az:.4f}", f"{el:.4f}"]
            )


def read_meta_csv(path, n_classes: int) -> list[FrameEvent]:
    events: list[FrameEvent] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                frame, class_id, track = int(row[0]), int(row[1]), int(row[2])
                az, el = float(row[3]), float(row[4])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if class_id >= n_classes or class_id < 0:
                raise ValueError(
                    f"{path}:{lineno}: class {class_id} outside [0, {n_classes})"
                )
            events.append(FrameEvent(frame, track, class_id, geometry.azel_to_doa(az, el)))
    return events


def rotate_events(events: list[FrameEvent], rotation) -> list[FrameEvent]:
    """Apply a FoaRotation's direction map to every event DOA."""
    return [replace(ev, doa=rotation.map_doa(ev.doa)) for ev in events]
