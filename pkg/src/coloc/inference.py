"""Sequential-set-generation localization loop and conditioned classification.

The localizer loop fills a stacked-tracks tensor one row per step: step s
conditions on everything detected so far in each frame (the origin where
nothing is), asks the predictor for one 3-vector per frame, and writes the
normalized vector into row s wherever its Euclidean length clears the
threshold. A frame that fails the threshold is closed and never fires in a
later step, so rows stay bottom-compacted and the number of fired steps is
exactly the per-frame source-count estimate. The loop stops early when a
whole step detects nothing.

Predictors are pluggable so the loop can be exercised with ground-truth
oracles (with or without injected angular noise) as well as trained nets.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import torch

from . import geometry
from .geometry import angular_distance, perturb_doas
from .model import ConditionEncoder, PredictorNet, forward_frame_conditioned
from .tracks import FrameEvent, StackedTracks, empty_stacked

DETECTION_THRESHOLD = 0.5
INFERENCE_MODES = {"max_ov2": 2, "max_ov3": 3}


class FramePredictor(ABC):
    """Per-frame predictor under per-frame DOA-set conditioning.

    predict() receives the scene features (may be None for oracles), the
    conditioning sets as a zero-padded (T, M, 3) array with per-frame counts,
    and returns (T, 3) vectors (localizer role) or (T, K+1) rows (classifier
    role).
    """

    @abstractmethod
    def predict(self, features, cond_doas: np.ndarray, cond_counts: np.ndarray) -> np.ndarray:
        ...


class NetPredictor(FramePredictor):
    def __init__(self, net: PredictorNet, encoder: ConditionEncoder):
        self.net = net
        self.encoder = encoder

    def predict(self, features, cond_doas, cond_counts):
        if features is None:
            raise ValueError("NetPredictor requires features")
        with torch.no_grad():
            out = forward_frame_conditioned(
                self.net,
                self.encoder,
                torch.from_numpy(np.ascontiguousarray(features)[None]).float(),
                torch.from_numpy(cond_doas[None]).float(),
                torch.from_numpy(cond_counts[None]).long(),
            )
        return out[0].double().numpy()


class OracleLocalizer(FramePredictor):
    """Ground truth localizer: returns a not-yet-conditioned true DOA, else 0.

    Conditioning DOAs are matched greedily to the frame's true DOAs (nearest
    first, within match_tol_deg) and matched ones are removed; the first
    remaining true DOA in stacked order is returned.
    """

    def __init__(self, truth: StackedTracks, match_tol_deg: float = 10.0):
        self.truth = truth
        self.match_tol_deg = match_tol_deg

    def predict(self, features, cond_doas, cond_counts):
        t_frames = self.truth.n_frames
        if cond_doas.shape[0] != t_frames:
            raise ValueError("conditioning frame count does not match ground truth")
        occupied = self.truth.occupied()
        out = np.zeros((t_frames, 3))
        for t in range(t_frames):
            remaining = [
                self.truth.cells[row, t, :3]
                for row in range(self.truth.n_tracks)
                if occupied[row, t]
            ]
            for j in range(int(cond_counts[t])):
                if not remaining:
                    break
                angles = [angular_distance(cond_doas[t, j], g) for g in remaining]
                best = int(np.argmin(angles))
                if angles[best] <= self.match_tol_deg:
                    remaining.pop(best)
            if remaining:
                out[t] = self._emit(remaining[0], t)
        return out

    def _emit(self, doa, t):
        return doa


class NoisyOracleLocalizer(OracleLocalizer):
    """Oracle plus isotropic tangent-plane Gaussian noise of scale sigma_deg."""

    def __init__(
        self,
        truth: StackedTracks,
        sigma_deg: float,
        rng: np.random.Generator,
        match_tol_deg: float = 10.0,
    ):
        super().__init__(truth, match_tol_deg)
        self.sigma_deg = sigma_deg
        self.rng = rng

    def _emit(self, doa, t):
        return perturb_on_sphere(doa, self.sigma_deg, self.rng)


def perturb_on_sphere(doa, sigma_deg: float, rng: np.random.Generator):
    """Add N(0, sigma) offsets (in degrees) along two tangent directions."""
    d = np.asarray(doa, dtype=np.float64)
    if sigma_deg <= 0:
        return d.copy()
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    g1, g2 = rng.normal(0.0, np.radians(sigma_deg), 2)
    v = d + g1 * e1 + g2 * e2
    return v / np.linalg.norm(v)


class OracleClassifier(FramePredictor):
    """One-hot ground truth classes for conditioning DOAs; K when unconditioned."""

    def __init__(self, truth: StackedTracks, match_tol_deg: float = 10.0):
        self.truth = truth
        self.match_tol_deg = match_tol_deg

    def predict(self, features, cond_doas, cond_counts):
        k = self.truth.n_classes
        t_frames = self.truth.n_frames
        occupied = self.truth.occupied()
        out = np.zeros((t_frames, k + 1))
        out[:, k] = 1.0
        for t in range(t_frames):
            if cond_counts[t] == 0:
                continue
            candidates = [
                (angular_distance(cond_doas[t, 0], self.truth.cells[row, t, :3]), row)
                for row in range(self.truth.n_tracks)
                if occupied[row, t]
            ]
            if not candidates:
                continue
            angle, row = min(candidates)
            if angle <= self.match_tol_deg:
                out[t, k] = 0.0
                out[t, int(self.truth.cells[row, t, 3])] = 1.0
        return out


class RandomClassifier(FramePredictor):
    """Uniform one-hot over the K+1 classes; chance floor for accuracy tests."""

    def __init__(self, n_classes: int, rng: np.random.Generator):
        self.n_classes = n_classes
        self.rng = rng

    def predict(self, features, cond_doas, cond_counts):
        t_frames = cond_doas.shape[0]
        out = np.zeros((t_frames, self.n_classes + 1))
        picks = self.rng.integers(0, self.n_classes + 1, t_frames)
        out[np.arange(t_frames), picks] = 1.0
        return out


@dataclass
class SeldOutput:
    """Final detections: per label frame a list of (class_id, unit DOA) pairs."""

    frames: list
    n_classes: int

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def counts(self) -> np.ndarray:
        return np.array([len(f) for f in self.frames])


def _conditioning_from_stacked(st: StackedTracks, perturb_deg, rng):
    """Per-frame conditioning arrays from everything currently detected."""
    norms = np.linalg.norm(st.cells[:, :, :3], axis=-1)  # (N, T)
    detected = norms > 0
    t_frames = st.n_frames
    counts = detected.sum(axis=0).astype(np.int64)
    cond = np.zeros((t_frames, st.n_tracks, 3))
    for t in np.nonzero(counts)[0]:
        doas = st.cells[detected[:, t], t, :3]
        if perturb_deg > 0:
            doas = perturb_doas(doas, perturb_deg, rng)
        cond[t, : counts[t]] = doas
    return cond, counts


def ssg_localize(
    predictor: FramePredictor,
    features,
    n_frames=None,
    n_classes: int = 13,
    max_steps: int = 3,
    threshold: float = DETECTION_THRESHOLD,
    perturb_deg: float = 0.0,
    rng=None,
) -> StackedTracks:
    """Run the sequential localization loop; returns DOAs only (classes all K).

    Step s conditions each frame on the mean embedding of its already
    detected DOAs (the predictor sees the raw set; encoding happens inside
    net predictors), thresholds the predicted vector's Euclidean length
    against `threshold`, and writes the normalized vector into row s. Frames
    that fail the threshold are closed for all later steps; the loop ends
    early once a step fires nowhere. perturb_deg > 0 jitters the conditioning
    DOAs (not the written output) and requires an rng.
    """
    if n_frames is None:
        if features is None:
            raise ValueError("need features or n_frames")
        from .features import STFT_FRAMES_PER_LABEL_FRAME

        n_frames = features.shape[1] // STFT_FRAMES_PER_LABEL_FRAME
    if perturb_deg > 0 and rng is None:
        raise ValueError("perturb_deg > 0 requires an rng")

    st = empty_stacked(max_steps, n_frames, n_classes)
    open_frames = np.ones(n_frames, dtype=bool)
    for step in range(max_steps):
        cond, counts = _conditioning_from_stacked(st, perturb_deg, rng)
        preds = np.asarray(predictor.predict(features, cond, counts), dtype=np.float64)
        if preds.shape != (n_frames, 3):
            raise ValueError(
                f"localizer predictor returned shape {preds.shape}, "
                f"expected {(n_frames, 3)}"
            )
        norms = np.linalg.norm(preds, axis=-1)
        fired = open_frames & (norms > threshold)
        if not fired.any():
            break
        st.cells[step, fired, :3] = preds[fired] / norms[fired, None]
        open_frames = fired
    return st


def classify_tracks(
    predictor: FramePredictor,
    features,
    stacked: StackedTracks,
    perturb_deg: float = 0.0,
    rng=None,
) -> StackedTracks:
    """Fill classes row by row, conditioning the classifier on each row's DOAs.

    Detected cells (non-zero xyz) get the argmax class; a detected cell whose
    argmax is the no-event class K is dropped (xyz zeroed). Cells with no
    detection keep class K and are never written.
    """
    if perturb_deg > 0 and rng is None:
        raise ValueError("perturb_deg > 0 requires an rng")
    k = stacked.n_classes
    out = stacked.copy()
    t_frames = stacked.n_frames
    for row in range(stacked.n_tracks):
        doas = stacked.cells[row, :, :3]
        detected = np.linalg.norm(doas, axis=-1) > 0
        cond = np.zeros((t_frames, 1, 3))
        if detected.any():
            fed = doas[detected]
            if perturb_deg > 0:
                fed = perturb_doas(fed, perturb_deg, rng)
            cond[detected, 0] = fed
        counts = detected.astype(np.int64)
        probs = np.asarray(predictor.predict(features, cond, counts), dtype=np.float64)
        if probs.shape != (t_frames, k + 1):
            raise ValueError(
                f"classifier predictor returned shape {probs.shape}, "
                f"expected {(t_frames, k + 1)}"
            )
        classes = np.argmax(probs, axis=-1)
        keep = detected & (classes < k)
        drop = detected & (classes == k)
        out.cells[row, keep, 3] = classes[keep]
        out.cells[row, drop, :3] = 0.0
    return out


def to_seld_output(st: StackedTracks) -> SeldOutput:
    """Collect (class, DOA) detections per frame from a classified tensor."""
    k = st.n_classes
    frames = []
    for t in range(st.n_frames):
        dets = []
        for row in range(st.n_tracks):
            cls = int(st.cells[row, t, 3])
            doa = st.cells[row, t, :3]
            if cls == k:
                continue
            if not np.linalg.norm(doa) > 0:
                raise ValueError(
                    f"cell (row {row}, frame {t}) has class {cls} but zero DOA"
                )
            dets.append((cls, doa.copy()))
        frames.append(dets)
    return SeldOutput(frames, k)


def run_pipeline(
    localizer: FramePredictor,
    classifier: FramePredictor,
    features,
    mode: str = "max_ov3",
    n_frames=None,
    n_classes: int = 13,
    threshold: float = DETECTION_THRESHOLD,
    perturb_deg: float = 0.0,
    rng=None,
) -> SeldOutput:
    """features -> ssg_localize -> classify_tracks -> SeldOutput.

    mode selects the step cap: max_ov2 stops after 2 rows, max_ov3 after 3.
    Deterministic whenever the predictors are and perturb_deg == 0.
    """
    if mode not in INFERENCE_MODES:
        raise ValueError(f"unknown inference mode {mode!r}")
    st = ssg_localize(
        localizer,
        features,
        n_frames=n_frames,
        n_classes=n_classes,
        max_steps=INFERENCE_MODES[mode],
        threshold=threshold,
        perturb_deg=perturb_deg,
        rng=rng,
    )
    st = classify_tracks(classifier, features, st, perturb_deg=perturb_deg, rng=rng)
    return to_seld_output(st)


def stacked_to_events(st: StackedTracks) -> list:
    """Non-empty cells as FrameEvents with track = stacked row index."""
    events = []
    occupied = st.occupied()
    for t in range(st.n_frames):
        for row in range(st.n_tracks):
            if occupied[row, t]:
                events.append(
                    FrameEvent(t, row, int(st.cells[row, t, 3]), st.cells[row, t, :3].copy())
                )
    return events


def events_to_seld_output(events, n_frames: int, n_classes: int) -> SeldOutput:
    """Group FrameEvents (meta or prediction CSV rows) into a SeldOutput."""
    frames = [[] for _ in range(n_frames)]
    for ev in events:
        if not 0 <= ev.frame < n_frames:
            raise ValueError(f"event frame {ev.frame} outside [0, {n_frames})")
        frames[ev.frame].append((ev.class_id, np.asarray(ev.doa, dtype=np.float64)))
    return SeldOutput(frames, n_classes)
