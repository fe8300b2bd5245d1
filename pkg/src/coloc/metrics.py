"""Evaluation: conditioned DOA-error table, conditional accuracy, SELD scores.

The DOA-error table isolates per-step localizer quality: a frame with m
active sources is probed once per conditioning depth j < m, feeding the
first j ground-truth DOAs (stacked order) and scoring the prediction against
the nearest unconditioned ground truth.

The scoreboard (ER_20, F_20, LE_CD, LR_CD) is segment-based over 1 s
segments (10 label frames). Within each segment and class, predictions and
references pooled over the segment's frames are matched by optimal
assignment on angular distance; a matched pair within 20 degrees is a true
positive, matched pairs of any angle feed LE/LR. All matching parameters
are fixed here and frozen by the test suite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import angular_distance, perturb_doas
from .inference import FramePredictor, SeldOutput

SEGMENT_FRAMES = 10
ANGLE_THRESHOLD_DEG = 20.0


def _predictor_for(predictor, example):
    """Accept a shared FramePredictor or a per-scene factory example -> predictor."""
    if isinstance(predictor, FramePredictor):
        return predictor
    return predictor(example)


# ---------------------------------------------------------------------------
# conditioned DOA error

@dataclass
class DoaErrorTable:
    """Mean angular error (deg) by (noas = active sources, cond = given DOAs)."""

    n_tracks: int
    sums: np.ndarray = None
    counts: np.ndarray = None

    def __post_init__(self):
        if self.sums is None:
            self.sums = np.zeros((self.n_tracks + 1, self.n_tracks))
        if self.counts is None:
            self.counts = np.zeros((self.n_tracks + 1, self.n_tracks), dtype=np.int64)

    def add(self, noas: int, cond: int, error_deg: float):
        if not 1 <= noas <= self.n_tracks or not 0 <= cond < noas:
            raise ValueError(f"cell (noas={noas}, cond={cond}) undefined")
        self.sums[noas, cond] += error_deg
        self.counts[noas, cond] += 1

    def mean(self, noas: int, cond: int) -> float:
        if self.counts[noas, cond] == 0:
            return math.nan
        return float(self.sums[noas, cond] / self.counts[noas, cond])

    def count(self, noas: int, cond: int) -> int:
        return int(self.counts[noas, cond])

    def rows(self):
        """(noas, cond, mean_deg, count) for every defined cell."""
        out = []
        for noas in range(1, self.n_tracks + 1):
            for cond in range(noas):
                out.append((noas, cond, self.mean(noas, cond), self.count(noas, cond)))
        return out

    def merge(self, other: "DoaErrorTable"):
        if other.n_tracks != self.n_tracks:
            raise ValueError("table sizes differ")
        self.sums += other.sums
        self.counts += other.counts
        return self


def doa_error_table(predictor, scenes, perturb_deg: float = 0.0, rng=None) -> DoaErrorTable:
    """Probe the localizer at every conditioning depth on ground-truth DOAs.

    scenes are objects with .features and .tracks (stacked ground truth).
    For each depth j, frames with at least j active sources are conditioned
    on their first j true DOAs (others on the empty set); frames with more
    than j sources score the angular error between the prediction and the
    nearest unconditioned true DOA. A zero prediction scores 180 degrees.
    """
    table = None
    for example in scenes:
        truth = example.tracks
        if table is None:
            table = DoaErrorTable(truth.n_tracks)
        pred = _predictor_for(predictor, example)
        occupied = truth.occupied()
        n_act = occupied.sum(axis=0)
        t_frames = truth.n_frames
        for j in range(truth.n_tracks):
            cond = np.zeros((t_frames, truth.n_tracks, 3))
            counts = np.where(n_act >= j, j, 0).astype(np.int64)
            if j > 0:
                for t in np.nonzero(counts)[0]:
                    doas = truth.cells[:j, t, :3]
                    if perturb_deg > 0:
                        doas = perturb_doas(doas, perturb_deg, rng)
                    cond[t, :j] = doas
            preds = np.asarray(pred.predict(example.features, cond, counts))
            for t in np.nonzero(n_act > j)[0]:
                targets = truth.cells[j : n_act[t], t, :3]
                if np.linalg.norm(preds[t]) == 0:
                    err = 180.0
                else:
                    err = min(angular_distance(preds[t], g) for g in targets)
                table.add(int(n_act[t]), j, err)
    if table is None:
        raise ValueError("no scenes given")
    return table


# ---------------------------------------------------------------------------
# conditional accuracy

@dataclass
class ClassifierScores:
    cacc: float
    miss_rate: float  # true events classified as the no-event class
    false_alarm_rate: float  # empty conditioning classified as a real class
    n_events: int
    n_empty: int


def conditional_accuracy(predictor, scenes, perturb_deg: float = 0.0, rng=None) -> ClassifierScores:
    """Score the classifier under ground-truth DOA conditioning.

    Every (frame, true event) is one sample: correct iff the argmax class
    matches the event's class. Two side rates come along for free: misses
    (true event predicted as class K) over events, and false alarms (empty
    conditioning predicted as a real class) over empty samples.
    """
    correct = events = misses = false_alarms = empties = 0
    for example in scenes:
        truth = example.tracks
        pred = _predictor_for(predictor, example)
        occupied = truth.occupied()
        k = truth.n_classes
        t_frames = truth.n_frames
        for row in range(truth.n_tracks):
            occ = occupied[row]
            cond = np.zeros((t_frames, 1, 3))
            if occ.any():
                doas = truth.cells[row, occ, :3]
                if perturb_deg > 0:
                    doas = perturb_doas(doas, perturb_deg, rng)
                cond[occ, 0] = doas
            counts = occ.astype(np.int64)
            probs = np.asarray(pred.predict(example.features, cond, counts))
            classes = np.argmax(probs, axis=-1)
            gt = truth.cells[row, :, 3].astype(np.int64)
            events += int(occ.sum())
            correct += int((classes[occ] == gt[occ]).sum())
            misses += int((classes[occ] == k).sum())
            empties += int((~occ).sum())
            false_alarms += int((classes[~occ] != k).sum())
    return ClassifierScores(
        cacc=correct / events if events else math.nan,
        miss_rate=misses / events if events else math.nan,
        false_alarm_rate=false_alarms / empties if empties else math.nan,
        n_events=events,
        n_empty=empties,
    )


# ---------------------------------------------------------------------------
# SELD scoreboard

@dataclass
class SeldScores:
    er20: float
    f20: float
    le_cd: float  # degrees; NaN when nothing was class-matched
    lr_cd: float

    def as_rows(self):
        return [
            ("er20", self.er20),
            ("f20", self.f20),
            ("le_cd", self.le_cd),
            ("lr_cd", self.lr_cd),
        ]


def seld_scores(
    pred: SeldOutput,
    ref: SeldOutput,
    segment_frames: int = SEGMENT_FRAMES,
    angle_threshold_deg: float = ANGLE_THRESHOLD_DEG,
) -> SeldScores:
    """Location-dependent detection scores between two aligned output streams."""
    if pred.n_frames != ref.n_frames:
        raise ValueError(
            f"frame ranges differ: pred {pred.n_frames}, ref {ref.n_frames}"
        )
    n_frames = ref.n_frames
    n_segments = -(-n_frames // segment_frames) if n_frames else 0

    sdi_total = 0.0
    n_ref_total = 0
    tp = fp = fn = 0
    matched = 0
    le_sum = 0.0
    for seg in range(n_segments):
        frames = range(seg * segment_frames, min((seg + 1) * segment_frames, n_frames))
        pred_by_class: dict = {}
        ref_by_class: dict = {}
        for t in frames:
            for cls, doa in pred.frames[t]:
                pred_by_class.setdefault(cls, []).append(doa)
            for cls, doa in ref.frames[t]:
                ref_by_class.setdefault(cls, []).append(doa)

        seg_tp = seg_fp = seg_fn = seg_nref = 0
        for cls in set(pred_by_class) | set(ref_by_class):
            preds = pred_by_class.get(cls, [])
            refs = ref_by_class.get(cls, [])
            cls_tp = 0
            if preds and refs:
                cost = np.array(
                    [[angular_distance(p, r) for r in refs] for p in preds]
                )
                rows, cols = linear_sum_assignment(cost)
                angles = cost[rows, cols]
                matched += len(angles)
                le_sum += float(angles.sum())
                cls_tp = int((angles <= angle_threshold_deg).sum())
            seg_tp += cls_tp
            seg_fp += len(preds) - cls_tp
            seg_fn += len(refs) - cls_tp
            seg_nref += len(refs)

        s = min(seg_fp, seg_fn)
        d = max(0, seg_fn - seg_fp)
        i = max(0, seg_fp - seg_fn)
        sdi_total += s + d + i
        n_ref_total += seg_nref
        tp += seg_tp
        fp += seg_fp
        fn += seg_fn

    return SeldScores(
        er20=sdi_total / n_ref_total if n_ref_total else 0.0,
        f20=2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 1.0,
        le_cd=le_sum / matched if matched else math.nan,
        lr_cd=matched / n_ref_total if n_ref_total else 1.0,
    )


def aggregate_seld_scores(pairs) -> SeldScores:
    """Score a collection of (pred, ref) scenes as one concatenated stream."""
    frames_p = []
    frames_r = []
    n_classes = None
    for pred, ref in pairs:
        if pred.n_frames != ref.n_frames:
            raise ValueError("frame ranges differ within a scene pair")
        pad = (-len(frames_p)) % SEGMENT_FRAMES  # keep scenes segment-aligned
        frames_p.extend([[] for _ in range(pad)])
        frames_r.extend([[] for _ in range(pad)])
        frames_p.extend(pred.frames)
        frames_r.extend(ref.frames)
        n_classes = ref.n_classes
    return seld_scores(
        SeldOutput(frames_p, n_classes), SeldOutput(frames_r, n_classes)
    )


# ---------------------------------------------------------------------------
# emitters

def write_scores_csv(scores: SeldScores, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("metric", "value"))
        for name, value in scores.as_rows():
            writer.writerow((name, f"{value:.6f}"))


def write_doa_error_csv(table: DoaErrorTable, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("noas", "cond", "mean_deg", "count"))
        for noas, cond, mean, count in table.rows():
            writer.writerow((noas, cond, f"{mean:.4f}", count))


def format_doa_error_table(table: DoaErrorTable) -> str:
    """Human-readable grid: one row per noas, one column per conditioning size."""
    header = "noas " + " ".join(f"cond={j:<6d}" for j in range(table.n_tracks))
    lines = [header]
    for noas in range(1, table.n_tracks + 1):
        cells = []
        for cond in range(table.n_tracks):
            if cond < noas and table.count(noas, cond):
                cells.append(f"{table.mean(noas, cond):6.1f} ")
            else:
                cells.append("   -   ")
        lines.append(f"{noas:4d} " + " ".join(cells))
    return "\n".join(lines)


def format_scores_report(rows) -> str:
    """Tabulate {label: SeldScores} the way SELD systems are usually compared."""
    lines = [f"{'system':<16s} {'ER20':>6s} {'F20':>6s} {'LE_CD':>7s} {'LR_CD':>6s}"]
    for label, s in rows.items():
        le = f"{s.le_cd:6.1f}" if not math.isnan(s.le_cd) else "   n/a"
        lines.append(
            f"{label:<16s} {s.er20:6.2f} {100 * s.f20:5.0f}% {le} {100 * s.lr_cd:5.0f}%"
        )
    return "\n".join(lines)
