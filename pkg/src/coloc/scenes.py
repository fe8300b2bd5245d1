"""Procedural generator of desk-scale FOA audio scenes with exact ground truth.

Each scene is a few seconds of 24 kHz first-order ambisonics audio containing
a handful of synthetic events (harmonic stacks with class-specific spectra)
placed on the unit sphere, plus a diffuse Gaussian noise floor.  Event
on/offsets are aligned to 100 ms label frames so the meta CSV is exact by
construction.

Channel conventions: in memory everything is (W, X, Y, Z) with SN3D gains
W=s, X=s cos(el)cos(az), Y=s cos(el)sin(az), Z=s sin(el).  WAV files on disk
use ACN channel order [W, Y, Z, X] (float32).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from . import geometry
from .tracks import FrameEvent

LABEL_FPS = 10  # meta resolution: one label frame per 100 ms

# ACN file order given (W, X, Y, Z) internal order: file ch 0..3 = W, Y, Z, X
_ACN_FROM_WXYZ = [0, 2, 3, 1]
_WXYZ_FROM_ACN = [0, 3, 1, 2]


@dataclass
class SceneConfig:
    """Knobs for one generated scene (and, via a master seed, a dataset)."""

    duration_s: float = 5.0
    sample_rate: int = 24000
    n_classes: int = 13
    max_overlap: int = 3
    events_min: int = 1
    events_max: int = 4
    event_dur_min_s: float = 0.5
    event_dur_max_s: float = 2.5
    noise_floor_db: float = -40.0  # RMS of the per-channel Gaussian floor, dBFS
    max_speed_deg_s: float = 10.0
    move_prob: float = 0.5
    min_separation_deg: float = 15.0
    enforce_separation: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.sample_rate != 24000:
            raise ValueError("sample_rate is fixed at 24000 Hz")
        n_frames = self.duration_s * LABEL_FPS
        if abs(n_frames - round(n_frames)) > 1e-9:
            raise ValueError("duration_s must be a multiple of 0.1 s")
        if self.events_min < 0 or self.events_max < self.events_min:
            raise ValueError("invalid events_per_scene range")
        if self.event_dur_min_s < 0.1 or self.event_dur_max_s < self.event_dur_min_s:
            raise ValueError("invalid event duration range")

    @property
    def n_frames(self) -> int:
        return round(self.duration_s * LABEL_FPS)

    @property
    def samples_per_frame(self) -> int:
        return self.sample_rate // LABEL_FPS

    @property
    def n_samples(self) -> int:
        return self.n_frames * self.samples_per_frame


@dataclass
class SourceSignal:
    class_id: int
    waveform: np.ndarray  # mono, peak |amplitude| <= 1


def class_fundamental_hz(class_id: int) -> float:
    return 180.0 * 1.35**class_id


def synth_class_signal(
    class_id: int,
    duration_s: float,
    rng: np.random.Generator,
    sample_rate: int = 24000,
) -> SourceSignal:
    """Synthesize a class-distinguishable source: harmonic stack + octave noise.

    Class k gets fundamental 180 * 1.35^k Hz with 1/h partial amplitudes
    (partials above 0.45 * fs dropped) plus band-limited noise one octave
    wide starting at 2 * f0, all under an attack/decay envelope.  Identical
    (class, duration, rng state) inputs give identical buffers.
    """
    n = round(duration_s * sample_rate)
    if n == 0:
        return SourceSignal(class_id, np.zeros(0, dtype=np.float64))
    t = np.arange(n) / sample_rate
    f0 = class_fundamental_hz(class_id)
    limit = 0.45 * sample_rate
    x = np.zeros(n, dtype=np.float64)
    for h in range(1, 7):
        fh = h * f0
        if fh >= limit:
            break
        x += (1.0 / h) * np.sin(2 * np.pi * fh * t + rng.uniform(0, 2 * np.pi))

    # band-limited noise in [2 f0, 4 f0] (clamped below Nyquist) via rFFT mask
    noise = rng.normal(0.0, 1.0, n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    hi = min(4.0 * f0, limit)
    lo = min(2.0 * f0, hi / 2.0)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    band = np.fft.irfft(spec, n)
    peak = np.max(np.abs(band))
    if peak > 0:
        x += 0.3 * band / peak

    attack = max(1, min(n // 5, round(0.05 * sample_rate)))
    release = max(1, min(n // 5, round(0.1 * sample_rate)))
    env = np.ones(n)
    env[:attack] *= np.linspace(0.0, 1.0, attack, endpoint=False)
    env[n - release:] *= np.linspace(1.0, 0.0, release)
    x *= env
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.9 / peak
    return SourceSignal(class_id, x)


def encode_foa(waveform: np.ndarray, az_deg, el_deg) -> np.ndarray:
    """SN3D first-order encoding of a mono signal at direction (az, el).

    az_deg/el_deg may be scalars or per-sample arrays.  Returns (4, n) in
    (W, X, Y, Z) order; superposition of sources is plain summation.
    """
    s = np.asarray(waveform, dtype=np.float64)
    az = np.radians(np.broadcast_to(np.asarray(az_deg, dtype=np.float64), s.shape))
    el = np.radians(np.broadcast_to(np.asarray(el_deg, dtype=np.float64), s.shape))
    ce = np.cos(el)
    return np.stack([s, s * ce * np.cos(az), s * ce * np.sin(az), s * np.sin(el)])


@dataclass
class _PlacedEvent:
    class_id: int
    onset_frame: int
    n_frames: int
    az0: float
    el0: float
    az_rate: float  # deg/s
    el_rate: float
    gain: float

    def azel_at(self, t_s):
        """Angles at time offsets (seconds, absolute scene time)."""
        dt = np.asarray(t_s) - self.onset_frame / LABEL_FPS
        az = self.az0 + self.az_rate * dt
        el = np.clip(self.el0 + self.el_rate * dt, -90.0, 90.0)
        return az, el

    @property
    def end_frame(self) -> int:
        return self.onset_frame + self.n_frames


def _place_events(cfg: SceneConfig, rng: np.random.Generator) -> list[_PlacedEvent]:
    n_events = int(rng.integers(cfg.events_min, cfg.events_max + 1))
    dur_min = max(1, round(cfg.event_dur_min_s * LABEL_FPS))
    dur_max = min(cfg.n_frames, round(cfg.event_dur_max_s * LABEL_FPS))
    occupancy = np.zeros(cfg.n_frames, dtype=int)
    placed: list[_PlacedEvent] = []
    for _ in range(n_events):
        ok = False
        for _try in range(200):
            dur = int(rng.integers(dur_min, dur_max + 1))
            onset = int(rng.integers(0, cfg.n_frames - dur + 1))
            if np.all(occupancy[onset : onset + dur] < cfg.max_overlap):
                ok = True
                break
        if not ok:
            raise RuntimeError("could not place event within overlap budget")

        class_id = int(rng.integers(0, cfg.n_classes))
        gain = float(rng.uniform(0.5, 1.0))
        for _try in range(200):
            az0 = float(rng.uniform(-180.0, 180.0))
            el0 = math.degrees(math.asin(rng.uniform(-1.0, 1.0)))
            if rng.random() < cfg.move_prob:
                s = cfg.max_speed_deg_s / math.sqrt(2.0)
                az_rate = float(rng.uniform(-s, s))
                el_rate = float(rng.uniform(-s, s))
            else:
                az_rate = el_rate = 0.0
            cand = _PlacedEvent(class_id, onset, dur, az0, el0, az_rate, el_rate, gain)
            if not cfg.enforce_separation or _separated(cand, placed, cfg):
                placed.append(cand)
                occupancy[onset : onset + dur] += 1
                break
        else:
            raise RuntimeError("could not separate concurrent events")
    return placed


def _separated(cand: _PlacedEvent, placed: list[_PlacedEvent], cfg: SceneConfig) -> bool:
    for other in placed:
        lo = max(cand.onset_frame, other.onset_frame)
        hi = min(cand.end_frame, other.end_frame)
        if lo >= hi:
            continue
        mids = (np.arange(lo, hi) + 0.5) / LABEL_FPS
        da, de = cand.azel_at(mids)
        oa, oe = other.azel_at(mids)
        du = geometry.azel_to_doa(da, de)
        ou = geometry.azel_to_doa(oa, oe)
        cos = np.clip(np.sum(du * ou, axis=-1), -1.0, 1.0)
        if np.degrees(np.arccos(cos)).min() < cfg.min_separation_deg:
            return False
    return True


def generate_scene(
    cfg: SceneConfig, rng: np.random.Generator
) -> tuple[np.ndarray, list[FrameEvent]]:
    """Render one scene: (4, n_samples) FOA audio plus its FrameEvent meta.

    Events are sampled with per-frame overlap <= max_overlap and (optionally)
    pairwise separation >= min_separation_deg at every shared frame; layouts
    that cannot satisfy the constraints are retried a bounded number of times
    before raising.  Meta DOAs are taken at label-frame midpoints.
    """
    placed = None
    for _attempt in range(50):
        try:
            placed = _place_events(cfg, rng)
            break
        except RuntimeError:
            continue
    if placed is None:
        raise RuntimeError(
            f"scene generation failed: constraints infeasible for {cfg}"
        )

    audio = np.zeros((4, cfg.n_samples), dtype=np.float64)
    events: list[FrameEvent] = []
    spf = cfg.samples_per_frame
    for track_id, ev in enumerate(placed):
        sig = synth_class_signal(ev.class_id, ev.n_frames / LABEL_FPS, rng, cfg.sample_rate)
        a, b = ev.onset_frame * spf, ev.end_frame * spf
        t = np.arange(a, b) / cfg.sample_rate
        az, el = ev.azel_at(t)
        audio[:, a:b] += ev.gain * encode_foa(sig.waveform, az, el)
        mids = (np.arange(ev.onset_frame, ev.end_frame) + 0.5) / LABEL_FPS
        maz, mel = ev.azel_at(mids)
        doas = geometry.azel_to_doa(maz, mel)
        for i, frame in enumerate(range(ev.onset_frame, ev.end_frame)):
            events.append(FrameEvent(frame, track_id, ev.class_id, doas[i]))

    noise_rms = 10.0 ** (cfg.noise_floor_db / 20.0)
    audio += rng.normal(0.0, noise_rms, audio.shape)
    events.sort(key=lambda e: (e.frame, e.track_id))
    return audio, events


def scene_rng(master_seed: int, scene_index: int) -> np.random.Generator:
    """Independent per-scene stream so scenes can be generated in any order."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, scene_index]))


def write_scene_wav(path, foa_wxyz: np.ndarray, sample_rate: int = 24000) -> None:
    """Write (W, X, Y, Z) audio as a float32 WAV in ACN order [W, Y, Z, X]."""
    data = foa_wxyz[_ACN_FROM_WXYZ].T.astype(np.float32)
    wavfile.write(path, sample_rate, data)


def read_scene_wav(path) -> tuple[np.ndarray, int]:
    """Read an ACN-order scene WAV; returns ((W, X, Y, Z) float64, sample_rate)."""
    sr, data = wavfile.read(path)
    if data.ndim != 2 or data.shape[1] != 4:
        raise ValueError(f"{path}: expected 4-channel WAV, got shape {data.shape}")
    return data.T[_WXYZ_FROM_ACN].astype(np.float64), sr
