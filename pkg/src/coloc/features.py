"""FOA input features and the flat binary tensor file format.

The feature map for a 4-channel scene is an 11 x t x F stack: per-channel
log power spectra (4), per-channel phase spectra (4), and the acoustic
intensity vector normalized by its own norm (3).  Intensity of an SN3D FOA
frame points along the source DOA, which is what lets a network (or a test)
read direction straight off the features.

STFT settings are fixed: 24 kHz input, 1024-point FFT, periodic Hann window
of 960 samples, hop 480.  A scene of n samples yields t = ceil(n / hop)
frames (the tail is zero-padded), so a 100 ms label frame spans exactly 5
STFT frames.
"""

from __future__ import annotations

import numpy as np

from .geometry import FoaRotation

SAMPLE_RATE = 24000
N_FFT = 1024
WIN_LENGTH = 960
HOP_LENGTH = 480
N_BINS = N_FFT // 2 + 1  # 513
N_FEATURE_CHANNELS = 11
INTENSITY_EPS = 1e-8
STFT_FRAMES_PER_LABEL_FRAME = 5

TENSOR_MAGIC = b"COLOCTEN"


def stft_frames(n_samples: int, hop_length: int = HOP_LENGTH) -> int:
    return -(-n_samples // hop_length)


def stft(waveform: np.ndarray) -> np.ndarray:
    """Single-channel STFT, (t, F) complex with t = ceil(n / hop)."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a mono waveform")
    t = stft_frames(x.shape[0])
    # pad so every window starting at k * hop (k < t) is fully inside the buffer
    pad = (t - 1) * HOP_LENGTH + WIN_LENGTH - x.shape[0]
    if pad > 0:
        x = np.concatenate([x, np.zeros(pad)])
    win = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:t]
    return np.fft.rfft(frames * win, n=N_FFT, axis=-1)


def assemble_features(foa_wxyz: np.ndarray) -> np.ndarray:
    """11 x t x F feature stack from (4, n) FOA audio in (W, X, Y, Z) order.

    Channels 0-3 log power (log(|S|^2 + eps)), 4-7 phase, 8-10 the active
    intensity I_d = Re(conj(S_W) S_d) for d in (X, Y, Z) normalized per bin
    by (||I|| + eps).
    """
    if foa_wxyz.ndim != 2 or foa_wxyz.shape[0] != 4:
        raise ValueError("expected (4, n_samples) FOA audio")
    spec = np.stack([stft(ch) for ch in foa_wxyz])  # (4, t, F)
    log_power = np.log(np.abs(spec) ** 2 + INTENSITY_EPS)
    phase = np.angle(spec)
    intensity = np.real(np.conj(spec[0:1]) * spec[1:4])  # (3, t, F)
    norm = np.linalg.norm(intensity, axis=0, keepdims=True)
    intensity = intensity / (norm + INTENSITY_EPS)
    return np.concatenate([log_power, phase, intensity]).astype(np.float32)


def volume_perturb(foa_wxyz: np.ndarray, gain: float) -> np.ndarray:
    """Scale all four channels by one gain (the augmentation draws U[0.5, 1.5])."""
    return foa_wxyz * gain


def spatial_augment(foa_wxyz: np.ndarray, rotation: FoaRotation) -> np.ndarray:
    """Apply one of the 16 axis-aligned FOA transforms to raw audio."""
    return rotation.channel_matrix() @ foa_wxyz


def volume_perturb_features(features: np.ndarray, gain: float) -> np.ndarray:
    """Feature-space equivalent of volume_perturb (exact up to the eps floor).

    Log power gains 2 ln(gain); phase and normalized intensity are invariant.
    """
    out = features.copy()
    out[0:4] += 2.0 * np.log(gain)
    return out


def spatial_augment_features(features: np.ndarray, rotation: FoaRotation) -> np.ndarray:
    """Feature-space equivalent of spatial_augment.

    The 16 transforms permute (X, Y, Z) up to signs, so log power channels
    permute, phase channels permute with a pi shift where the sign flips,
    and intensity rows transform by the direction matrix.
    """
    rot = rotation.direction_matrix()
    out = np.empty_like(features)
    out[0] = features[0]
    out[4] = features[4]
    for i in range(3):
        j = int(np.argmax(np.abs(rot[i])))
        sign = rot[i, j]
        out[1 + i] = features[1 + j]
        if sign > 0:
            out[5 + i] = features[5 + j]
        else:
            ph = features[5 + j]
            out[5 + i] = np.where(ph > 0, ph - np.pi, ph + np.pi)
    out[8:11] = np.einsum("ij,jtf->itf", rot, features[8:11])
    return out


def intensity_doas(features: np.ndarray) -> np.ndarray:
    """Per-bin DOA estimates read off the intensity channels, (t, F, 3) unit."""
    v = np.moveaxis(features[8:11], 0, -1)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, 1e-12)


def save_tensor(path, array: np.ndarray) -> None:
    """Write a float32 tensor file: 16-byte magic, u32 rank, u32 dims, payload.

    All integers little-endian; payload is row-major float32.
    """
    # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
    arr = np.asarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC.ljust(16, b"\0"))
        f.write(np.uint32(arr.ndim).tobytes())
        f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        f.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 20 or data[:16] != TENSOR_MAGIC.ljust(16, b"\0"):
        raise ValueError(f"{path}: not a tensor file (bad magic)")
    rank = int(np.frombuffer(data, "<u4", count=1, offset=16)[0])
    if rank > 8 or len(data) < 20 + 4 * rank:
        raise ValueError(f"{path}: corrupt tensor header")
    dims = np.frombuffer(data, "<u4", count=rank, offset=20).astype(np.int64)
    n = int(np.prod(dims)) if rank else 1
    offset = 20 + 4 * rank
    if len(data) != offset + 4 * n:
        raise ValueError(
            f"{path}: payload size mismatch (dims {tuple(dims)}, "
            f"{len(data) - offset} bytes)"
        )
    return np.frombuffer(data, "<f4", count=n, offset=offset).reshape(dims).copy()
