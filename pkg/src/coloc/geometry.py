"""Spherical / vector math shared by every other module.

Directions of arrival (DOAs) live on the unit sphere and are handled either
as xyz unit vectors or as (azimuth, elevation) degrees with azimuth in
[-180, 180) and elevation in [-90, 90].  Internally the ambisonic channel
order is (W, X, Y, Z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def lp_norm(v, p: float = 1.5) -> float:
    """p-norm of a vector: (sum |v_i|^p)^(1/p).  p=1.5 is the training metric."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"lp_norm: non-finite input {v!r}")
    if p <= 0:
        raise ValueError(f"lp_norm: p must be positive, got {p}")
    return float(np.sum(np.abs(v) ** p) ** (1.0 / p))


def angular_distance(u, v) -> float:
    """Great-circle angle between two direction vectors, in degrees."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("angular_distance: zero-norm direction")
    cos = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
    return math.degrees(math.acos(cos))


def azel_to_doa(az_deg, el_deg) -> np.ndarray:
    """Angles (degrees) to xyz unit vector(s); broadcasts over array inputs.

    x = cos(el)cos(az), y = cos(el)sin(az), z = sin(el).  Output has shape
    broadcast(az, el).shape + (3,).
    """
    az = np.radians(np.asarray(az_deg, dtype=np.float64))
    el = np.radians(np.asarray(el_deg, dtype=np.float64))
    ce = np.cos(el)
    return np.stack(
        np.broadcast_arrays(ce * np.cos(az), ce * np.sin(az), np.sin(el)), axis=-1
    )


def doa_to_azel(d):
    """xyz vector(s) to (azimuth, elevation) degrees.  az in [-180, 180).

    Scalars out for a single vector, arrays out for (..., 3) batches.
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(np.linalg.norm(d, axis=-1) == 0.0):
        raise ValueError("doa_to_azel: zero-norm direction")
    az = np.degrees(np.arctan2(d[..., 1], d[..., 0]))
    el = np.degrees(np.arctan2(d[..., 2], np.hypot(d[..., 0], d[..., 1])))
    if d.ndim == 1:
        return wrap_azimuth(float(az)), float(el)
    return wrap_azimuth(az), el


def wrap_azimuth(az_deg):
    """Wrap azimuth(s) in degrees to [-180, 180)."""
    wrapped = (np.asarray(az_deg, dtype=np.float64) + 180.0) % 360.0 - 180.0
    if np.ndim(az_deg) == 0:
        return float(wrapped)
    return wrapped


def normalize(d) -> np.ndarray:
    """Scale a vector (or trailing-axis batch of vectors) to unit norm."""
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("normalize: zero-norm direction")
    return d / n


def perturb_doas(doas: np.ndarray, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Jitter unit vectors by independent uniform az/el offsets in [-max_deg, +max_deg].

    Elevation is clamped to [-90, 90], azimuth wraps; outputs are unit norm.
    Shape (..., 3) in, same shape out.
    """
    doas = np.asarray(doas, dtype=np.float64)
    if max_deg < 0:
        raise ValueError(f"perturb_doas: max_deg must be >= 0, got {max_deg}")
    if max_deg == 0.0 or doas.size == 0:
        return doas.copy()
    flat = doas.reshape(-1, 3)
    az = np.degrees(np.arctan2(flat[:, 1], flat[:, 0]))
    el = np.degrees(np.arctan2(flat[:, 2], np.hypot(flat[:, 0], flat[:, 1])))
    az = az + rng.uniform(-max_deg, max_deg, size=az.shape)
    el = el + rng.uniform(-max_deg, max_deg, size=el.shape)
    az = (az + 180.0) % 360.0 - 180.0
    el = np.clip(el, -90.0, 90.0)
    out = azel_to_doa(az, el)
    return out.reshape(doas.shape)


def perturb_doa(d, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Single-vector convenience wrapper around :func:`perturb_doas`."""
    return perturb_doas(np.asarray(d, dtype=np.float64), max_deg, rng)


def _rot_z(deg: int) -> np.ndarray:
    c = {0: 1, 90: 0, 180: -1, 270: 0}[deg]
    s = {0: 0, 90: 1, 180: 0, 270: -1}[deg]
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


@dataclass(frozen=True)
class FoaRotation:
    """One of the 16 axis-aligned spatial transforms of first-order ambisonics.

    The direction map is: reflect azimuth (y -> -y) if requested, flip
    elevation (z -> -z) if requested, then rotate about z by az_deg.  On
    channels (W, X, Y, Z) this is W'=W and (X',Y',Z') = R (X,Y,Z) with R a
    signed permutation.
    """

    az_deg: int
    flip_elevation: bool
    reflect_azimuth: bool

    def __post_init__(self):
        if self.az_deg not in (0, 90, 180, 270):
            raise ValueError(f"az_deg must be a multiple of 90, got {self.az_deg}")

    @property
    def name(self) -> str:
        return f"az{self.az_deg}{'_refl' if self.reflect_azimuth else ''}{'_flip' if self.flip_elevation else ''}"

    def direction_matrix(self) -> np.ndarray:
        """3x3 signed permutation acting on xyz direction vectors."""
        refl = np.diag([1.0, -1.0 if self.reflect_azimuth else 1.0, 1.0])
        flip = np.diag([1.0, 1.0, -1.0 if self.flip_elevation else 1.0])
        return _rot_z(self.az_deg) @ refl @ flip

    def channel_matrix(self) -> np.ndarray:
        """4x4 signed permutation acting on (W, X, Y, Z) audio channels."""
        m = np.eye(4)
        m[1:, 1:] = self.direction_matrix()
        return m

    def map_azel(self, az_deg: float, el_deg: float) -> tuple[float, float]:
        """Apply the transform to an (azimuth, elevation) label, degrees."""
        az = -az_deg if self.reflect_azimuth else az_deg
        el = -el_deg if self.flip_elevation else el_deg
        return wrap_azimuth(az + self.az_deg), el

    def map_doa(self, d: np.ndarray) -> np.ndarray:
        """Apply the transform to xyz vector(s) of shape (..., 3)."""
        return np.asarray(d, dtype=np.float64) @ self.direction_matrix().T

    def inverse(self) -> "FoaRotation":
        inv = self.direction_matrix().T  # orthogonal
        for r in FOA_ROTATIONS:
            if np.array_equal(r.direction_matrix(), inv):
                return r
        raise RuntimeError("inverse not found; rotation set is not closed")


FOA_ROTATIONS: tuple[FoaRotation, ...] = tuple(
    FoaRotation(az, flip, refl)
    for az in (0, 90, 180, 270)
    for flip in (False, True)
    for refl in (False, True)
)

IDENTITY_ROTATION = FOA_ROTATIONS[0]
