"""Rotation-invariant omnidirectional descriptors.

A panorama (columns spanning 360 degrees of azimuth) is reduced to a
circular intensity profile, one value per column.  The descriptor is the
magnitude spectrum of that profile with the DC bin dropped and the result
L2-normalised, so it does not change when the camera turns in place, when
a constant is added to every column, or when the profile is scaled.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

K = 64
MIN_WIDTH = 2 * K
DEGENERATE_EPS = 1e-12
LUMA = (0.299, 0.587, 0.114)

PROFILE_MAGIC = "PROFILE v1"


class FeatureError(ValueError):
    """Malformed image, profile or feature input."""


class DimensionMismatchError(FeatureError):
    """Two descriptors (or a descriptor and a database) disagree on K."""


@dataclass(frozen=True, eq=False)
class OmniFeature:
    coeffs: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        arr = np.asarray(self.coeffs, dtype=np.float64)
        if arr.ndim != 1:
            raise FeatureError(f"feature coefficients must be 1-D, got shape {arr.shape}")
        object.__setattr__(self, "coeffs", arr)

    @property
    def k(self) -> int:
        return self.coeffs.shape[0]

    def __eq__(self, other):
        if not isinstance(other, OmniFeature):
            return NotImplemented
        return self.degenerate == other.degenerate and np.array_equal(self.coeffs, other.coeffs)

    __hash__ = None


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """Convert an (H, W) or (H, W, 3|4) array to float grayscale in [0, 1].

    Integer inputs are treated as 8-bit; float inputs must already be in
    [0, 1]. Colour uses Rec. 601 luma weights; an alpha channel is ignored.
    """
    arr = np.asarray(pixels)
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] not in (3, 4):
            raise FeatureError(f"unsupported channel count {arr.shape[2]}")
        arr = arr[..., 0] * LUMA[0] + arr[..., 1] * LUMA[1] + arr[..., 2] * LUMA[2]
    if arr.ndim != 2:
        raise FeatureError(f"image must be 2-D (H, W) after conversion, got shape {arr.shape}")
    return arr


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB raster file as a float panorama."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        pixels = np.asarray(im)
    return to_grayscale(pixels)


def extract_profile(image: np.ndarray, *, min_width: int = MIN_WIDTH) -> np.ndarray:
    """Column-wise mean intensity of a panorama, one value per azimuth column."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FeatureError(f"panorama must be 2-D (H, W), got shape {img.shape}")
    h, w = img.shape
    if h < 1 or w < min_width:
        raise FeatureError(f"panorama is {w} columns wide; at least {min_width} are required")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise FeatureError("panorama intensities must lie in [0, 1]")
    return img.mean(axis=0)


def extract_feature(profile: Sequence[float] | np.ndarray, k: int = K) -> OmniFeature:
    values = np.asarray(profile, dtype=np.float64)
    if values.ndim != 1:
        raise FeatureError(f"profile must be 1-D, got shape {values.shape}")
    if values.shape[0] < 2 * k:
        raise FeatureError(f"profile has {values.shape[0]} samples; at least {2 * k} are required")
    if not np.all(np.isfinite(values)):
        raise FeatureError("profile contains non-finite values")

    # numpy's forward FFT is the unnormalised sum x[w] * exp(-2*pi*i*k*w/W)
    mags = np.abs(np.fft.rfft(values)[1:k + 1])
    norm = float(np.sqrt(np.sum(mags * mags)))
    if norm <= DEGENERATE_EPS:
        return OmniFeature(np.zeros(k), degenerate=True)
    return OmniFeature(mags / norm, degenerate=False)


def feature_distance(a: OmniFeature, b: OmniFeature) -> float:
    """Euclidean distance between two descriptors.

    Squared differences are accumulated in coefficient order, the same
    order the retrieval kernels use, so results agree bit for bit.
    """
    if a.k != b.k:
        raise DimensionMismatchError(f"descriptor lengths differ: {a.k} vs {b.k}")
    acc = 0.0
    for x, y in zip(a.coeffs.tolist(), b.coeffs.tolist()):
        d = x - y
        acc += d * d
    return float(np.sqrt(acc))


def features_from_profiles(profiles: Iterable[np.ndarray], k: int = K) -> list[OmniFeature]:
    return [extract_feature(p, k) for p in profiles]


def read_profiles(path: str | Path) -> list[np.ndarray]:
    """Read a ``PROFILE v1`` text file: a header line, then one frame per line.

    Blank lines and ``#`` comments are skipped.
    """
    profiles = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != PROFILE_MAGIC:
            raise FeatureError(f"{path}: expected header {PROFILE_MAGIC!r}, got {header!r}")
        width = None
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                row = np.array([float(tok) for tok in line.split()], dtype=np.float64)
            except ValueError as exc:
                raise FeatureError(f"{path}:{lineno}: {exc}") from None
            if width is None:
                width = row.shape[0]
            elif row.shape[0] != width:
                raise FeatureError(f"{path}:{lineno}: expected {width} values, got {row.shape[0]}")
            profiles.append(row)
    if not profiles:
        raise FeatureError(f"{path}: no profiles")
    return profiles


def write_profiles(path: str | Path, profiles: Iterable[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(PROFILE_MAGIC + "\n")
        for p in profiles:
            fh.write(" ".join(repr(float(v)) for v in np.asarray(p, dtype=np.float64)) + "\n")
