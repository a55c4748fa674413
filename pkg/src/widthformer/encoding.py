"""Reference positional encodings for pixels, width features, sparse queries and BEV cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric
from .geometry import CameraRig, DepthBins, PolarCoord, rig_reference_points, to_polar
from .numeric import Mlp, ShapeError, tally

ENCODING_KINDS = ("pixel", "width", "query", "bev")
NORMALIZE_TOL = 1e-6


@dataclass(frozen=True)
class FourierEncoder:
    bands: int = 8
    distance_scale: float = 60.0
    height_scale: float = 10.0

    @property
    def frequencies(self) -> np.ndarray:
        return (2.0 ** np.arange(self.bands)) * np.pi

    @property
    def width(self) -> int:
        return 2 * self.bands

    def encode_width(self, include_height: bool) -> int:
        return self.width * (4 if include_height else 3)


def fourier(x, enc: FourierEncoder) -> np.ndarray:
    """Interleaved ``[sin(w0 x), cos(w0 x), sin(w1 x), ...]`` along a new trailing axis."""
    phase = np.asarray(x, dtype=float)[..., None] * enc.frequencies
    out = np.empty(phase.shape[:-1] + (2 * enc.bands,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def reference_pe(coord: PolarCoord, include_height: bool, enc: FourierEncoder) -> np.ndarray:
    blocks = [
        fourier(coord.d / enc.distance_scale, enc),
        fourier(coord.sin, enc),
        fourier(coord.cos, enc),
    ]
    if include_height:
        blocks.append(fourier(coord.z / enc.height_scale, enc))
    return np.concatenate(blocks, axis=-1)


@dataclass(frozen=True)
class EncodingSet:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ENCODING_KINDS:
            raise ValueError(f"unknown encoding kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"non-finite {self.kind} encoding")


# ---------------------------------------------------------------------------
# prediction heads over image features

def reference_coefficients(feat: np.ndarray, head: Mlp) -> np.ndarray:
    """Per-pixel softmax over depth bins, shape ``(N, H, W, D)``."""
    return numeric.softmax(head(feat), axis=-1)


def height_distribution(feat: np.ndarray, head: Mlp) -> np.ndarray:
    """Per-column softmax over image rows, shape ``(N, W, H)``."""
    logits = head(feat)[..., 0]
    return numeric.softmax(logits, axis=1).transpose(0, 2, 1)


def check_normalized(weights: np.ndarray, axis: int, what: str) -> None:
    if np.any(weights < 0) or np.max(np.abs(weights.sum(axis=axis) - 1.0)) > NORMALIZE_TOL:
        raise ValueError(f"{what} must be non-negative and sum to 1 along axis {axis}")


# ---------------------------------------------------------------------------
# encodings

def pixel_reference_sum(
    rig: CameraRig, shape: tuple[int, int], bins: DepthBins, coeffs: np.ndarray,
    include_height: bool, enc: FourierEncoder,
) -> np.ndarray:
    """Coefficient-weighted sum of reference-point encodings, before the MLP."""
    h, w = shape
    expected = (len(rig), h, w, len(bins))
    if coeffs.shape != expected:
        raise ShapeError(f"coefficients shape {coeffs.shape}, expected {expected}")
    points = rig_reference_points(rig, h, w, bins)
    pe = reference_pe(to_polar(points), include_height, enc)
    tally("agg", coeffs.size * pe.shape[-1])
    return (coeffs[..., None, :] @ pe)[..., 0, :]


def pixel_refpe(
    feat: np.ndarray, rig: CameraRig, bins: DepthBins, coeffs: np.ndarray, agg_mlp: Mlp,
    include_height: bool = True, enc: FourierEncoder = FourierEncoder(),
) -> EncodingSet:
    n, h, w, c = feat.shape
    if n != len(rig):
        raise ShapeError(f"{n} feature views for a {len(rig)}-camera rig")
    check_normalized(coeffs, -1, "reference coefficients")
    summed = pixel_reference_sum(rig, (h, w), bins, coeffs, include_height, enc)
    values = agg_mlp(summed)
    if values.shape != feat.shape:
        raise ShapeError(f"encoding shape {values.shape} does not match features {feat.shape}")
    return EncodingSet("pixel", values)


def width_reference_sum(
    rig: CameraRig, shape: tuple[int, int], bins: DepthBins, coeffs: np.ndarray,
    heights: np.ndarray, enc: FourierEncoder,
) -> np.ndarray:
    h, w = shape
    if heights.shape != (len(rig), w, h):
        raise ShapeError(f"height distribution shape {heights.shape}, expected {(len(rig), w, h)}")
    check_normalized(heights, -1, "height distribution")
    pixel = pixel_reference_sum(rig, shape, bins, coeffs, False, enc)
    tally("agg", heights.size * pixel.shape[-1])
    return (heights[..., None, :] @ pixel.transpose(0, 2, 1, 3))[..., 0, :]


def width_refpe(
    feat: np.ndarray, rig: CameraRig, bins: DepthBins, coeffs: np.ndarray, heights: np.ndarray,
    agg_mlp: Mlp, enc: FourierEncoder = FourierEncoder(),
) -> EncodingSet:
    """Height-free pixel encodings pooled down each column by ``heights``, then the MLP.

    Output shape ``(N, W, C)``.
    """
    n, h, w, _ = feat.shape
    if n != len(rig):
        raise ShapeError(f"{n} feature views for a {len(rig)}-camera rig")
    check_normalized(coeffs, -1, "reference coefficients")
    summed = width_reference_sum(rig, (h, w), bins, coeffs, heights, enc)
    return EncodingSet("width", agg_mlp(summed))


def query_refpe(anchor, mlp: Mlp, enc: FourierEncoder = FourierEncoder()) -> np.ndarray:
    return mlp(reference_pe(to_polar(np.asarray(anchor, dtype=float)), True, enc))


def bev_query_pe(grid, mlp: Mlp, enc: FourierEncoder = FourierEncoder()) -> EncodingSet:
    """BEV queries from a grid (or raw ``(H_B, W_B, 2)`` cell centers); no height block."""
    xy = np.asarray(getattr(grid, "centers", grid), dtype=float)
    points = np.concatenate([xy, np.zeros(xy.shape[:-1] + (1,))], axis=-1)
    return EncodingSet("bev", mlp(reference_pe(to_polar(points), False, enc)))
