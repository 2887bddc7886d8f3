"""Per-view coarse alignment of depth maps to sparse anchors.

Each view's predicted depth maps are matched against the camera-frame depths
of the sparse scene points observed in that view. An ordinary-least-squares
scale/offset fit per depth modality removes gross per-view drift; the
correction field then handles what is left.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import View, in_bounds, project
from .scene_io import DepthMap, SparseModel, sample_bilinear

logger = logging.getLogger(__name__)

__all__ = ["AnchorTriplet", "AffineParams", "extract_triplets", "fit_affine", "apply_affine"]

_VAR_EPS = 1e-12


@dataclass(frozen=True)
class AnchorTriplet:
    """Depth samples at one sparse-point projection in one view."""

    x: float
    y: float
    d_vggt: float
    d_mono: float
    d_anchor: float


@dataclass(frozen=True)
class AffineParams:
    """Scale/offset correction ``d -> s * d + b``."""

    s: float
    b: float


def extract_triplets(
    view: View,
    model: SparseModel,
    d_vggt: DepthMap,
    d_mono: DepthMap,
) -> list[AnchorTriplet]:
    """Sample both depth maps at every sparse-point projection in a view.

    Points are projected with the view's calibration (not the stored track
    observation); points behind the camera, out of bounds, or landing on an
    invalid bilinear footprint in either map are dropped.
    """
    if d_vggt.width != view.width or d_vggt.height != view.height:
        raise ValueError("multi-view depth resolution does not match the view")
    if d_mono.width != view.width or d_mono.height != view.height:
        raise ValueError("monocular depth resolution does not match the view")

    positions = []
    for point in model.points:
        if any(view_id == view.view_id for view_id, _, _ in point.track):
            positions.append(point.position)
    if not positions:
        return []
    positions = np.asarray(positions)

    pixels, depths, front = project(view, positions)
    keep = front & in_bounds(view, pixels)
    if not keep.any():
        return []
    pixels = pixels[keep]
    depths = depths[keep]

    vals_v, ok_v = sample_bilinear(d_vggt, pixels[:, 0], pixels[:, 1])
    vals_m, ok_m = sample_bilinear(d_mono, pixels[:, 0], pixels[:, 1])
    good = ok_v & ok_m
    return [
        AnchorTriplet(
            x=float(px[0]),
            y=float(px[1]),
            d_vggt=float(dv),
            d_mono=float(dm),
            d_anchor=float(da),
        )
        for px, dv, dm, da, ok in zip(pixels, vals_v, vals_m, depths, good)
        if ok
    ]


def fit_affine(samples) -> AffineParams:
    """Closed-form OLS fit of ``s * d + b ~ d_anchor``.

    Args:
        samples: iterable of (d, d_anchor) pairs.

    Fewer than 2 samples falls back to the identity; zero depth variance
    falls back to a scale-only fit. Both fallbacks log a warning.
    """
    arr = np.asarray(list(samples), dtype=np.float64).reshape(-1, 2)
    if len(arr) < 2:
        logger.warning("affine fit with %d sample(s): falling back to identity", len(arr))
        return AffineParams(s=1.0, b=0.0)
    d = arr[:, 0]
    a = arr[:, 1]
    d_mean = d.mean()
    a_mean = a.mean()
    var = np.mean((d - d_mean) ** 2)
    if var < _VAR_EPS:
        logger.warning("affine fit with degenerate depth variance: scale-only fallback")
        return AffineParams(s=float(a_mean / d_mean), b=0.0)
    cov = np.mean((d - d_mean) * (a - a_mean))
    s = cov / var
    b = a_mean - s * d_mean
    return AffineParams(s=float(s), b=float(b))


def apply_affine(depth: DepthMap, params: AffineParams) -> DepthMap:
    """Apply ``s * d + b`` to every valid pixel.

    Pixels whose corrected value is not strictly positive become invalid;
    invalid input pixels stay invalid.
    """
    mask = depth.mask
    out = np.where(mask, params.s * depth.values + params.b, 0.0)
    out[out <= 0] = 0.0
    return DepthMap(out)
