"""Pinhole camera model: projection, back-projection, and pixel normalization.

Conventions used throughout the package:

* World-to-camera pose: ``x_cam = R @ x_world + t``. The depth of a world
  point in a view is the z-component of its camera-frame coordinates.
* Pixel (0, 0) is the *center* of the top-left pixel; x grows rightward,
  y downward. A pixel is in-bounds when ``0 <= x <= width - 1`` and
  ``0 <= y <= height - 1``.
* Normalized image-plane coordinates map the pixel-center corners to
  exactly (-1, -1) and (+1, +1).

All types are immutable after construction and every function is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "View",
    "project",
    "backproject",
    "normalize_pixel",
    "normalized_view_index",
]

_ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels, plus the image size they refer to."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def scaled(self, sx: float, sy: float, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera at a rescaled resolution."""
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform: ``x_cam = rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > _ORTHONORMAL_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError(f"rotation determinant {det} != +1")
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """Pose applying ``other`` first, then ``self``."""
        return CameraPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True, eq=False)
class View:
    """One calibrated camera of a scene."""

    view_id: int
    intrinsics: CameraIntrinsics
    pose: CameraPose
    name: str = field(default="")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


def normalized_view_index(view_id: int, num_views: int) -> float:
    """Map a view index to [0, 1]; a single-view scene maps to 0."""
    if num_views <= 1:
        return 0.0
    return view_id / (num_views - 1)


def project(view: View, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into a view.

    Args:
        view: Target view.
        points: World coordinates, shape (3,) or (N, 3).

    Returns:
        (pixels, depths, valid): pixels (N, 2), camera-frame depths (N,),
        and a boolean mask that is False for points at or behind the
        camera plane (depth <= 0); pixel values for those entries are
        undefined. A (3,) input yields (2,), scalar, bool.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    cam = pts @ view.pose.rotation.T + view.pose.translation
    depth = cam[:, 2]
    valid = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        x = view.intrinsics.fx * cam[:, 0] / depth + view.intrinsics.cx
        y = view.intrinsics.fy * cam[:, 1] / depth + view.intrinsics.cy
    pixels = np.stack([x, y], axis=-1)
    if single:
        return pixels[0], depth[0], bool(valid[0])
    return pixels, depth, valid


def backproject(view: View, pixels, depths) -> np.ndarray:
    """Lift pixels with known positive depth back to world coordinates.

    Inverse of :func:`project`: ``project(view, backproject(view, p, d))``
    recovers (p, d) up to floating-point round-off.
    """
    px = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    d = np.atleast_1d(d)
    if np.any(d <= 0):
        raise ValueError("backproject requires strictly positive depths")
    xc = (px[:, 0] - view.intrinsics.cx) / view.intrinsics.fx * d
    yc = (px[:, 1] - view.intrinsics.cy) / view.intrinsics.fy * d
    cam = np.stack([xc, yc, d], axis=-1)
    world = (cam - view.pose.translation) @ view.pose.rotation
    return world[0] if single else world


def in_bounds(view: View, pixels) -> np.ndarray:
    """Pixel-center in-bounds test: 0 <= x <= W-1 and 0 <= y <= H-1."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    ok = (
        (px[:, 0] >= 0)
        & (px[:, 0] <= view.width - 1)
        & (px[:, 1] >= 0)
        & (px[:, 1] <= view.height - 1)
    )
    return ok[0] if np.asarray(pixels).ndim == 1 else ok


def normalize_pixel(view: View, pixels) -> np.ndarray:
    """Map in-bounds pixel coordinates to [-1, 1]^2 (corners hit +-1 exactly)."""
    px = np.asarray(pixels, dtype=np.float64)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    u = 2.0 * px[:, 0] / (view.width - 1) - 1.0
    v = 2.0 * px[:, 1] / (view.height - 1) - 1.0
    uv = np.stack([u, v], axis=-1)
    return uv[0] if single else uv
