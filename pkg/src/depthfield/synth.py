"""Synthetic scenes with analytic ground truth, plus corruption injection.

Scenes are built from a few analytic primitives (spheres, planes, and
axis-bounded planes for step geometry) observed by a camera rig on a
circular arc or a translation line. Per-pixel depth is the closed-form
first ray intersection, so every derived quantity (anchor depths, surface
samples, error statistics) has an exact reference value.

Corruption models the failure modes the pipeline is built to remove:
per-view scale/offset drift, a smooth low-order polynomial bias over the
image plane, pixel noise, and gross outliers. Every corrupted map keeps a
record sufficient to invert the corruption and an outlier mask for oracle
labeling. All randomness is derived from a single seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, View, backproject, in_bounds, project
from .scene_io import (
    DepthMap,
    ScenePoint,
    SparseModel,
    sample_bilinear,
    write_colmap_model,
    write_pfm,
    write_ply_points,
)

__all__ = [
    "SceneSpec",
    "CorruptionSpec",
    "SyntheticScene",
    "CorruptedDepths",
    "DepthErrorStats",
    "Sphere",
    "Plane",
    "render_depth",
    "generate_scene",
    "corrupt_depths",
    "depth_error_report",
    "write_scene_directory",
]

_VISIBILITY_REL_TOL = 5e-3


# ---------------------------------------------------------------------------
# Primitives


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - np.asarray(self.center)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        t = np.full(len(dirs), np.inf)
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        near = np.where(t0 > 1e-12, t0, t1)
        t[hit & (near > 1e-12)] = near[hit & (near > 1e-12)]
        return t

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * v


@dataclass(frozen=True)
class Plane:
    """Plane ``normal . x = offset``, optionally bounded along world x or y."""

    normal: tuple[float, float, float]
    offset: float
    x_range: tuple[float, float] | None = None
    y_range: tuple[float, float] | None = None

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ n) / denom
        t = np.where((np.abs(denom) > 1e-15) & (t > 1e-12), t, np.inf)
        if self.x_range is not None or self.y_range is not None:
            ok = np.isfinite(t)
            pts = origin + np.where(ok, t, 0.0)[:, None] * dirs
            if self.x_range is not None:
                ok &= (pts[:, 0] >= self.x_range[0]) & (pts[:, 0] < self.x_range[1])
            if self.y_range is not None:
                ok &= (pts[:, 1] >= self.y_range[0]) & (pts[:, 1] < self.y_range[1])
            t = np.where(ok, t, np.inf)
        return t

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # Sampling window: the declared range clipped to a desk-scale extent.
        xr = self.x_range or (-1.5, 1.5)
        yr = self.y_range or (-1.5, 1.5)
        xr = (max(xr[0], -1.5), min(xr[1], 1.5))
        yr = (max(yr[0], -1.5), min(yr[1], 1.5))
        xs = rng.uniform(xr[0], xr[1], size=n)
        ys = rng.uniform(yr[0], yr[1], size=n)
        nx, ny, nz = self.normal
        if abs(nz) < 1e-12:
            raise ValueError("can only sample near-fronto-parallel planes")
        zs = (self.offset - nx * xs - ny * ys) / nz
        return np.stack([xs, ys, zs], axis=1)


_SURFACES: dict[str, list] = {
    "plane": [Plane((0.0, 0.0, 1.0), 2.5)],
    "sphere": [Sphere((0.0, 0.0, 2.2), 0.5)],
    "sphere_plane": [
        Sphere((0.0, 0.1, 2.2), 0.5),
        Plane((0.0, 0.0, 1.0), 3.0),
    ],
    "two_spheres": [
        Sphere((-0.45, 0.0, 2.3), 0.35),
        Sphere((0.5, 0.15, 2.45), 0.45),
        Plane((0.0, 0.0, 1.0), 3.2),
    ],
    "step": [
        Plane((0.0, 0.0, 1.0), 2.0, x_range=(-np.inf, 0.0)),
        Plane((0.0, 0.0, 1.0), 2.6, x_range=(0.0, np.inf)),
    ],
}


# ---------------------------------------------------------------------------
# Specs and results


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to deterministically build a synthetic scene."""

    surface: str = "sphere_plane"
    n_views: int = 8
    width: int = 128
    height: int = 128
    anchors_per_view: int = 1500
    rig: str = "arc"
    arc_degrees: float = 50.0
    elevation_degrees: float = 12.0
    rig_distance: float = 2.2
    fov_degrees: float = 55.0
    num_surface_samples: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.surface not in _SURFACES:
            raise ValueError(f"unknown surface {self.surface!r}; options: {sorted(_SURFACES)}")
        if self.n_views < 2:
            raise ValueError("need at least 2 views")
        if self.width < 32 or self.height < 32:
            raise ValueError("resolution must be at least 32x32")
        if self.rig not in ("arc", "line"):
            raise ValueError(f"unknown rig {self.rig!r}")


@dataclass(frozen=True)
class CorruptionSpec:
    """Per-channel corruption parameters; fully determined by the seed.

    Scale/offset pairs are drawn per view; ``offset_frac`` scales with the
    scene's median depth and ``poly_frac`` with its depth range. The
    monocular channel deliberately carries stronger affine drift and a
    weaker spatial bias than the multi-view channel.
    """

    scale_range_vggt: tuple[float, float] = (0.85, 1.15)
    scale_range_mono: tuple[float, float] = (0.7, 1.4)
    offset_frac_vggt: float = 0.05
    offset_frac_mono: float = 0.1
    poly_frac_vggt: float = 0.02
    poly_frac_mono: float = 0.01
    noise_sigma_frac_vggt: float = 0.0015
    noise_sigma_frac_mono: float = 0.0015
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 0.35
    seed: int = 0

    def affine_only(self) -> "CorruptionSpec":
        return replace(
            self, poly_frac_vggt=0.0, poly_frac_mono=0.0,
            noise_sigma_frac_vggt=0.0, noise_sigma_frac_mono=0.0,
            outlier_fraction=0.0,
        )


@dataclass(eq=False)
class ChannelCorruption:
    """Recorded corruption of one depth channel of one view."""

    scale: float
    offset: float
    poly: np.ndarray  # (H, W) smooth bias added before scaling
    noise_sigma: float
    outlier_mask: np.ndarray  # (H, W) bool

    def invert(self, depth: DepthMap) -> DepthMap:
        vals = np.where(
            depth.mask, (depth.values - self.offset) / self.scale - self.poly, 0.0
        )
        vals[vals <= 0] = 0.0
        return DepthMap(vals)


@dataclass(eq=False)
class CorruptedDepths:
    vggt: list[DepthMap]
    mono: list[DepthMap]
    vggt_record: list[ChannelCorruption]
    mono_record: list[ChannelCorruption]


@dataclass(eq=False)
class SyntheticScene:
    spec: SceneSpec
    views: list[View]
    gt_depths: list[DepthMap]
    model: SparseModel
    gt_surface_samples: np.ndarray


# ---------------------------------------------------------------------------
# Rig construction


def _look_at(center: np.ndarray, target: np.ndarray) -> CameraPose:
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    world_down = np.array([0.0, 1.0, 0.0])
    down = world_down - (world_down @ fwd) * fwd
    norm = np.linalg.norm(down)
    if norm < 1e-9:
        raise ValueError("camera forward is parallel to the image-down axis")
    down /= norm
    right = np.cross(down, fwd)
    rot = np.stack([right, down, fwd])
    return CameraPose(rot, -rot @ center)


def _make_intrinsics(spec: SceneSpec) -> CameraIntrinsics:
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_degrees) / 2)
    return CameraIntrinsics(
        fx=f, fy=f,
        cx=(spec.width - 1) / 2, cy=(spec.height - 1) / 2,
        width=spec.width, height=spec.height,
    )


def _build_rig(spec: SceneSpec) -> list[View]:
    intr = _make_intrinsics(spec)
    views = []
    if spec.rig == "arc":
        target = np.array([0.0, 0.0, 2.2])
        if spec.arc_degrees >= 360.0:
            angles = np.linspace(0.0, 2 * np.pi, spec.n_views, endpoint=False)
        else:
            half = np.radians(spec.arc_degrees) / 2
            angles = np.linspace(-half, half, spec.n_views)
        elev = np.radians(spec.elevation_degrees)
        for i, ang in enumerate(angles):
            center = target + spec.rig_distance * np.array(
                [np.sin(ang) * np.cos(elev), -np.sin(elev), -np.cos(ang) * np.cos(elev)]
            )
            views.append(
                View(view_id=i, intrinsics=intr, pose=_look_at(center, target),
                     name=f"view_{i:04d}.png")
            )
    else:  # line: pure y-translation, identity rotation, looking down +z
        span = 0.3
        offsets = np.linspace(-span / 2, span / 2, spec.n_views)
        for i, dy in enumerate(offsets):
            center = np.array([0.0, dy, 0.0])
            pose = CameraPose(np.eye(3), -center)
            views.append(View(view_id=i, intrinsics=intr, pose=pose,
                              name=f"view_{i:04d}.png"))
    centers = np.array([v.pose.center for v in views])
    if np.max(np.ptp(centers, axis=0)) < 1e-9:
        raise ValueError("degenerate rig: all cameras coincident")
    return views


# ---------------------------------------------------------------------------
# Scene generation


def render_depth(view: View, primitives) -> DepthMap:
    w, h = view.width, view.height
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    intr = view.intrinsics
    cam_dirs = np.stack(
        [(xs.ravel() - intr.cx) / intr.fx, (ys.ravel() - intr.cy) / intr.fy,
         np.ones(w * h)], axis=1,
    )
    dirs = cam_dirs @ view.pose.rotation  # R^T rows applied to each dir
    origin = view.pose.center
    t = np.full(w * h, np.inf)
    for prim in primitives:
        t = np.minimum(t, prim.intersect(origin, dirs))
    depth = np.where(np.isfinite(t), t, 0.0).reshape(h, w)
    return DepthMap(depth)


def _visible_in_view(
    view: View, depth: DepthMap, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Project points and test against the view's depth map.

    Returns (pixels, visible): visible points are in front of the camera,
    in bounds, and match the rendered depth within a small relative
    tolerance (occluded points fail the depth comparison).
    """
    pixels, depths, front = project(view, points)
    ok = front & in_bounds(view, pixels)
    vals = np.zeros(len(points))
    sok = np.zeros(len(points), dtype=bool)
    if ok.any():
        vals[ok], sok[ok] = sample_bilinear(depth, pixels[ok, 0], pixels[ok, 1])
    visible = ok & sok & (np.abs(vals - depths) <= _VISIBILITY_REL_TOL * depths)
    return pixels, visible


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Build views, exact depth maps, anchor model, and surface samples."""
    primitives = _SURFACES[spec.surface]
    views = _build_rig(spec)
    gt_depths = [render_depth(view, primitives) for view in views]

    ss = np.random.SeedSequence(spec.seed)
    rng_anchor, rng_samples = (np.random.default_rng(s) for s in ss.spawn(2))

    points: list[ScenePoint] = []
    next_id = 1
    for view, depth in zip(views, gt_depths):
        valid_idx = np.flatnonzero(depth.mask.ravel())
        if len(valid_idx) == 0:
            continue
        take = min(spec.anchors_per_view, len(valid_idx))
        chosen = rng_anchor.choice(valid_idx, size=take, replace=False)
        ys, xs = np.divmod(chosen, depth.width)
        pix = np.stack([xs, ys], axis=1).astype(np.float64)
        pts3d = backproject(view, pix, depth.values[ys, xs])

        tracks = [[(view.view_id, float(x), float(y))] for x, y in pix]
        for other, other_depth in zip(views, gt_depths):
            if other.view_id == view.view_id:
                continue
            opix, visible = _visible_in_view(other, other_depth, pts3d)
            for k in np.flatnonzero(visible):
                tracks[k].append((other.view_id, float(opix[k, 0]), float(opix[k, 1])))
        for pt, track in zip(pts3d, tracks):
            if len(track) >= 2:
                points.append(ScenePoint(point_id=next_id, position=pt, track=track))
                next_id += 1

    samples = []
    per_prim = max(1, spec.num_surface_samples // len(primitives))
    for prim in primitives:
        cand = prim.sample_points(per_prim * 3, rng_samples)
        visible_any = np.zeros(len(cand), dtype=bool)
        for view, depth in zip(views, gt_depths):
            _, vis = _visible_in_view(view, depth, cand)
            visible_any |= vis
        kept = cand[visible_any][:per_prim]
        samples.append(kept)
    gt_surface_samples = np.concatenate(samples, axis=0)

    return SyntheticScene(
        spec=spec, views=views, gt_depths=gt_depths,
        model=SparseModel(views=views, points=points),
        gt_surface_samples=gt_surface_samples,
    )


# ---------------------------------------------------------------------------
# Corruption


def _poly_bias(width: int, height: int, amplitude: float, rng) -> np.ndarray:
    if amplitude == 0:
        return np.zeros((height, width))
    u = 2.0 * np.arange(width) / (width - 1) - 1.0
    v = 2.0 * np.arange(height) / (height - 1) - 1.0
    uu, vv = np.meshgrid(u, v)
    coeffs = rng.uniform(-1.0, 1.0, size=6)
    basis = [np.ones_like(uu), uu, vv, uu * uu, uu * vv, vv * vv]
    poly = sum(c * b for c, b in zip(coeffs, basis))
    rms = np.sqrt(np.mean(poly**2))
    return poly * (amplitude / rms) if rms > 0 else poly


def _outlier_blobs(
    mask: np.ndarray, fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Clustered outlier regions covering roughly ``fraction`` of valid pixels.

    Depth-network failures are blobby (edges, reflective or textureless
    patches), so outliers are injected as random disks, each with a coherent
    signed relative magnitude factor in +-[0.8, 1.0]. Returns the outlier
    mask and the per-pixel factor field.
    """
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    blobs = np.zeros((h, w), dtype=bool)
    factor = np.zeros((h, w))
    target = fraction * mask.sum()
    for _ in range(10_000):
        if (blobs & mask).sum() >= target:
            break
        cx = rng.uniform(0, w - 1)
        cy = rng.uniform(0, h - 1)
        r = rng.uniform(0.025 * w, 0.06 * w)
        sign = -1.0 if rng.random() < 0.5 else 1.0
        strength = sign * rng.uniform(0.8, 1.0)
        circle = ((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r) & ~blobs
        factor[circle] = strength
        blobs |= circle
    blobs &= mask
    factor[~blobs] = 0.0
    return blobs, factor


def _corrupt_channel(
    gt: DepthMap, scale_range, offset_scale: float, poly_amp: float,
    noise_sigma: float, outlier_fraction: float, outlier_magnitude: float,
    rng: np.random.Generator,
) -> tuple[DepthMap, ChannelCorruption]:
    h, w = gt.values.shape
    s = rng.uniform(*scale_range)
    b = rng.uniform(-offset_scale, offset_scale)
    poly = _poly_bias(w, h, poly_amp, rng)
    mask = gt.mask
    vals = np.where(mask, s * (gt.values + poly) + b, 0.0)
    if noise_sigma > 0:
        vals = np.where(mask, vals + rng.normal(0.0, noise_sigma, size=(h, w)), 0.0)
    outliers = np.zeros((h, w), dtype=bool)
    if outlier_fraction > 0:
        outliers, factor = _outlier_blobs(mask, outlier_fraction, rng)
        vals = np.where(outliers, vals * (1.0 + factor * outlier_magnitude), vals)
    vals[vals <= 0] = 0.0
    return DepthMap(vals), ChannelCorruption(
        scale=s, offset=b, poly=poly, noise_sigma=noise_sigma, outlier_mask=outliers
    )


def corrupt_depths(scene: SyntheticScene, spec: CorruptionSpec) -> CorruptedDepths:
    """Produce pseudo multi-view and pseudo monocular maps from exact depth."""
    all_vals = np.concatenate([d.values[d.mask] for d in scene.gt_depths])
    median_depth = float(np.median(all_vals))
    depth_range = float(all_vals.max() - all_vals.min())

    ss = np.random.SeedSequence(spec.seed)
    streams = ss.spawn(2 * len(scene.gt_depths))
    vggt, mono, rec_v, rec_m = [], [], [], []
    for i, gt in enumerate(scene.gt_depths):
        rng_v = np.random.default_rng(streams[2 * i])
        rng_m = np.random.default_rng(streams[2 * i + 1])
        dv, cv = _corrupt_channel(
            gt, spec.scale_range_vggt, spec.offset_frac_vggt * median_depth,
            spec.poly_frac_vggt * depth_range,
            spec.noise_sigma_frac_vggt * median_depth,
            spec.outlier_fraction, spec.outlier_magnitude, rng_v,
        )
        dm, cm = _corrupt_channel(
            gt, spec.scale_range_mono, spec.offset_frac_mono * median_depth,
            spec.poly_frac_mono * depth_range,
            spec.noise_sigma_frac_mono * median_depth,
            spec.outlier_fraction, spec.outlier_magnitude, rng_m,
        )
        vggt.append(dv)
        mono.append(dm)
        rec_v.append(cv)
        rec_m.append(cm)
    return CorruptedDepths(vggt=vggt, mono=mono, vggt_record=rec_v, mono_record=rec_m)


# ---------------------------------------------------------------------------
# Error statistics


@dataclass(frozen=True)
class DepthErrorStats:
    """Masked L1 statistics of predicted depth against ground truth."""

    mean_l1: float
    median_l1: float
    max_l1: float
    per_view_mean: tuple[float, ...]
    excluded_pixels: int

    def as_dict(self) -> dict:
        return {
            "mean_l1": self.mean_l1,
            "median_l1": self.median_l1,
            "max_l1": self.max_l1,
            "per_view_mean": list(self.per_view_mean),
            "excluded_pixels": self.excluded_pixels,
        }


def depth_error_report(pred: list[DepthMap], gt: list[DepthMap]) -> DepthErrorStats:
    """Per-view and overall L1 depth error over jointly valid pixels."""
    if len(pred) != len(gt):
        raise ValueError("view count mismatch")
    all_err = []
    per_view = []
    excluded = 0
    for p, g in zip(pred, gt):
        if p.values.shape != g.values.shape:
            raise ValueError("depth map dimension mismatch")
        both = p.mask & g.mask
        excluded += int(both.size - both.sum())
        err = np.abs(p.values[both] - g.values[both])
        per_view.append(float(err.mean()) if err.size else float("nan"))
        all_err.append(err)
    flat = np.concatenate(all_err) if all_err else np.array([])
    return DepthErrorStats(
        mean_l1=float(flat.mean()) if flat.size else float("nan"),
        median_l1=float(np.median(flat)) if flat.size else float("nan"),
        max_l1=float(flat.max()) if flat.size else float("nan"),
        per_view_mean=tuple(per_view),
        excluded_pixels=excluded,
    )


# ---------------------------------------------------------------------------
# Scene directory export


def write_scene_directory(
    scene: SyntheticScene, corrupted: CorruptedDepths, directory
) -> None:
    """Write a scene as consumed by the CLI: COLMAP model, PFM depths, gt."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_colmap_model(scene.model, directory)

    depth_dir = directory / "depth"
    depth_dir.mkdir(exist_ok=True)
    gt_dir = directory / "gt"
    gt_dir.mkdir(exist_ok=True)
    for view, dv, dm, g in zip(scene.views, corrupted.vggt, corrupted.mono, scene.gt_depths):
        stem = Path(view.name).stem
        (depth_dir / f"{stem}_vggt.pfm").write_bytes(write_pfm(dv))
        (depth_dir / f"{stem}_mono.pfm").write_bytes(write_pfm(dm))
        (gt_dir / f"{stem}.pfm").write_bytes(write_pfm(g))
    (gt_dir / "surface_samples.ply").write_bytes(
        write_ply_points(scene.gt_surface_samples)
    )

    any_outliers = any(r.outlier_mask.any() for r in corrupted.vggt_record + corrupted.mono_record)
    if any_outliers:
        mask_dir = directory / "masks"
        mask_dir.mkdir(exist_ok=True)
        for view, rv, rm in zip(scene.views, corrupted.vggt_record, corrupted.mono_record):
            stem = Path(view.name).stem
            (mask_dir / f"{stem}_vggt_outliers.pfm").write_bytes(
                write_pfm(DepthMap(rv.outlier_mask.astype(np.float64)))
            )
            (mask_dir / f"{stem}_mono_outliers.pfm").write_bytes(
                write_pfm(DepthMap(rm.outlier_mask.astype(np.float64)))
            )
