"""Dense point-cloud initialization from corrected depth maps.

Every valid pixel is back-projected to a 3-D point. A point's reliability
is the mean, over its source view's nearest neighbor views, of the
view-to-view cycle reprojection error: back-project the pixel, project
into the neighbor, sample the neighbor's depth there, back-project that,
re-project into the source view, and measure the pixel distance to the
starting pixel. Points whose mean error stays under a pixel threshold are
kept and voxel-downsampled into a uniform subset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import View, backproject, in_bounds, project
from .scene_io import DepthMap, SparseModel, sample_bilinear

__all__ = [
    "DensePointCloud",
    "select_neighbors",
    "cycle_reprojection_error",
    "build_dense_cloud",
    "compute_cycle_errors",
    "filter_reliable",
    "voxel_downsample",
    "scene_diagonal",
]


@dataclass(eq=False)
class DensePointCloud:
    """Back-projected points with provenance and reliability metadata.

    ``mean_cycle_error`` is NaN while unavailable and for points with no
    valid neighbor observation.
    """

    positions: np.ndarray
    source_views: np.ndarray
    source_pixels: np.ndarray
    mean_cycle_error: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, keep: np.ndarray) -> "DensePointCloud":
        return DensePointCloud(
            self.positions[keep],
            self.source_views[keep],
            self.source_pixels[keep],
            self.mean_cycle_error[keep],
        )


def select_neighbors(views: list[View], k: int) -> dict[int, list[int]]:
    """For each view, the k nearest other views by camera-center distance.

    Ties break toward the lower view_id. Raises when the scene has a single
    view (no cross-view check is possible).
    """
    if len(views) < 2:
        raise ValueError("neighbor selection needs at least 2 views")
    k = min(k, len(views) - 1)
    centers = np.array([v.pose.center for v in views])
    ids = np.array([v.view_id for v in views])
    graph: dict[int, list[int]] = {}
    for i, view in enumerate(views):
        dists = np.linalg.norm(centers - centers[i], axis=1)
        order = np.lexsort((ids, dists))
        chosen = [int(ids[j]) for j in order if j != i][:k]
        graph[view.view_id] = chosen
    return graph


def cycle_reprojection_error(
    view_i: View, pixels, depths_at_pixels, view_j: View, depth_j: DepthMap
) -> tuple[np.ndarray, np.ndarray]:
    """Cycle error of view-i pixels against neighbor view j, in pixels.

    Returns (errors, valid); an entry is invalid when the point projects
    behind or outside view j, lands on an invalid depth sample there, or
    the return projection is behind view i.
    """
    pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.atleast_1d(np.asarray(depths_at_pixels, dtype=np.float64))
    n = len(pix)
    err = np.full(n, np.nan)
    valid = np.zeros(n, dtype=bool)

    x_iu = backproject(view_i, pix, d)
    p_ju, _, front_j = project(view_j, x_iu)
    ok = front_j & in_bounds(view_j, p_ju)
    if not ok.any():
        return err, valid
    d_j, sample_ok = sample_bilinear(depth_j, p_ju[ok, 0], p_ju[ok, 1])
    idx = np.flatnonzero(ok)
    idx = idx[sample_ok]
    if len(idx) == 0:
        return err, valid
    x_ju = backproject(view_j, p_ju[idx], d_j[sample_ok])
    p_back, _, front_i = project(view_i, x_ju)
    idx = idx[front_i]
    if len(idx) == 0:
        return err, valid
    diff = p_back[front_i] - pix[idx]
    err[idx] = np.linalg.norm(diff, axis=1)
    valid[idx] = True
    return err, valid


def build_dense_cloud(views: list[View], depth_maps: list[DepthMap]) -> DensePointCloud:
    """Back-project every valid pixel of every view."""
    positions, source_views, source_pixels = [], [], []
    for view, depth in zip(views, depth_maps):
        ys, xs = np.nonzero(depth.mask)
        if len(ys) == 0:
            continue
        pix = np.stack([xs, ys], axis=1).astype(np.float64)
        pts = backproject(view, pix, depth.values[ys, xs])
        positions.append(pts)
        source_views.append(np.full(len(pts), view.view_id, dtype=np.int64))
        source_pixels.append(pix)
    if not positions:
        empty3 = np.empty((0, 3))
        return DensePointCloud(empty3, np.empty(0, dtype=np.int64), np.empty((0, 2)), np.empty(0))
    return DensePointCloud(
        np.concatenate(positions),
        np.concatenate(source_views),
        np.concatenate(source_pixels),
        np.full(sum(len(p) for p in positions), np.nan),
    )


def compute_cycle_errors(
    cloud: DensePointCloud,
    views: list[View],
    depth_maps: list[DepthMap],
    neighbors: dict[int, list[int]],
) -> DensePointCloud:
    """Fill in each point's mean cycle error over its source view's neighbors.

    The mean runs over valid neighbor checks only; points with none stay NaN.
    """
    by_id = {v.view_id: (v, depth_maps[i]) for i, v in enumerate(views)}
    mean_err = np.full(len(cloud), np.nan)
    for view_id, neighbor_ids in neighbors.items():
        sel = np.flatnonzero(cloud.source_views == view_id)
        if len(sel) == 0:
            continue
        view, depth = by_id[view_id]
        pix = cloud.source_pixels[sel]
        d = depth.values[pix[:, 1].astype(np.int64), pix[:, 0].astype(np.int64)]
        total = np.zeros(len(sel))
        count = np.zeros(len(sel))
        for j in neighbor_ids:
            view_j, depth_j = by_id[j]
            err, valid = cycle_reprojection_error(view, pix, d, view_j, depth_j)
            total[valid] += err[valid]
            count[valid] += 1
        has = count > 0
        mean_err[sel[has]] = total[has] / count[has]
    return DensePointCloud(
        cloud.positions, cloud.source_views, cloud.source_pixels, mean_err
    )


def filter_reliable(cloud: DensePointCloud, threshold_px: float) -> DensePointCloud:
    """Keep points whose mean cycle error is strictly below the threshold.

    Points that never produced a valid neighbor check (NaN) are dropped.
    """
    with np.errstate(invalid="ignore"):
        keep = np.nan_to_num(cloud.mean_cycle_error, nan=np.inf) < threshold_px
    return cloud.subset(keep)


def voxel_downsample(cloud: DensePointCloud, voxel_size: float) -> DensePointCloud:
    """One representative per occupied voxel.

    The representative position is the voxel centroid; metadata comes from
    the member nearest that centroid (first such member on a tie). Output
    order is ascending voxel key, z-major, then y, then x.
    """
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud.subset(np.zeros(0, dtype=bool))
    keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
    order = np.lexsort((keys[:, 0], keys[:, 1], keys[:, 2]))
    sorted_keys = keys[order]
    boundaries = np.flatnonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)) + 1
    groups = np.split(order, boundaries)

    positions = np.empty((len(groups), 3))
    rep = np.empty(len(groups), dtype=np.int64)
    for g, members in enumerate(groups):
        centroid = cloud.positions[members].mean(axis=0)
        positions[g] = centroid
        dists = np.linalg.norm(cloud.positions[members] - centroid, axis=1)
        rep[g] = members[np.argmin(dists)]
    return DensePointCloud(
        positions,
        cloud.source_views[rep],
        cloud.source_pixels[rep],
        cloud.mean_cycle_error[rep],
    )


def cycle_error_maps(cloud: DensePointCloud, views: list[View]) -> list[DepthMap]:
    """Per-view rasters of each source pixel's mean cycle error.

    Diagnostic export: pixels without a point (or without a valid check)
    are 0/invalid; everything else holds the mean error in pixels.
    """
    maps = []
    for view in views:
        raster = np.zeros((view.height, view.width))
        sel = np.flatnonzero(cloud.source_views == view.view_id)
        if len(sel):
            pix = cloud.source_pixels[sel].astype(np.int64)
            err = np.nan_to_num(cloud.mean_cycle_error[sel], nan=0.0)
            raster[pix[:, 1], pix[:, 0]] = err
        maps.append(DepthMap(raster))
    return maps


def scene_diagonal(model: SparseModel) -> float:
    """Bounding-box diagonal of the sparse points (camera centers fallback)."""
    if model.points:
        pts = np.array([p.position for p in model.points])
    else:
        pts = np.array([v.pose.center for v in model.views])
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
