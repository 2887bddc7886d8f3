"""Readers and writers for the pipeline's interchange formats.

Three formats are supported:

* PFM grayscale depth maps ("Pf", negative scale = little-endian,
  rows stored bottom-to-top).
* A COLMAP text-model subset (cameras.txt / images.txt / points3D.txt,
  PINHOLE and SIMPLE_PINHOLE only). COLMAP places the image origin at the
  top-left *corner* (pixel centers at half-integers); this package puts
  pixel (0, 0) at the top-left pixel *center*, so 0.5 is subtracted from
  observed coordinates and principal points on read and added back on write.
* PLY binary_little_endian point clouds (float32 x/y/z, optional uchar
  red/green/blue) and triangle meshes (faces as "list uchar int").

All readers/writers are pure functions over byte buffers or directories.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, View

__all__ = [
    "DepthMap",
    "ScenePoint",
    "SparseModel",
    "TriangleMesh",
    "FormatError",
    "read_pfm",
    "write_pfm",
    "parse_colmap_model",
    "write_colmap_model",
    "read_ply_points",
    "write_ply_points",
    "read_ply_mesh",
    "write_ply_mesh",
    "resize_depth_bilinear",
]


class FormatError(ValueError):
    """Malformed or unsupported file content."""


# ---------------------------------------------------------------------------
# Depth maps


@dataclass(eq=False)
class DepthMap:
    """Dense per-pixel depth raster.

    ``values`` is an (H, W) float array; a pixel is valid when its value is
    finite and strictly positive. Invalid pixels produced by pipeline
    operations are stored as 0.0.
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"depth values must be 2-D, got shape {vals.shape}")
        self.values = vals

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def mask(self) -> np.ndarray:
        """Boolean (H, W) validity mask: finite and > 0."""
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.values) & (self.values > 0)


def resize_depth_bilinear(depth: DepthMap, width: int, height: int) -> DepthMap:
    """Resample a depth map to a new resolution with bilinear interpolation.

    Output pixels whose (nonzero-weight) source footprint touches an invalid
    pixel become invalid; depth values themselves are never rescaled.
    """
    if depth.width == width and depth.height == height:
        return DepthMap(depth.values.copy())
    sx = depth.width / width
    sy = depth.height / height
    # Align pixel centers of the two grids.
    xs = (np.arange(width) + 0.5) * sx - 0.5
    ys = (np.arange(height) + 0.5) * sy - 0.5
    xs = np.clip(xs, 0, depth.width - 1)
    ys = np.clip(ys, 0, depth.height - 1)
    gx, gy = np.meshgrid(xs, ys)
    vals, valid = sample_bilinear(depth, gx.ravel(), gy.ravel())
    out = np.where(valid, vals, 0.0).reshape(height, width)
    return DepthMap(out)


def sample_bilinear(depth: DepthMap, xs, ys) -> tuple[np.ndarray, np.ndarray]:
    """Sample a depth map at continuous pixel coordinates.

    Returns (values, valid). A sample is invalid when it is out of bounds or
    any source pixel with nonzero bilinear weight is invalid.
    """
    x = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    y = np.atleast_1d(np.asarray(ys, dtype=np.float64))
    h, w = depth.values.shape
    inb = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    m = depth.mask
    v = depth.values
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    val = (
        w00 * v[y0, x0] + w10 * v[y0, x1] + w01 * v[y1, x0] + w11 * v[y1, x1]
    )
    ok = inb.copy()
    for wgt, my, mx in ((w00, y0, x0), (w10, y0, x1), (w01, y1, x0), (w11, y1, x1)):
        ok &= (wgt == 0) | m[my, mx]
    return val, ok


# ---------------------------------------------------------------------------
# PFM

_PFM_SCALE = -1.0  # little-endian output


def read_pfm(data: bytes) -> DepthMap:
    """Decode a grayscale PFM buffer into a DepthMap.

    Non-positive and non-finite samples are preserved in ``values`` and
    reported invalid by the mask.
    """
    if data[:2] == b"PF":
        raise FormatError("color PFM ('PF') is not supported, expected grayscale 'Pf'")
    if data[:2] != b"Pf":
        raise FormatError("not a PFM buffer (missing 'Pf' magic)")
    # Header: three whitespace-terminated fields after the magic.
    m = re.match(rb"Pf\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if m is None:
        raise FormatError("malformed PFM header")
    width, height = int(m.group(1)), int(m.group(2))
    try:
        scale = float(m.group(3))
    except ValueError as exc:
        raise FormatError(f"malformed PFM scale field {m.group(3)!r}") from exc
    if scale == 0:
        raise FormatError("PFM scale must be nonzero")
    payload = data[m.end():]
    expected = width * height * 4
    if len(payload) < expected:
        raise FormatError(
            f"truncated PFM payload: expected {expected} bytes, got {len(payload)}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    flat = np.frombuffer(payload[:expected], dtype=dtype)
    rows = flat.reshape(height, width)
    # PFM stores rows bottom-to-top.
    return DepthMap(rows[::-1].astype(np.float64))


def write_pfm(depth: DepthMap) -> bytes:
    """Encode a DepthMap as little-endian grayscale PFM."""
    header = f"Pf\n{depth.width} {depth.height}\n{_PFM_SCALE:.4f}\n".encode("ascii")
    rows = depth.values.astype("<f4")[::-1]
    return header + rows.tobytes()


# ---------------------------------------------------------------------------
# COLMAP text model


@dataclass(eq=False)
class ScenePoint:
    """A sparse scene point with its per-view observations."""

    point_id: int
    position: np.ndarray
    track: list[tuple[int, float, float]] = field(default_factory=list)
    """(view_id, x, y) observations in pixel-center coordinates."""


@dataclass(eq=False)
class SparseModel:
    """Calibrated views plus sparse anchor points."""

    views: list[View]
    points: list[ScenePoint]

    def view_by_id(self, view_id: int) -> View:
        return self.views[view_id]


def _model_lines(path: Path):
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        yield lineno, raw


class _LineReader:
    def __init__(self, path: Path):
        self.path = path
        self.lines = path.read_text().splitlines()
        self.idx = 0

    def next_content(self, allow_eof: bool = False):
        """Next non-comment line (may be empty), with its 1-based number."""
        while self.idx < len(self.lines):
            line = self.lines[self.idx]
            self.idx += 1
            if line.strip().startswith("#"):
                continue
            return self.idx, line
        if allow_eof:
            return None
        raise FormatError(f"{self.path.name}: unexpected end of file")

    def __iter__(self):
        while True:
            item = self.next_content(allow_eof=True)
            if item is None:
                return
            if item[1].strip() == "":
                continue
            yield item


def _quat_to_rotation(qw: float, qx: float, qy: float, qz: float) -> np.ndarray:
    n = qw * qw + qx * qx + qy * qy + qz * qz
    if n == 0:
        raise FormatError("zero-norm quaternion")
    s = 2.0 / n
    wx, wy, wz = s * qw * qx, s * qw * qy, s * qw * qz
    xx, xy, xz = s * qx * qx, s * qx * qy, s * qx * qz
    yy, yz, zz = s * qy * qy, s * qy * qz, s * qz * qz
    return np.array(
        [
            [1.0 - (yy + zz), xy - wz, xz + wy],
            [xy + wz, 1.0 - (xx + zz), yz - wx],
            [xz - wy, yz + wx, 1.0 - (xx + yy)],
        ]
    )


def _rotation_to_quat(rot: np.ndarray) -> tuple[float, float, float, float]:
    rxx, ryx, rzx, rxy, ryy, rzy, rxz, ryz, rzz = rot.flat
    k = (
        np.array(
            [
                [rxx - ryy - rzz, 0, 0, 0],
                [ryx + rxy, ryy - rxx - rzz, 0, 0],
                [rzx + rxz, rzy + ryz, rzz - rxx - ryy, 0],
                [ryz - rzy, rzx - rxz, rxy - ryx, rxx + ryy + rzz],
            ]
        )
        / 3.0
    )
    eigvals, eigvecs = np.linalg.eigh(k)
    q = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if q[0] < 0:
        q = -q
    return float(q[0]), float(q[1]), float(q[2]), float(q[3])


def _parse_camera_line(lineno: int, line: str) -> tuple[int, CameraIntrinsics]:
    parts = line.split()
    if len(parts) < 4:
        raise FormatError(f"cameras.txt:{lineno}: too few fields")
    cam_id = int(parts[0])
    model = parts[1]
    width, height = int(parts[2]), int(parts[3])
    params = [float(p) for p in parts[4:]]
    if model == "PINHOLE":
        if len(params) != 4:
            raise FormatError(f"cameras.txt:{lineno}: PINHOLE needs 4 params")
        fx, fy, cx, cy = params
    elif model == "SIMPLE_PINHOLE":
        if len(params) != 3:
            raise FormatError(f"cameras.txt:{lineno}: SIMPLE_PINHOLE needs 3 params")
        f, cx, cy = params
        fx = fy = f
    else:
        raise FormatError(f"cameras.txt:{lineno}: unsupported camera model {model!r}")
    intr = CameraIntrinsics(fx=fx, fy=fy, cx=cx - 0.5, cy=cy - 0.5, width=width, height=height)
    return cam_id, intr


def parse_colmap_model(directory) -> SparseModel:
    """Parse a COLMAP text model directory into a SparseModel.

    Views are assigned ids 0..N-1 in ascending IMAGE_ID order. Observations
    without a 3-D point (POINT3D_ID = -1) are dropped. Errors carry the file
    name and line number.
    """
    directory = Path(directory)
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (directory / name).exists():
            raise FormatError(f"missing {name} in {directory}")

    cameras: dict[int, CameraIntrinsics] = {}
    for lineno, line in _LineReader(directory / "cameras.txt"):
        try:
            cam_id, intr = _parse_camera_line(lineno, line)
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"cameras.txt:{lineno}: {exc}") from exc
        cameras[cam_id] = intr

    # images.txt alternates pose lines and 2-D observation lines.
    images = {}
    reader = _LineReader(directory / "images.txt")
    while True:
        item = reader.next_content(allow_eof=True)
        if item is None:
            break
        lineno, line = item
        if line.strip() == "":
            continue
        parts = line.split()
        if len(parts) < 10:
            raise FormatError(f"images.txt:{lineno}: too few fields in image line")
        try:
            image_id = int(parts[0])
            qw, qx, qy, qz = (float(p) for p in parts[1:5])
            tx, ty, tz = (float(p) for p in parts[5:8])
            camera_id = int(parts[8])
        except ValueError as exc:
            raise FormatError(f"images.txt:{lineno}: {exc}") from exc
        name = parts[9]
        if camera_id not in cameras:
            raise FormatError(f"images.txt:{lineno}: unknown camera id {camera_id}")
        obs_item = reader.next_content(allow_eof=True)
        obs = []
        if obs_item is not None:
            obs_lineno, obs_line = obs_item
            fields = obs_line.split()
            if len(fields) % 3 != 0:
                raise FormatError(
                    f"images.txt:{obs_lineno}: observation count not a multiple of 3"
                )
            try:
                for i in range(0, len(fields), 3):
                    obs.append(
                        (float(fields[i]), float(fields[i + 1]), int(fields[i + 2]))
                    )
            except ValueError as exc:
                raise FormatError(f"images.txt:{obs_lineno}: {exc}") from exc
        rotation = _quat_to_rotation(qw, qx, qy, qz)
        images[image_id] = (name, cameras[camera_id], rotation, np.array([tx, ty, tz]), obs)

    view_ids = {image_id: idx for idx, image_id in enumerate(sorted(images))}
    views = []
    for image_id in sorted(images):
        name, intr, rotation, translation, _ = images[image_id]
        views.append(
            View(
                view_id=view_ids[image_id],
                intrinsics=intr,
                pose=CameraPose(rotation, translation),
                name=name,
            )
        )

    points: list[ScenePoint] = []
    for lineno, line in _LineReader(directory / "points3D.txt"):
        parts = line.split()
        if len(parts) < 8 or (len(parts) - 8) % 2 != 0:
            raise FormatError(f"points3D.txt:{lineno}: malformed point line")
        try:
            point_id = int(parts[0])
            position = np.array([float(p) for p in parts[1:4]])
            track_raw = [
                (int(parts[i]), int(parts[i + 1])) for i in range(8, len(parts), 2)
            ]
        except ValueError as exc:
            raise FormatError(f"points3D.txt:{lineno}: {exc}") from exc
        track = []
        for image_id, p2d_idx in track_raw:
            if image_id not in images:
                raise FormatError(
                    f"points3D.txt:{lineno}: track references unknown image {image_id}"
                )
            obs = images[image_id][4]
            if p2d_idx < 0 or p2d_idx >= len(obs):
                raise FormatError(
                    f"points3D.txt:{lineno}: track references observation "
                    f"{p2d_idx} of image {image_id} which has {len(obs)}"
                )
            x, y, obs_point_id = obs[p2d_idx]
            if obs_point_id != point_id:
                raise FormatError(
                    f"points3D.txt:{lineno}: observation {p2d_idx} of image "
                    f"{image_id} belongs to point {obs_point_id}, not {point_id}"
                )
            track.append((view_ids[image_id], x - 0.5, y - 0.5))
        if len(track) < 2:
            raise FormatError(
                f"points3D.txt:{lineno}: point {point_id} has fewer than 2 observations"
            )
        points.append(ScenePoint(point_id=point_id, position=position, track=track))

    return SparseModel(views=views, points=points)


def _f(x) -> str:
    """Shortest round-trip decimal form of a float."""
    return repr(float(x))


def write_colmap_model(model: SparseModel, directory) -> None:
    """Write a SparseModel as a COLMAP text model (one camera per view)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    cam_lines = ["# Camera list with one line of data per camera:",
                 "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for view in model.views:
        intr = view.intrinsics
        cam_lines.append(
            f"{view.view_id + 1} PINHOLE {intr.width} {intr.height} "
            f"{_f(intr.fx)} {_f(intr.fy)} {_f(intr.cx + 0.5)} {_f(intr.cy + 0.5)}"
        )
    (directory / "cameras.txt").write_text("\n".join(cam_lines) + "\n")

    # Per-view observation lists, indexed by (view_id, obs index) from tracks.
    obs_per_view: dict[int, list[tuple[float, float, int]]] = {
        v.view_id: [] for v in model.views
    }
    track_indices: dict[tuple[int, int], int] = {}
    for point in model.points:
        for view_id, x, y in point.track:
            idx = len(obs_per_view[view_id])
            obs_per_view[view_id].append((x, y, point.point_id))
            track_indices[(point.point_id, view_id)] = idx

    img_lines = ["# Image list with two lines of data per image:",
                 "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
                 "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for view in model.views:
        qw, qx, qy, qz = _rotation_to_quat(view.pose.rotation)
        tx, ty, tz = view.pose.translation
        name = view.name or f"view_{view.view_id:04d}.png"
        img_lines.append(
            f"{view.view_id + 1} {_f(qw)} {_f(qx)} {_f(qy)} {_f(qz)} "
            f"{_f(tx)} {_f(ty)} {_f(tz)} {view.view_id + 1} {name}"
        )
        img_lines.append(
            " ".join(
                f"{_f(x + 0.5)} {_f(y + 0.5)} {pid}"
                for x, y, pid in obs_per_view[view.view_id]
            )
        )
    (directory / "images.txt").write_text("\n".join(img_lines) + "\n")

    pt_lines = ["# 3D point list with one line of data per point:",
                "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    for point in model.points:
        x, y, z = point.position
        track = " ".join(
            f"{view_id + 1} {track_indices[(point.point_id, view_id)]}"
            for view_id, _, _ in point.track
        )
        pt_lines.append(
            f"{point.point_id} {_f(x)} {_f(y)} {_f(z)} 128 128 128 0.0 {track}"
        )
    (directory / "points3D.txt").write_text("\n".join(pt_lines) + "\n")


# ---------------------------------------------------------------------------
# PLY


@dataclass(eq=False)
class TriangleMesh:
    """Indexed triangle mesh."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(verts):
                raise ValueError("face index out of range")
            degen = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if degen.any():
                raise ValueError(f"{int(degen.sum())} degenerate faces")
        self.vertices = verts
        self.faces = faces


def _ply_header(num_vertices: int, with_colors: bool, num_faces: int | None) -> bytes:
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {num_vertices}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if with_colors:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if num_faces is not None:
        lines += [f"element face {num_faces}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply_points(points, colors=None) -> bytes:
    """Encode a point cloud (optionally colored) as binary PLY."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    if colors is not None:
        cols = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        if len(cols) != len(pts):
            raise ValueError("colors and points length mismatch")
        rec = np.empty(len(pts), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
        rec["xyz"] = pts
        rec["rgb"] = cols
        payload = rec.tobytes()
    else:
        payload = pts.tobytes()
    return _ply_header(len(pts), colors is not None, None) + payload


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY buffer")
    header = data[: end + len(b"end_header\n")]
    body = data[len(header):]
    lines = header.decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in lines[1]:
        raise FormatError(f"unsupported PLY format line {lines[1]!r}")
    elements = []  # (name, count, [property lines])
    for line in lines[2:-1]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FormatError("property before element in PLY header")
            elements[-1][2].append(parts[1:])
        else:
            raise FormatError(f"unexpected PLY header line {line!r}")
    return elements, body


_VERTEX_XYZ = [["float", "x"], ["float", "y"], ["float", "z"]]
_VERTEX_RGB = [["uchar", "red"], ["uchar", "green"], ["uchar", "blue"]]


def _read_vertices(element, body: bytes):
    name, count, props = element
    if props == _VERTEX_XYZ:
        rec = np.dtype([("xyz", "<f4", 3)])
    elif props == _VERTEX_XYZ + _VERTEX_RGB:
        rec = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
    else:
        raise FormatError(f"unsupported vertex property layout {props}")
    nbytes = rec.itemsize * count
    if len(body) < nbytes:
        raise FormatError("truncated PLY vertex payload")
    arr = np.frombuffer(body[:nbytes], dtype=rec)
    colors = arr["rgb"].copy() if "rgb" in rec.names else None
    return arr["xyz"].astype(np.float64), colors, body[nbytes:]


def read_ply_points(data: bytes):
    """Decode a binary PLY point cloud to (points, colors-or-None)."""
    elements, body = _parse_ply_header(data)
    if not elements or elements[0][0] != "vertex":
        raise FormatError("PLY without leading vertex element")
    points, colors, body = _read_vertices(elements[0], body)
    for element in elements[1:]:
        if element[0] == "face" and element[1] == 0:
            continue
        raise FormatError(f"unexpected PLY element {element[0]!r} in point cloud")
    return points, colors


def write_ply_mesh(mesh: TriangleMesh) -> bytes:
    """Encode a triangle mesh as binary PLY."""
    verts = mesh.vertices.astype("<f4")
    faces = mesh.faces.astype("<i4")
    header = _ply_header(len(verts), False, len(faces))
    face_rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", 3)])
    face_rec["n"] = 3
    face_rec["idx"] = faces
    return header + verts.tobytes() + face_rec.tobytes()


def read_ply_mesh(data: bytes) -> TriangleMesh:
    """Decode a binary PLY triangle mesh (3-vertex faces only)."""
    elements, body = _parse_ply_header(data)
    if len(elements) != 2 or elements[0][0] != "vertex" or elements[1][0] != "face":
        raise FormatError("PLY mesh must contain vertex then face elements")
    verts, _, body = _read_vertices(elements[0], body)
    _, count, props = elements[1]
    if props != [["list", "uchar", "int", "vertex_indices"]]:
        raise FormatError(f"unsupported face property layout {props}")
    rec = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
    if len(body) < rec.itemsize * count:
        raise FormatError("truncated PLY face payload")
    arr = np.frombuffer(body[: rec.itemsize * count], dtype=rec)
    if count and not (arr["n"] == 3).all():
        raise FormatError("non-triangle face in PLY mesh")
    return TriangleMesh(vertices=verts, faces=arr["idx"].astype(np.int64))
