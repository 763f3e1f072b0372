"""Binary view of the marker-studded inner wall from the embedded camera.

Markers are drawn as filled angular discs (projected sphere silhouettes),
which is all the binarised observation retains.  Occlusion is decided by a
single ray from the camera centre to each marker centre, tested against the
inner-wall triangles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .geometry import RigidTransform, rotation_from_euler_deg
from .scene import SceneParams, row_group
from .simulator import TriMesh

PATTERN_KINDS = ("P1", "P2", "P3", "P4")


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class BinaryImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise RenderError("binary images are 2-D")
        if px.size and not np.all((px == 0) | (px == 1)):
            raise RenderError("binary image pixels must be 0 or 1")
        px = px.astype(np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def zeros(cls, size: int) -> "BinaryImage":
        return cls(np.zeros((size, size), dtype=np.uint8))

    def save(self, path) -> None:
        formats.write_pgm(path, self.pixels.astype(bool))

    @classmethod
    def load(cls, path) -> "BinaryImage":
        gray = formats.read_pgm(path)
        return cls((gray >= 128).astype(np.uint8))

    def __eq__(self, other):
        return isinstance(other, BinaryImage) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class CameraModel:
    projection: str = "fisheye"
    fov: float = 160.0
    image_size: int = 256
    pose: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if self.projection not in ("pinhole", "fisheye"):
            raise RenderError(f"unknown projection {self.projection!r}")
        upper_ok = self.fov < 180 if self.projection == "pinhole" else self.fov <= 180
        if not (self.fov > 0 and upper_ok):
            raise RenderError(f"field of view {self.fov} out of range for {self.projection}")
        n = self.image_size
        if n < 16 or n & (n - 1):
            raise RenderError("image size must be a power of two and at least 16")

    def focal(self, fov: float | None = None) -> float:
        half = math.radians((self.fov if fov is None else fov) / 2.0)
        if self.projection == "pinhole":
            return (self.image_size / 2.0) / math.tan(half)
        return (self.image_size / 2.0) / half

    def pixel_rays(self, fov: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Unit viewing direction (camera frame) per pixel centre, plus a validity mask."""
        return _pixel_rays(self.projection, self.image_size, self.fov if fov is None else fov)

    def project(self, pts_cam: np.ndarray, fov: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(u, v)`` of camera-frame points and a visibility mask."""
        fov = self.fov if fov is None else fov
        f = self.focal(fov)
        c = self.image_size / 2.0
        x, y, z = pts_cam[:, 0], pts_cam[:, 1], pts_cam[:, 2]
        rho = np.hypot(x, y)
        theta = np.arctan2(rho, z)
        if self.projection == "pinhole":
            ok = z > 0
            zs = np.where(ok, z, 1.0)
            u, v = f * x / zs, f * y / zs
        else:
            ok = theta <= math.radians(fov) / 2.0
            r = f * theta
            scale = np.divide(r, rho, out=np.zeros_like(r), where=rho > 0)
            u, v = scale * x, scale * y
        return np.stack([u + c, v + c], axis=1), ok


_RAY_CACHE: dict = {}


def _pixel_rays(projection: str, size: int, fov: float):
    key = (projection, size, round(fov, 12))
    hit = _RAY_CACHE.get(key)
    if hit is not None:
        return hit
    half = math.radians(fov / 2.0)
    c = size / 2.0
    coords = np.arange(size) + 0.5 - c
    u, v = np.meshgrid(coords, coords)  # v indexes rows
    if projection == "pinhole":
        f = c / math.tan(half)
        d = np.stack([u, v, np.full_like(u, f)], axis=-1)
        valid = np.ones(u.shape, dtype=bool)
    else:
        f = c / half
        r = np.hypot(u, v)
        theta = r / f
        valid = theta <= half
        s = np.divide(np.sin(theta), r, out=np.zeros_like(r), where=r > 0)
        d = np.stack([s * u, s * v, np.cos(theta)], axis=-1)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    rays = (d.reshape(-1, 3), valid.reshape(-1))
    if len(_RAY_CACHE) > 64:
        _RAY_CACHE.clear()
    _RAY_CACHE[key] = rays
    return rays


@dataclass(frozen=True)
class MarkerPattern:
    kind: str
    rows: int
    markers_per_row: int
    angular_layout: tuple[float, ...]  # marker angles within a row, deg from the bending plane
    stations: tuple[float, ...]  # axial arc-length of each row, mm
    marker_diameter: float = 4.0

    def __post_init__(self):
        if self.marker_diameter <= 0:
            raise RenderError("marker diameter must be positive")
        if len(self.angular_layout) != self.markers_per_row or len(self.stations) != self.rows:
            raise RenderError("pattern layout does not match its row/marker counts")

    @property
    def count(self) -> int:
        return self.rows * self.markers_per_row


def make_pattern(kind: str, length: float = 100.0, first: float = 10.0, last: float = 90.0,
                 marker_diameter: float = 4.0) -> MarkerPattern:
    """The four hand-designed layouts.

    A row is a ring of markers at one axial station.  P1 and P2 put eight
    markers per ring, evenly around the circumference, on 12 and 6 stations
    (P2 takes every other P1 station).  P3 and P4 each have two axial columns
    of eight: P3 at +-90 deg (across the bending plane), P4 at 0 and 180 deg
    (in the bending plane).
    """
    scale = length / 100.0
    dense = tuple(float(s) for s in np.linspace(first * scale, last * scale, 12))
    ring = tuple(45.0 * i for i in range(8))
    sparse = tuple(float(s) for s in np.linspace(first * scale, last * scale, 8))
    if kind == "P1":
        return MarkerPattern("P1", 12, 8, ring, dense, marker_diameter)
    if kind == "P2":
        return MarkerPattern("P2", 6, 8, ring, dense[::2], marker_diameter)
    if kind == "P3":
        return MarkerPattern("P3", 8, 2, (90.0, 270.0), sparse, marker_diameter)
    if kind == "P4":
        return MarkerPattern("P4", 8, 2, (0.0, 180.0), sparse, marker_diameter)
    raise RenderError(f"unknown pattern kind {kind!r}; expected one of {PATTERN_KINDS}")


@dataclass(frozen=True)
class MarkerSet:
    """Markers anchored to inner-wall parameter coordinates of a mesh topology."""

    pattern: MarkerPattern
    rows: np.ndarray  # row index per marker
    slots: np.ndarray  # position within the row
    s: np.ndarray  # axial arc-length, mm
    phi: np.ndarray  # angle from the bending plane, deg
    grid_shape: tuple[int, int]  # (stations, sides) of the bound inner grid
    length: float

    def __len__(self) -> int:
        return len(self.s)

    def rotated(self, degrees: float) -> "MarkerSet":
        return MarkerSet(self.pattern, self.rows, self.slots, self.s, self.phi + degrees,
                         self.grid_shape, self.length)

    def weights(self, scene: SceneParams | None = None):
        """Grid vertex indices ``(K, 4, 2)`` and bilinear weights ``(K, 4)``."""
        s, phi = self.s, self.phi
        if scene is not None:
            s, phi, _ = _perturbed_coords(self, scene)
        return _bilinear(s, phi, self.grid_shape, self.length)

    def positions(self, mesh: TriMesh, scene: SceneParams | None = None) -> np.ndarray:
        """World positions of the marker centres on a (deformed) mesh."""
        _check_binding(self, mesh)
        s, phi, depth = (self.s, self.phi, np.zeros(len(self))) if scene is None else _perturbed_coords(self, scene)
        idx, w = _bilinear(s, phi, self.grid_shape, self.length)
        grid = mesh.inner_grid
        pts = np.einsum("kj,kjd->kd", w, grid[idx[..., 0], idx[..., 1]])
        if np.any(depth != 0):
            centres = grid.mean(axis=1)
            ring = _row_interp(s, self.grid_shape, self.length)
            axis_pts = centres[ring[0]] * (1 - ring[2])[:, None] + centres[ring[1]] * ring[2][:, None]
            inward = axis_pts - pts
            inward /= np.linalg.norm(inward, axis=1, keepdims=True)
            pts = pts + depth[:, None] * inward
        return pts


def _check_binding(markers: MarkerSet, mesh: TriMesh) -> None:
    if mesh.inner_vertex_ids.shape != markers.grid_shape:
        raise RenderError("marker set is bound to a different mesh topology")


def _perturbed_coords(markers: MarkerSet, scene: SceneParams):
    n_rows = markers.pattern.rows
    m = markers.pattern.markers_per_row
    s = markers.s.astype(np.float64).copy()
    phi = markers.phi.astype(np.float64).copy()
    depth = np.zeros(len(s))
    centred = markers.slots - (m - 1) / 2.0
    for r in range(n_rows):
        sel = markers.rows == r
        p = scene.row(row_group(r, n_rows))
        s[sel] += p["axial_offset"]
        phi[sel] += p["angular_offset"] + centred[sel] * p["spacing_delta"]
        depth[sel] = p["radial_depth_delta"]
    s = np.clip(s, 0.0, markers.length)
    return s, phi, depth


def _row_interp(s: np.ndarray, grid_shape, length: float):
    stations = grid_shape[0]
    t = np.clip(s / length, 0.0, 1.0) * (stations - 1)
    r0 = np.minimum(np.floor(t).astype(np.int64), stations - 2)
    return r0, r0 + 1, t - r0


def _bilinear(s, phi, grid_shape, length):
    sides = grid_shape[1]
    r0, r1, fr = _row_interp(np.asarray(s, dtype=np.float64), grid_shape, length)
    a = np.mod(np.asarray(phi, dtype=np.float64), 360.0) / 360.0 * sides
    c0 = np.floor(a).astype(np.int64) % sides
    fc = a - np.floor(a)
    # snap to the vertex when the angle lands on it up to rounding
    snap = np.isclose(fc, 1.0, atol=1e-9)
    c0 = np.where(snap, (c0 + 1) % sides, c0)
    fc = np.where(snap | np.isclose(fc, 0.0, atol=1e-9), 0.0, fc)
    c1 = (c0 + 1) % sides
    idx = np.stack(
        [np.stack([r0, c0], -1), np.stack([r0, c1], -1), np.stack([r1, c0], -1), np.stack([r1, c1], -1)],
        axis=1,
    )
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return idx, w


def attach_markers(pattern: MarkerPattern, undeformed: TriMesh) -> MarkerSet:
    """Anchor ``pattern`` to the inner-wall parameterisation of ``undeformed``."""
    ids = getattr(undeformed, "inner_vertex_ids", None)
    if ids is None or getattr(ids, "ndim", 0) != 2 or undeformed.ring_s is None:
        raise RenderError("mesh has no inner-surface parameterisation")
    rows, slots = np.meshgrid(np.arange(pattern.rows), np.arange(pattern.markers_per_row), indexing="ij")
    s = np.asarray(pattern.stations)[rows].ravel()
    phi = np.asarray(pattern.angular_layout)[slots].ravel()
    return MarkerSet(pattern, rows.ravel(), slots.ravel(), s.astype(np.float64), phi.astype(np.float64),
                     tuple(ids.shape), float(undeformed.length))


def camera_pose(camera: CameraModel, scene: SceneParams | None) -> RigidTransform:
    if scene is None:
        return camera.pose
    delta = RigidTransform(rotation_from_euler_deg(*scene.camera_rotation_deg), scene.camera_translation)
    # the perturbation acts in the camera's own frame
    return camera.pose.compose(delta)


def _segment_hits(origin: np.ndarray, targets: np.ndarray, mesh: TriMesh, margins: np.ndarray) -> np.ndarray:
    """True for targets whose segment from ``origin`` hits an inner-wall triangle first.

    Hits within ``margin`` (a fraction of the segment) of the target are the
    marker's own patch of wall and do not count.
    """
    k = len(targets)
    hit = np.zeros(k, dtype=bool)
    if k == 0 or mesh.is_straight:
        # a segment from inside a straight tube to its wall cannot cross the wall
        return hit
    tris = mesh.inner_triangle_coords
    tmin, tmax = mesh.inner_triangle_bounds
    lo = np.minimum(origin, targets)
    hi = np.maximum(origin, targets)
    overlap = np.all((tmin[None] <= hi[:, None]) & (tmax[None] >= lo[:, None]), axis=-1)
    mi, ti = np.nonzero(overlap)
    if len(mi) == 0:
        return hit
    d = targets[mi] - origin
    v0, v1, v2 = tris[ti, 0], tris[ti, 1], tris[ti, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-12
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    tvec = origin - v0
    u = np.einsum("ij,ij->i", tvec, p) * inv
    q = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    blocked = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9) & (t < 1.0 - margins[mi])
    np.logical_or.at(hit, mi[blocked], True)
    return hit


def inside_inner_tube(point: np.ndarray, mesh: TriMesh) -> bool:
    """Whether ``point`` lies inside the base region of the inner tube."""
    grid = mesh.inner_grid
    centre = grid[0].mean(axis=0)
    ring = grid[0] - centre
    axis = np.cross(ring[0], ring[len(ring) // 4])
    axis /= np.linalg.norm(axis)
    rel = point - centre
    along = float(rel @ axis)
    radial = np.linalg.norm(rel - along * axis)
    return radial < mesh.inner_radius and -mesh.inner_radius <= along < 0.5 * mesh.length


def render_binary(camera: CameraModel, markers: MarkerSet, mesh: TriMesh,
                  scene: SceneParams | None = None) -> BinaryImage:
    """Rasterise the visible markers as filled angular discs (value 1)."""
    size = camera.image_size
    pose = camera_pose(camera, scene)
    if not inside_inner_tube(pose.translation, mesh):
        raise RenderError("camera is outside the inner tube")
    image = np.zeros(size * size, dtype=np.uint8)
    if len(markers) == 0:
        return BinaryImage(image.reshape(size, size))
    fov = camera.fov
    diameter = markers.pattern.marker_diameter
    if scene is not None:
        fov = float(np.clip(fov + scene.camera_fov_delta, 1.0, 179.0 if camera.projection == "pinhole" else 180.0))
        diameter = max(diameter + scene.marker_diameter_delta, 1e-3)
    world = markers.positions(mesh, scene)
    cam = pose.inverse().apply(world)
    rng_ = np.linalg.norm(cam, axis=1)
    alpha = np.arctan2(diameter / 2.0, rng_)
    dirs = cam / np.maximum(rng_, 1e-12)[:, None]
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    if camera.projection == "pinhole":
        in_front = cam[:, 2] > 0
    else:
        in_front = theta <= math.radians(fov) / 2.0 + alpha
    margin = np.clip((diameter / 2.0) / np.maximum(rng_, 1e-12), 1e-6, 0.5)
    occluded = _segment_hits(pose.translation, world, mesh, margin)
    visible = in_front & ~occluded
    if not np.any(visible):
        return BinaryImage(image.reshape(size, size))
    rays, valid = camera.pixel_rays(fov)
    cosines = rays @ dirs[visible].T  # (P, K)
    lit = np.any(cosines >= np.cos(alpha[visible])[None, :], axis=1) & valid
    image[lit] = 1
    # the pixel holding each centre is always set, so sub-pixel markers stay visible
    uv, ok = camera.project(cam[visible], fov)
    col = np.floor(uv[:, 0]).astype(np.int64)
    row = np.floor(uv[:, 1]).astype(np.int64)
    inside = ok & (col >= 0) & (col < size) & (row >= 0) & (row < size)
    image[row[inside] * size + col[inside]] = 1
    return BinaryImage(image.reshape(size, size))


def otsu_threshold(gray: np.ndarray) -> float:
    from skimage.filters import threshold_otsu

    return float(threshold_otsu(gray))


def binarize(gray, threshold="auto") -> BinaryImage:
    """Pixels at or above ``threshold`` become 1; ``"auto"`` uses Otsu's method.

    A constant image under ``"auto"`` has no foreground and maps to zeros.
    """
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2:
        raise RenderError("grayscale images are 2-D")
    if threshold == "auto":
        if g.size == 0 or g.min() == g.max():
            return BinaryImage(np.zeros(g.shape, dtype=np.uint8))
        threshold = otsu_threshold(g)
        # threshold_otsu splits on ``> t``; keep that split under the ``>=`` rule
        return BinaryImage((g > threshold).astype(np.uint8))
    return BinaryImage((g >= float(threshold)).astype(np.uint8))


def image_mse(a: BinaryImage, b: BinaryImage) -> float:
    """Mean squared pixel difference; the mismatched fraction for binary images."""
    pa = a.pixels if isinstance(a, BinaryImage) else np.asarray(a)
    pb = b.pixels if isinstance(b, BinaryImage) else np.asarray(b)
    if pa.shape != pb.shape:
        raise RenderError(f"image dimensions differ: {pa.shape} vs {pb.shape}")
    diff = pa.astype(np.float64) - pb.astype(np.float64)
    return float(np.mean(diff * diff))
