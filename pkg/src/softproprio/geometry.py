"""Point-cloud primitives, nearest-neighbour indexing and shape metrics.

All coordinates are millimetres in a right-handed frame with +z along the
undeformed actuator axis and the camera at the base (z = 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


def as_points(points) -> np.ndarray:
    """Validate and return an ``(N, 3)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"expected an (N, 3) array of points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("point coordinates must be finite")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        return np.eye(3)
    k = axis / norm
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def rotation_from_euler_deg(rx: float, ry: float, rz: float) -> np.ndarray:
    """Intrinsic x-y-z rotation from angles in degrees."""
    return (
        rotation_about_axis([1, 0, 0], math.radians(rx))
        @ rotation_about_axis([0, 1, 0], math.radians(ry))
        @ rotation_about_axis([0, 0, 1], math.radians(rz))
    )


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame_id: int | None = None

    def __post_init__(self):
        pts = as_points(self.points)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, transform: RigidTransform) -> "PointCloud":
        return PointCloud(transform.apply(self.points), self.frame_id)

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + np.asarray(offset, dtype=np.float64), self.frame_id)


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        pts = cloud.points
    else:
        pts = as_points(cloud)
    if pts.shape[0] == 0:
        raise GeometryError("empty point cloud")
    return pts


class SpatialIndex:
    """Exact nearest-neighbour queries over a fixed point set (k-d tree)."""

    def __init__(self, cloud):
        self._points = _coords(cloud).copy()
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return self._points.shape[0]

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)`` of the nearest indexed point per query."""
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        dist, idx = self._tree.query(q, k=1)
        idx = np.asarray(idx, dtype=np.int64)
        dist = np.asarray(dist, dtype=np.float64)
        if single:
            return idx[0], dist[0]
        return idx, dist


def build_index(cloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def downsample(cloud, n: int, seed: int | None = 0) -> PointCloud:
    """Farthest-point sampling of ``n`` points.

    The start point is drawn from ``np.random.default_rng(seed)``; if ``n``
    is not smaller than the cloud the cloud is returned unchanged.
    """
    if n < 1:
        raise GeometryError("downsample size must be at least 1")
    frame_id = cloud.frame_id if isinstance(cloud, PointCloud) else None
    pts = _coords(cloud)
    if n >= pts.shape[0]:
        return cloud if isinstance(cloud, PointCloud) else PointCloud(pts)
    idx = farthest_point_indices(pts, n, seed)
    return PointCloud(pts[idx], frame_id)


def farthest_point_indices(points: np.ndarray, n: int, seed: int | None = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    count = points.shape[0]
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = rng.integers(count)
    nearest = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for i in range(1, n):
        # argmax picks the lowest index on ties, which keeps runs reproducible
        nxt = int(np.argmax(nearest))
        chosen[i] = nxt
        np.minimum(nearest, np.sum((points - points[nxt]) ** 2, axis=1), out=nearest)
    return chosen


def nearest_distances(queries, targets) -> np.ndarray:
    """Euclidean distance from each query point to its nearest target point."""
    _, dist = SpatialIndex(targets).query(_coords(queries))
    return dist


def chamfer_unidirectional(observed, predicted) -> float:
    """Mean distance (mm) from each observed point to the nearest predicted point."""
    return float(np.mean(nearest_distances(observed, predicted)))


def chamfer_bidirectional(a, b) -> float:
    return 0.5 * (chamfer_unidirectional(a, b) + chamfer_unidirectional(b, a))


def tip_count(n_points: int, fraction: float = 0.005) -> int:
    return max(1, math.ceil(fraction * n_points))


def tip_position(cloud, base_axis=(0.0, 0.0, 1.0), fraction: float = 0.005) -> np.ndarray:
    """Centroid of the most distal points along ``base_axis``.

    The top ``max(1, ceil(fraction * N))`` points by projection onto the
    undeformed axis are averaged, which damps single-point sensor noise.
    """
    axis = np.asarray(base_axis, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(axis)
    if not np.isfinite(norm) or norm == 0.0:
        raise GeometryError("base axis must be non-zero")
    pts = _coords(cloud)
    k = tip_count(pts.shape[0], fraction)
    proj = pts @ (axis / norm)
    # stable sort so ties resolve by point order
    top = np.argsort(-proj, kind="stable")[:k]
    return pts[top].mean(axis=0)


def tip_mae(pred, obs, base_axis=(0.0, 0.0, 1.0)) -> float:
    """Tip error in mm for one frame, or the mean over frames for sequences."""
    if isinstance(pred, (list, tuple)) and isinstance(obs, (list, tuple)):
        if len(pred) != len(obs) or not pred:
            raise GeometryError("batch tip error needs equally many, non-zero frames")
        return float(np.mean([tip_mae(p, o, base_axis) for p, o in zip(pred, obs)]))
    return float(np.linalg.norm(tip_position(pred, base_axis) - tip_position(obs, base_axis)))
