"""Rigid alignment: closed-form Kabsch, point-to-point ICP and two-view merging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import GeometryError, PointCloud, RigidTransform, SpatialIndex, as_points


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tolerance: float = 1e-8  # mm, on the change of RMS between iterations
    trim_fraction: float = 0.0
    merge_radius: float = 0.25  # mm
    max_rms: float = 1.0  # mm; merges above this are rejected as non-overlapping
    # pairs farther apart than this are dropped before trimming (partial-overlap views)
    max_correspondence: float = math.inf

    def __post_init__(self):
        if self.max_iterations < 1:
            raise RegistrationError("max_iterations must be at least 1")
        if not self.tolerance >= 0:
            raise RegistrationError("tolerance must be non-negative")
        if not 0 <= self.trim_fraction < 0.5:
            raise RegistrationError("trim fraction must lie in [0, 0.5)")
        if not (self.merge_radius > 0 and self.max_rms > 0 and self.max_correspondence > 0):
            raise RegistrationError("merge radius, rms ceiling and correspondence distance must be positive")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    rms: float
    iterations: int
    rms_history: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.transform.rotation.reshape(-1)],
            "translation": [float(v) for v in self.transform.translation],
            "rms": float(self.rms),
            "iterations": int(self.iterations),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def kabsch(source, target) -> RigidTransform:
    """Least-squares rigid transform taking paired ``source`` points onto ``target``."""
    src = as_points(getattr(source, "points", source))
    dst = as_points(getattr(target, "points", target))
    if src.shape != dst.shape:
        raise RegistrationError(f"paired sets differ in size: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise RegistrationError("kabsch needs at least 3 point pairs")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    sv = np.linalg.svd(a / scale, compute_uv=False)
    if sv.size < 2 or sv[1] <= 1e-10 * max(sv[0], 1e-300):
        raise RegistrationError("point pairs are collinear; rotation is undetermined")
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    fix = np.diag([1.0, 1.0, 1.0 if d >= 0 else -1.0])
    rot = vt.T @ fix @ u.T
    # re-orthonormalise to keep RigidTransform's validation happy after round-off
    uu, _, vv = np.linalg.svd(rot)
    rot = uu @ vv
    return RigidTransform(rot, mu_d - rot @ mu_s)


def _trimmed(dist: np.ndarray, fraction: float) -> np.ndarray:
    keep = len(dist) - int(math.floor(fraction * len(dist)))
    if fraction == 0 or keep >= len(dist):
        return np.arange(len(dist))
    return np.argsort(dist, kind="stable")[:keep]


def _select(dist: np.ndarray, config: IcpConfig, trim: float) -> np.ndarray:
    near = np.flatnonzero(dist <= config.max_correspondence)
    if len(near) < 3:
        raise RegistrationError(
            f"insufficient overlap: {len(near)} correspondences within {config.max_correspondence} mm"
        )
    return near[_trimmed(dist[near], trim)]


def _iterate(src, dst, index, total, config: IcpConfig, trim: float, budget: int):
    moved = total.apply(src)
    history: list[float] = []
    prev = math.inf
    iterations = 0
    for iterations in range(1, budget + 1):
        idx, dist = index.query(moved)
        keep = _select(dist, config, trim)
        rms = float(np.sqrt(np.mean(dist[keep] ** 2)))
        history.append(rms)
        if rms < 1e-12 or abs(prev - rms) <= config.tolerance:
            break
        prev = rms
        step = kabsch(moved[keep], dst[idx[keep]])
        total = step.compose(total)
        moved = total.apply(src)
    else:
        idx, dist = index.query(moved)
        keep = _select(dist, config, trim)
        history.append(float(np.sqrt(np.mean(dist[keep] ** 2))))
    return total, history, iterations


def icp(source, target, config: IcpConfig | None = None, init: RigidTransform | None = None) -> IcpResult:
    """Align ``source`` onto ``target``; returns the accumulated transform.

    With trimming on, an untrimmed pass first brings the clouds into the
    basin of the true alignment (trimming from a large offset tends to drop
    the genuine pairs), then the trimmed pass refines.  The two passes
    share ``max_iterations``.
    """
    config = config or IcpConfig()
    src = as_points(getattr(source, "points", source))
    dst = as_points(getattr(target, "points", target))
    if len(src) < 3 or len(dst) < 3:
        raise RegistrationError("icp needs at least 3 points in each cloud")
    index = SpatialIndex(dst)
    total = init or RigidTransform()
    history: list[float] = []
    iterations = 0
    budget = config.max_iterations
    if config.trim_fraction > 0 and budget > 1:
        total, history, iterations = _iterate(src, dst, index, total, config, 0.0, budget // 2)
        budget -= iterations
    total, tail, more = _iterate(src, dst, index, total, config, config.trim_fraction, budget)
    return IcpResult(total, tail[-1], iterations + more, tuple(history + tail))


def collapse_duplicates(points: np.ndarray, radius: float) -> np.ndarray:
    """Replace each cluster of points closer than ``radius`` with its centroid.

    Clusters are connected components of the ``radius`` neighbour graph.
    """
    pts = as_points(points)
    if len(pts) == 0:
        return pts
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return pts.copy()
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(pts), len(pts)))
    n_labels, labels = connected_components(graph, directed=False)
    sums = np.zeros((n_labels, 3))
    np.add.at(sums, labels, pts)
    counts = np.bincount(labels, minlength=n_labels)[:, None]
    # keep first-appearance order of clusters
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first, kind="stable")
    return (sums / counts)[order]


def merge_views(a, b, config: IcpConfig | None = None, init: RigidTransform | None = None) -> tuple[PointCloud, IcpResult]:
    """Align ``b`` to ``a`` with ICP, concatenate, and collapse near-duplicates.

    Raises when the alignment RMS exceeds ``config.max_rms`` (the views do
    not overlap enough to register).
    """
    config = config or IcpConfig()
    pa = as_points(getattr(a, "points", a))
    pb = as_points(getattr(b, "points", b))
    try:
        result = icp(pb, pa, config, init)
    except GeometryError as exc:
        raise RegistrationError(f"insufficient overlap: {exc}") from exc
    if result.rms > config.max_rms:
        raise RegistrationError(f"insufficient overlap: alignment rms {result.rms:.3f} mm exceeds {config.max_rms} mm")
    merged = collapse_duplicates(np.vstack([pa, result.transform.apply(pb)]), config.merge_radius)
    frame = a.frame_id if isinstance(a, PointCloud) else None
    return PointCloud(merged, frame), result
