"""Quasi-static bending model of the pneumatic actuator.

The actuator is a thick-walled tube whose backbone is split into ``S``
segments of constant curvature.  Curvature follows a moment balance
(``kappa = M / (E I)``) from the chamber actuation moment and an external tip
force; contact with a wall is resolved by shrinking curvature until the
backbone no longer crosses it.  The inner and outer walls are swept along the
resulting frames to give a triangle mesh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .geometry import PointCloud, downsample

FORCE_DIRECTIONS = {
    "none": (0.0, 0.0, 0.0),
    "forward": (1.0, 0.0, 0.0),
    "backward": (-1.0, 0.0, 0.0),
    "left": (0.0, 1.0, 0.0),
    "right": (0.0, -1.0, 0.0),
}


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class ActuatorSpec:
    length: float = 100.0
    outer_radius: float = 12.0
    wall_thickness: float = 3.0
    # > 0 puts the strain-limiting layer on +x, so inflation bends toward +x
    strain_limit_offset: float = 1.5
    youngs_modulus: float = 100.0  # kPa, i.e. mN / mm^2
    segments: int = 64
    cross_section_sides: int = 32
    # actuation volume (cm^3) that bends the nominal actuator by a right angle
    full_bend_volume: float = 30.0

    def __post_init__(self):
        if not self.length > 0:
            raise SimulationError("length must be positive")
        if not 0 < self.wall_thickness < self.outer_radius:
            raise SimulationError("wall thickness must lie in (0, outer_radius)")
        if not self.youngs_modulus > 0:
            raise SimulationError("Young's modulus must be positive")
        if self.segments < 8:
            raise SimulationError("need at least 8 backbone segments")
        if self.cross_section_sides < 3:
            raise SimulationError("need at least 3 cross-section sides")
        if self.strain_limit_offset == 0:
            raise SimulationError("strain_limit_offset must be non-zero")

    @property
    def inner_radius(self) -> float:
        return self.outer_radius - self.wall_thickness

    @property
    def second_moment(self) -> float:
        """Area moment of the annular cross-section, mm^4."""
        return math.pi / 4.0 * (self.outer_radius**4 - self.inner_radius**4)

    @property
    def ds(self) -> float:
        return self.length / self.segments

    @property
    def bending_stiffness(self) -> float:
        return self.youngs_modulus * self.second_moment

    @property
    def actuation_gain(self) -> float:
        """Moment per unit actuation volume, mN*mm / cm^3."""
        return (math.pi / 2.0) * self.bending_stiffness / (self.length * self.full_bend_volume)

    @property
    def bend_direction(self) -> np.ndarray:
        return np.array([math.copysign(1.0, self.strain_limit_offset), 0.0])


@dataclass(frozen=True)
class ContactPlane:
    """Rigid wall ``{p : normal . p = offset}``; the actuator lives on ``normal . p <= offset``."""

    normal: tuple[float, float, float]
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0:
            raise SimulationError("contact plane normal must be non-zero")
        object.__setattr__(self, "normal", tuple(float(v) for v in n / norm))

    def penetration(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ np.asarray(self.normal) - self.offset


@dataclass(frozen=True)
class LoadCase:
    actuation_volume: float = 0.0
    external_force: tuple[float, float, float] = (0.0, 0.0, 0.0)
    contact_plane: ContactPlane | None = None
    modulus_scale: float = 1.0
    scenario: int = 0
    force_direction: str = "none"

    def validate(self, spec: ActuatorSpec) -> None:
        if not self.actuation_volume >= 0:
            raise SimulationError("actuation volume must be non-negative")
        if not self.modulus_scale > 0:
            raise SimulationError("modulus scale must be positive")
        if not np.all(np.isfinite(self.external_force)):
            raise SimulationError("external force must be finite")
        if self.contact_plane is not None:
            # base cross-section is the disc of outer radius in the z = 0 plane
            n = np.asarray(self.contact_plane.normal)
            reach = spec.outer_radius * math.hypot(n[0], n[1])
            if self.contact_plane.offset <= reach:
                raise SimulationError("contact plane intersects the base cross-section")

    def to_dict(self) -> dict:
        plane = None
        if self.contact_plane is not None:
            plane = {"normal": list(self.contact_plane.normal), "offset": self.contact_plane.offset}
        return {
            "actuation_volume": self.actuation_volume,
            "external_force": list(self.external_force),
            "contact_plane": plane,
            "modulus_scale": self.modulus_scale,
            "scenario": self.scenario,
            "force_direction": self.force_direction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoadCase":
        plane = d.get("contact_plane")
        return cls(
            actuation_volume=float(d["actuation_volume"]),
            external_force=tuple(float(v) for v in d["external_force"]),
            contact_plane=None if plane is None else ContactPlane(tuple(plane["normal"]), float(plane["offset"])),
            modulus_scale=float(d["modulus_scale"]),
            scenario=int(d.get("scenario", 0)),
            force_direction=d.get("force_direction", "none"),
        )


@dataclass(frozen=True)
class BackboneState:
    curvature: np.ndarray  # (S, 2): bending toward local +x and +y, 1/mm
    ds: float

    def __post_init__(self):
        k = np.asarray(self.curvature, dtype=np.float64).reshape(-1, 2)
        k.setflags(write=False)
        object.__setattr__(self, "curvature", k)

    @property
    def segments(self) -> int:
        return self.curvature.shape[0]


def _check_validity(kappa: np.ndarray, ds: float) -> None:
    bend = np.linalg.norm(kappa, axis=1) * ds
    if np.any(bend >= math.pi / 4):
        raise SimulationError(
            f"deformation exceeds model validity (segment bend {bend.max():.3f} rad >= pi/4)"
        )


def solve_backbone(spec: ActuatorSpec, load: LoadCase) -> BackboneState:
    """Curvature per segment from superposed actuation and tip-force moments."""
    load.validate(spec)
    S = spec.segments
    ds = spec.ds
    ei = spec.bending_stiffness * load.modulus_scale
    s_mid = (np.arange(S) + 0.5) * ds

    moment = np.zeros((S, 2))
    moment += spec.actuation_gain * load.actuation_volume * spec.bend_direction
    force = np.asarray(load.external_force, dtype=np.float64)
    # lateral force bends the tube toward the force direction with a lever arm L - s
    moment += np.outer(spec.length - s_mid, force[:2])
    kappa = moment / ei
    _check_validity(kappa, ds)
    state = BackboneState(kappa, ds)
    if load.contact_plane is not None:
        state = apply_contact(state, spec, load.contact_plane)
    return state


def backbone_points(state: BackboneState) -> np.ndarray:
    origins, _ = _integrate(state.curvature, state.ds)
    return origins


def _integrate(kappa: np.ndarray, ds: float) -> tuple[np.ndarray, np.ndarray]:
    S = kappa.shape[0]
    origins = np.zeros((S + 1, 3))
    frames = np.zeros((S + 1, 3, 3))
    frames[0] = np.eye(3)
    if not np.any(kappa):
        # straight tube: exact stations instead of an accumulated sum
        origins[:, 2] = np.arange(S + 1) * ds
        frames[:] = np.eye(3)
        return origins, frames
    pos = np.zeros(3)
    rot = np.eye(3)
    for i in range(S):
        kx, ky = kappa[i]
        k = math.hypot(kx, ky)
        if k == 0.0:
            step = np.array([0.0, 0.0, ds])
            seg_rot = np.eye(3)
        else:
            ux, uy = kx / k, ky / k
            phi = k * ds
            step = np.array([ux * (1 - math.cos(phi)) / k, uy * (1 - math.cos(phi)) / k, math.sin(phi) / k])
            # rotation about the in-plane axis perpendicular to the bend direction
            c, s = math.cos(phi), math.sin(phi)
            axis = np.array([-uy, ux, 0.0])
            kmat = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            seg_rot = np.eye(3) + s * kmat + (1 - c) * (kmat @ kmat)
        pos = pos + rot @ step
        rot = rot @ seg_rot
        origins[i + 1] = pos
        frames[i + 1] = rot
    return origins, frames


def backbone_to_frames(state: BackboneState) -> list[tuple[np.ndarray, np.ndarray]]:
    """Integrate positions and orientations along the backbone.

    Returns ``S + 1`` ``(origin, rotation)`` pairs; the rotation's columns
    are the local x, y and tangent axes.
    """
    origins, frames = _integrate(state.curvature, state.ds)
    return [(origins[i], frames[i]) for i in range(len(origins))]


def apply_contact(
    state: BackboneState, spec: ActuatorSpec, plane: ContactPlane, tol: float = 0.1, max_iter: int = 500
) -> BackboneState:
    """Shrink curvature until no backbone point penetrates ``plane`` by more than ``tol``.

    Each iteration scales by 0.9 the curvature of the distal segments, starting
    from the one feeding the first penetrating backbone point.  When a step
    stops reducing the penetration by at least 1% the window grows one segment
    toward the base.  Steps that would increase penetration are rejected.
    """
    kappa = np.array(state.curvature)
    ds = state.ds
    pen = plane.penetration(backbone_points(state))
    worst = float(pen.max())
    if worst <= tol:
        return state
    start = max(0, int(np.argmax(pen > tol)) - 1)
    for _ in range(max_iter):
        trial = kappa.copy()
        trial[start:] *= 0.9
        trial_worst = float(plane.penetration(_integrate(trial, ds)[0]).max())
        stalled = trial_worst > worst - 0.01 * worst
        if trial_worst <= worst:
            kappa, worst = trial, trial_worst
            if worst <= tol:
                return BackboneState(kappa, ds)
        if stalled and start > 0:
            start -= 1
    raise SimulationError(f"contact resolution did not converge: residual penetration {worst:.4f} mm")


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    inner_vertex_ids: np.ndarray  # (S + 1, sides) grid: row = backbone station, col = angle
    outer_vertex_ids: np.ndarray
    inner_triangles: np.ndarray  # indices into ``triangles``
    outer_triangles: np.ndarray
    ring_s: np.ndarray  # arc-length coordinate of each grid row, mm
    sides: int
    inner_radius: float
    outer_radius: float

    @property
    def inner_grid(self) -> np.ndarray:
        return self.vertices[self.inner_vertex_ids]

    @property
    def outer_vertices(self) -> np.ndarray:
        ids = np.unique(self.triangles[self.outer_triangles])
        return self.vertices[ids]

    @property
    def length(self) -> float:
        return float(self.ring_s[-1])

    @cached_property
    def inner_triangle_coords(self) -> np.ndarray:
        return self.vertices[self.triangles[self.inner_triangles]]

    @cached_property
    def inner_triangle_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        tris = self.inner_triangle_coords
        return tris.min(axis=1), tris.max(axis=1)

    @cached_property
    def is_straight(self) -> bool:
        """True when the inner wall is an undeformed (convex) cylinder."""
        centres = self.inner_grid.mean(axis=1)
        axis = centres[-1] - centres[0]
        axis = axis / np.linalg.norm(axis)
        rel = centres - centres[0]
        off_axis = rel - np.outer(rel @ axis, axis)
        return bool(np.max(np.linalg.norm(off_axis, axis=1)) < 1e-9 * max(self.length, 1.0))

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return replace(self, vertices=np.asarray(vertices, dtype=np.float64))


def _ring_angles(sides: int) -> np.ndarray:
    return 2.0 * math.pi * np.arange(sides) / sides


def _tube_triangles(ids: np.ndarray, outward: bool) -> np.ndarray:
    rows, sides = ids.shape
    a = ids[:-1, :]
    b = ids[:-1, np.r_[1:sides, 0]]
    c = ids[1:, :]
    d = ids[1:, np.r_[1:sides, 0]]
    if outward:
        t1 = np.stack([a, b, d], axis=-1)
        t2 = np.stack([a, d, c], axis=-1)
    else:
        t1 = np.stack([a, d, b], axis=-1)
        t2 = np.stack([a, c, d], axis=-1)
    return np.concatenate([t1.reshape(-1, 3), t2.reshape(-1, 3)])


def sweep_surface(spec: ActuatorSpec, frames) -> TriMesh:
    """Sweep the inner and outer circular walls along the backbone frames.

    Vertex layout: inner grid ``(S+1) * sides``, outer grid ``(S+1) * sides``,
    then the two outer-cap centres.  Faces are ordered inner then outer
    (tube and caps) so each surface is one contiguous block.
    """
    if len(frames) < 2:
        raise SimulationError("need at least two frames to sweep a surface")
    origins = np.array([np.asarray(o, dtype=np.float64) for o, _ in frames])
    rots = np.array([np.asarray(r, dtype=np.float64) for _, r in frames])
    if not (np.all(np.isfinite(origins)) and np.all(np.isfinite(rots))):
        raise SimulationError("degenerate frames: non-finite values")
    dets = np.linalg.det(rots)
    if np.any(np.abs(dets - 1.0) > 1e-6) or np.any(np.linalg.norm(np.diff(origins, axis=0), axis=1) == 0):
        raise SimulationError("degenerate frames: rotations must be proper and stations distinct")

    sides = spec.cross_section_sides
    ang = _ring_angles(sides)
    ring = np.stack([np.cos(ang), np.sin(ang), np.zeros(sides)], axis=1)  # (sides, 3)
    # (rows, sides, 3) = origin + R @ ring * radius
    local = np.einsum("rij,sj->rsi", rots, ring)
    inner = origins[:, None, :] + spec.inner_radius * local
    outer = origins[:, None, :] + spec.outer_radius * local
    rows = len(origins)
    n_grid = rows * sides
    inner_ids = np.arange(n_grid).reshape(rows, sides)
    outer_ids = n_grid + inner_ids
    base_center = 2 * n_grid
    tip_center = base_center + 1
    vertices = np.concatenate([inner.reshape(-1, 3), outer.reshape(-1, 3), origins[[0, -1]]])

    inner_tris = _tube_triangles(inner_ids, outward=False)
    outer_tris = _tube_triangles(outer_ids, outward=True)
    nxt = np.r_[1:sides, 0]
    base_cap = np.stack([np.full(sides, base_center), outer_ids[0, nxt], outer_ids[0]], axis=1)
    tip_cap = np.stack([np.full(sides, tip_center), outer_ids[-1], outer_ids[-1, nxt]], axis=1)
    triangles = np.concatenate([inner_tris, outer_tris, base_cap, tip_cap]).astype(np.int64)
    n_in = len(inner_tris)
    # arc-length parameter (not chord sum) so anchors keep their stations under deformation
    ring_s = np.arange(rows) * (spec.length / (rows - 1))
    return TriMesh(
        vertices=vertices,
        triangles=triangles,
        inner_vertex_ids=inner_ids,
        outer_vertex_ids=outer_ids,
        inner_triangles=np.arange(n_in),
        outer_triangles=np.arange(n_in, len(triangles)),
        ring_s=ring_s,
        sides=sides,
        inner_radius=spec.inner_radius,
        outer_radius=spec.outer_radius,
    )


def expected_vertex_count(spec: ActuatorSpec) -> int:
    return 2 * (spec.segments + 1) * spec.cross_section_sides + 2


def surface_cloud(mesh: TriMesh, n: int, seed: int | None = 0) -> PointCloud:
    """Outer-surface vertices downsampled by farthest-point sampling."""
    return downsample(PointCloud(mesh.outer_vertices), n, seed)


def simulate(spec: ActuatorSpec, load: LoadCase) -> TriMesh:
    return sweep_surface(spec, backbone_to_frames(solve_backbone(spec, load)))


def undeformed_mesh(spec: ActuatorSpec) -> TriMesh:
    return simulate(spec, LoadCase())


@dataclass(frozen=True)
class ScenarioConfig:
    n_scenarios: int = 50
    frames_per_scenario: int = 20
    v_max: float = 30.0  # cm^3
    volume_step: float = 5.0
    volume_jitter: float = 2.5
    modulus_range: tuple[float, float] = (0.7, 1.3)
    force_max: float = 40.0  # mN
    force_directions: tuple[str, ...] = ("forward", "backward", "left", "right", "none")
    p_contact: float = 0.3
    contact_offset_range: tuple[float, float] = (25.0, 70.0)
    contact_tilt_deg: float = 30.0

    def validate(self) -> None:
        lo, hi = self.modulus_range
        if self.n_scenarios < 1 or self.frames_per_scenario < 1:
            raise SimulationError("scenario and frame counts must be positive")
        if not (0 < lo < hi):
            raise SimulationError("modulus range must satisfy 0 < low < high")
        if not (self.v_max > 0 and self.volume_step > 0 and self.volume_jitter >= 0):
            raise SimulationError("actuation range must be positive")
        if self.force_max < 0 or not 0 <= self.p_contact <= 1:
            raise SimulationError("force magnitude and contact probability out of range")
        if not self.force_directions or any(d not in FORCE_DIRECTIONS for d in self.force_directions):
            raise SimulationError(f"force directions must be drawn from {sorted(FORCE_DIRECTIONS)}")
        c_lo, c_hi = self.contact_offset_range
        if not (0 < c_lo <= c_hi):
            raise SimulationError("contact offset range must be positive and ordered")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        kw = dict(d)
        for key in ("modulus_range", "contact_offset_range", "force_directions"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def sample_scenarios(config: ScenarioConfig, seed: int) -> list[LoadCase]:
    """Randomised load cases, grouped by scenario.

    A scenario fixes the modulus draw, force direction and optional contact
    wall; its frames sweep the actuation volume in ``volume_step`` increments
    with jitter and draw the tip-force magnitude per frame.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    lo, hi = config.modulus_range
    levels = int(math.floor(config.v_max / config.volume_step))
    cases: list[LoadCase] = []
    for sid in range(config.n_scenarios):
        modulus = float(rng.uniform(lo, hi))
        direction = config.force_directions[int(rng.integers(len(config.force_directions)))]
        plane = None
        if rng.random() < config.p_contact:
            tilt = math.radians(float(rng.uniform(-config.contact_tilt_deg, config.contact_tilt_deg)))
            offset = float(rng.uniform(*config.contact_offset_range))
            plane = ContactPlane((math.cos(tilt), math.sin(tilt), 0.0), offset)
        volumes = config.volume_step * rng.integers(0, levels + 1, size=config.frames_per_scenario)
        volumes = volumes + rng.uniform(-config.volume_jitter, config.volume_jitter, size=volumes.shape)
        volumes = np.sort(np.clip(volumes, 0.0, config.v_max))
        magnitudes = rng.uniform(0.0, config.force_max, size=config.frames_per_scenario)
        unit = np.asarray(FORCE_DIRECTIONS[direction])
        for v, f in zip(volumes, magnitudes):
            cases.append(
                LoadCase(
                    actuation_volume=float(v),
                    external_force=tuple(float(c) for c in unit * f),
                    contact_plane=plane,
                    modulus_scale=modulus,
                    scenario=sid,
                    force_direction=direction,
                )
            )
    return cases
