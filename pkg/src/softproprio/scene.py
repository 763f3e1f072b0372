"""The 32-component rendering-scene adjustment vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GLOBAL_FIELDS = (
    "marker_diameter_delta",
    "camera_fov_delta",
    "camera_tx",
    "camera_ty",
    "camera_tz",
    "camera_rx",
    "camera_ry",
    "camera_rz",
)
ROW_FIELDS = ("axial_offset", "angular_offset", "spacing_delta", "radial_depth_delta")
ROW_GROUPS = 6
DIMENSION = len(GLOBAL_FIELDS) + len(ROW_FIELDS) * ROW_GROUPS

# half-widths of the box constraint: mm, deg, mm x3, deg x3 | mm, deg, deg, mm
GLOBAL_BOUNDS = (1.0, 5.0, 2.0, 2.0, 2.0, 5.0, 5.0, 5.0)
ROW_BOUNDS = (2.0, 5.0, 2.0, 0.5)


def half_widths() -> np.ndarray:
    return np.array(GLOBAL_BOUNDS + ROW_BOUNDS * ROW_GROUPS, dtype=np.float64)


def row_group(row: int, n_rows: int) -> int:
    """Row-parameter group for a marker row; patterns with != 6 rows share groups."""
    return min(ROW_GROUPS - 1, row * ROW_GROUPS // max(n_rows, 1))


@dataclass(frozen=True)
class SceneParams:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape != (DIMENSION,):
            raise ValueError(f"scene parameters must have exactly {DIMENSION} components, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("scene parameters must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls) -> "SceneParams":
        return cls(np.zeros(DIMENSION))

    @classmethod
    def clamped(cls, values) -> "SceneParams":
        hw = half_widths()
        return cls(np.clip(np.asarray(values, dtype=np.float64), -hw, hw))

    def within_bounds(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.values) <= half_widths() + tol))

    def __getattr__(self, name):
        if name in GLOBAL_FIELDS:
            return float(self.values[GLOBAL_FIELDS.index(name)])
        raise AttributeError(name)

    def row(self, group: int) -> dict[str, float]:
        base = len(GLOBAL_FIELDS) + len(ROW_FIELDS) * group
        return {k: float(self.values[base + i]) for i, k in enumerate(ROW_FIELDS)}

    @property
    def camera_translation(self) -> np.ndarray:
        return self.values[2:5].copy()

    @property
    def camera_rotation_deg(self) -> np.ndarray:
        return self.values[5:8].copy()

    def to_list(self) -> list[float]:
        return [float(v) for v in self.values]
