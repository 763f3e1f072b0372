"""On-disk (image, cloud) datasets, manifests and deterministic splits.

Layout::

    out_dir/manifest.json
    out_dir/images/NNNNNN.pgm
    out_dir/clouds/NNNNNN.ply
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .formats import FormatError, ensure_dir, read_ply, read_pgm, write_pgm, write_ply
from .geometry import PointCloud
from .renderer import BinaryImage, CameraModel, attach_markers, make_pattern, render_binary
from .scene import SceneParams
from .simulator import ActuatorSpec, LoadCase, ScenarioConfig, sample_scenarios, simulate, surface_cloud, undeformed_mesh


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    projection: str = "fisheye"
    fov: float = 160.0
    image_size: int = 256
    marker_diameter: float = 4.0
    cloud_points: int = 3174
    scene: tuple[float, ...] | None = None  # optional 32-vector applied when rendering

    def camera(self) -> CameraModel:
        return CameraModel(self.projection, self.fov, self.image_size)

    def scene_params(self) -> SceneParams | None:
        return None if self.scene is None else SceneParams(np.asarray(self.scene, dtype=np.float64))

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        kw = dict(d)
        if kw.get("scene") is not None:
            kw["scene"] = tuple(float(v) for v in kw["scene"])
        return cls(**kw)


def config_hash(spec: ActuatorSpec, scenarios: ScenarioConfig, render: RenderConfig, pattern: str, seed: int) -> str:
    payload = {
        "actuator": asdict(spec),
        "scenarios": asdict(scenarios),
        "render": asdict(render),
        "pattern": pattern,
        "seed": seed,
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class Sample:
    frame_id: int
    scenario_id: int
    image: str  # relative to the manifest directory
    cloud: str
    load: LoadCase

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "scenario_id": self.scenario_id,
            "image": self.image,
            "cloud": self.cloud,
            "load": self.load.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        return cls(int(d["frame_id"]), int(d["scenario_id"]), d["image"], d["cloud"], LoadCase.from_dict(d["load"]))


@dataclass
class Manifest:
    config_hash: str
    pattern: str
    seed: int
    scenarios: list[dict]
    samples: list[Sample]
    config: dict = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [s.frame_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest frame ids are not unique")
        self._by_id = {s.frame_id: s for s in self.samples}

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def frame_ids(self) -> list[int]:
        return [s.frame_id for s in self.samples]

    def sample(self, frame_id: int) -> Sample:
        try:
            return self._by_id[int(frame_id)]
        except KeyError:
            raise DatasetError(f"frame {frame_id} is not in the manifest") from None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "pattern": self.pattern,
            "seed": self.seed,
            "config": self.config,
            "scenarios": self.scenarios,
            "samples": [s.to_dict() for s in self.samples],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid manifest JSON at byte {exc.pos}: {exc.msg}") from exc
        samples = [Sample.from_dict(s) for s in d["samples"]]
        return cls(d["config_hash"], d["pattern"], int(d["seed"]), d["scenarios"], samples,
                   d.get("config", {}), path.parent)


# generation -----------------------------------------------------------------
_WORKER: dict = {}


def _setup(spec: ActuatorSpec, render: RenderConfig, pattern: str):
    base = undeformed_mesh(spec)
    markers = attach_markers(make_pattern(pattern, spec.length, marker_diameter=render.marker_diameter), base)
    return spec, render, markers, render.camera(), render.scene_params()


def _init_worker(spec, render, pattern):
    _WORKER["ctx"] = _setup(spec, render, pattern)


def _make_frame(ctx, frame_id: int, load: LoadCase):
    spec, render, markers, camera, scene = ctx
    try:
        mesh = simulate(spec, load)
        image = render_binary(camera, markers, mesh, scene)
        cloud = surface_cloud(mesh, render.cloud_points, seed=0)
    except ValueError as exc:
        raise DatasetError(f"scenario {load.scenario} frame {frame_id}: {exc}") from exc
    return image.pixels, cloud.points


def _worker_frame(args):
    return _make_frame(_WORKER["ctx"], *args)


def render_frames(spec: ActuatorSpec, render: RenderConfig, pattern: str, loads: list[LoadCase], jobs: int = 1):
    """Simulate and render each load case; yields ``(pixels, cloud points)`` in order."""
    tasks = list(enumerate(loads))
    if jobs <= 1:
        ctx = _setup(spec, render, pattern)
        for fid, load in tasks:
            yield _make_frame(ctx, fid, load)
        return
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(spec, render, pattern)) as pool:
        yield from pool.map(_worker_frame, tasks, chunksize=8)


def generate_dataset(spec: ActuatorSpec, scenarios: ScenarioConfig, render: RenderConfig, pattern: str,
                     seed: int, out_dir, jobs: int = 1) -> Manifest:
    """Sample load cases, then simulate, render and store every frame."""
    out = Path(out_dir)
    ensure_dir(out / "images")
    ensure_dir(out / "clouds")
    loads = sample_scenarios(scenarios, seed)
    samples = []
    for fid, (pixels, points) in enumerate(render_frames(spec, render, pattern, loads, jobs)):
        name = f"{fid:06d}"
        write_pgm(out / "images" / f"{name}.pgm", pixels)
        write_ply(out / "clouds" / f"{name}.ply", points)
        samples.append(Sample(fid, loads[fid].scenario, f"images/{name}.pgm", f"clouds/{name}.ply", loads[fid]))
    scen = []
    for sid in sorted({s.scenario_id for s in samples}):
        first = next(s.load for s in samples if s.scenario_id == sid)
        scen.append({
            "scenario_id": sid,
            "modulus_scale": first.modulus_scale,
            "force_direction": first.force_direction,
            "contact_plane": None if first.contact_plane is None else first.to_dict()["contact_plane"],
        })
    # normalised through JSON so a reloaded manifest compares equal
    config = json.loads(json.dumps({"actuator": asdict(spec), "scenarios": asdict(scenarios),
                                    "render": asdict(render)}))
    manifest = Manifest(config_hash(spec, scenarios, render, pattern, seed), pattern, seed, scen, samples,
                        config, out)
    manifest.save(out / "manifest.json")
    return manifest


# access ---------------------------------------------------------------------
def split(manifest: Manifest, train_fraction: float = 0.8, seed: int = 0) -> tuple[list[int], list[int]]:
    """Seeded shuffle then prefix split; the train side gets ``floor(fraction * n)``."""
    if not 0 < train_fraction < 1:
        raise DatasetError("train fraction must lie strictly between 0 and 1")
    ids = np.asarray(manifest.frame_ids if isinstance(manifest, Manifest) else list(manifest))
    order = np.random.default_rng(seed).permutation(len(ids))
    # small epsilon keeps exact products such as 0.5 * 10 from rounding down
    n_train = int(np.floor(train_fraction * len(ids) + 1e-9))
    shuffled = [int(i) for i in ids[order]]
    return shuffled[:n_train], shuffled[n_train:]


def _root(manifest: Manifest) -> Path:
    if manifest.root is None:
        raise DatasetError("manifest has no root directory")
    return manifest.root


def read_sample(manifest: Manifest, frame_id: int) -> tuple[BinaryImage, PointCloud, LoadCase]:
    sample = manifest.sample(frame_id)
    root = _root(manifest)
    for rel in (sample.image, sample.cloud):
        if not (root / rel).is_file():
            raise DatasetError(f"{root / rel}: file not found")
    image = BinaryImage((read_pgm(root / sample.image) >= 128).astype(np.uint8))
    cloud = PointCloud(read_ply(root / sample.cloud), frame_id=sample.frame_id)
    return image, cloud, sample.load


def load_arrays(manifest: Manifest, frame_ids) -> tuple[np.ndarray, np.ndarray]:
    """Stack images ``(B, H, W)`` uint8 and clouds ``(B, M, 3)`` float64."""
    images, clouds = [], []
    for fid in frame_ids:
        img, cloud, _ = read_sample(manifest, fid)
        images.append(img.pixels)
        clouds.append(cloud.points)
    if not images:
        raise DatasetError("no frames requested")
    try:
        return np.stack(images), np.stack(clouds)
    except ValueError as exc:
        raise DatasetError(f"frames have inconsistent shapes: {exc}") from exc


__all__ = [
    "DatasetError", "FormatError", "Manifest", "RenderConfig", "Sample", "config_hash", "generate_dataset",
    "load_arrays", "read_sample", "render_frames", "split",
]
