"""Command-line pipeline: generate, calibrate, train, eval, gradcam, icp-merge, simcheck.

Configuration is a JSON file; any field can be overridden on the command
line with dotted ``section.field=value`` arguments, e.g. ``train.epochs=5``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import formats
from .calibrate import CalibrationConfig, calibrate_scene
from .dataset import Manifest, RenderConfig, generate_dataset, load_arrays, split
from .geometry import PointCloud, chamfer_unidirectional, tip_mae
from .registration import IcpConfig, merge_views
from .renderer import BinaryImage, attach_markers, make_pattern, render_binary
from .simulator import ActuatorSpec, LoadCase, ScenarioConfig, simulate, surface_cloud, undeformed_mesh


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class TrainSection:
    batch_size: int = 50
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    epochs: int = 100
    seed: int = 0


@dataclass
class PipelineConfig:
    actuator: ActuatorSpec = field(default_factory=ActuatorSpec)
    scenarios: ScenarioConfig = field(default_factory=ScenarioConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    pattern: str = "P2"
    prototype_points: int = 3174
    train: TrainSection = field(default_factory=TrainSection)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if self.pattern not in ("P1", "P2", "P3", "P4"):
            raise ConfigError(f"pattern: unknown kind {self.pattern!r}")
        if self.prototype_points < 1:
            raise ConfigError("prototype_points: must be positive")
        if self.prototype_points > self.render.cloud_points:
            raise ConfigError(
                f"prototype_points: {self.prototype_points} exceeds render.cloud_points {self.render.cloud_points}"
            )
        if not 0 < self.split.train_fraction < 1:
            raise ConfigError("split.train_fraction: must lie strictly between 0 and 1")
        t = self.train
        if t.batch_size < 1 or t.epochs < 1 or t.learning_rate < 0 or t.weight_decay < 0:
            raise ConfigError("train: batch_size and epochs must be positive, rates non-negative")
        try:
            self.render.camera()
            self.scenarios.validate()
        except ValueError as exc:
            raise ConfigError(f"render/scenarios: {exc}") from exc
        if self.render.image_size % 32:
            raise ConfigError("render.image_size: must be divisible by 32 for the five pooling stages")
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_SECTIONS = {
    "actuator": ActuatorSpec,
    "scenarios": ScenarioConfig,
    "render": RenderConfig,
    "train": TrainSection,
    "calibration": CalibrationConfig,
    "split": SplitConfig,
    "icp": IcpConfig,
}
_TUPLE_FIELDS = {"modulus_range", "contact_offset_range", "force_directions", "scene"}


def _build_section(name: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
    kw = {k: (tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v) for k, v in values.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(d: dict) -> PipelineConfig:
    top = {f.name for f in fields(PipelineConfig)}
    for key in d:
        if key not in top:
            raise ConfigError(f"{key}: unknown field")
    kw = {}
    for key, value in d.items():
        kw[key] = _build_section(key, _SECTIONS[key], value) if key in _SECTIONS else value
    return PipelineConfig(**kw).validate()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    d = json.loads(json.dumps(d))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, text = item.split("=", 1)
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(text)
    return d


def load_config(path=None, overrides=()) -> PipelineConfig:
    base = PipelineConfig().to_dict()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                base[key].update(value)
            else:
                base[key] = value
    return config_from_dict(apply_overrides(base, overrides))


# reports --------------------------------------------------------------------
REPORT_COLUMNS = ("source", "pattern", "chamfer_mm", "tip_mae_mm")


@dataclass
class EvalResult:
    source: str
    pattern: str
    frame_ids: list
    chamfer_mm: np.ndarray
    tip_mae_mm: np.ndarray
    force_directions: list = field(default_factory=list)

    def summary(self, exclude_directions=()) -> dict:
        keep = np.ones(len(self.frame_ids), dtype=bool)
        if exclude_directions:
            keep = np.array([d not in exclude_directions for d in self.force_directions], dtype=bool)
        if not keep.any():
            raise ConfigError("subset filter removed every frame")
        return {
            "source": self.source,
            "pattern": self.pattern,
            "chamfer_mm": float(np.mean(self.chamfer_mm[keep])),
            "tip_mae_mm": float(np.mean(self.tip_mae_mm[keep])),
        }


def emit_report(results, out_path, exclude_directions=()) -> list[dict]:
    """Write ``<out>.csv`` and a plain-text ``<out>.txt`` table; returns the rows."""
    if not results:
        raise ConfigError("no evaluation results to report")
    rows = [r.summary(exclude_directions) if isinstance(r, EvalResult) else dict(r) for r in results]
    out = Path(out_path)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["source"], r["pattern"], f"{r['chamfer_mm']:.4f}", f"{r['tip_mae_mm']:.4f}"])
    header = ["Test data source", "Pattern", "Chamfer [mm]", "Tip MAE [mm]"]
    cells = [[r["source"], r["pattern"], f"{r['chamfer_mm']:.2f}", f"{r['tip_mae_mm']:.2f}"] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(wd) for h, wd in zip(header, widths)), "  ".join("-" * wd for wd in widths)]
    lines += ["  ".join(c.ljust(wd) for c, wd in zip(row, widths)) for row in cells]
    out.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    return rows


# stages ---------------------------------------------------------------------
def prototype_cloud(cfg: PipelineConfig) -> PointCloud:
    return surface_cloud(undeformed_mesh(cfg.actuator), cfg.prototype_points, seed=0)


def run_generate(cfg: PipelineConfig, out: Path, seed: int, jobs: int = 1) -> Manifest:
    return generate_dataset(cfg.actuator, cfg.scenarios, cfg.render, cfg.pattern, seed, out, jobs)


def run_calibrate(cfg: PipelineConfig, reference: BinaryImage, out: Path) -> dict:
    render = replace(cfg.render, image_size=reference.width, scene=None)
    mesh = undeformed_mesh(cfg.actuator)
    markers = attach_markers(make_pattern(cfg.pattern, cfg.actuator.length,
                                          marker_diameter=render.marker_diameter), mesh)
    report = calibrate_scene(reference, render.camera(), markers, mesh, cfg.calibration)
    formats.ensure_dir(out)
    data = report.to_dict()
    (out / "calibration.json").write_text(json.dumps(data, indent=1) + "\n")
    render_binary(render.camera(), markers, mesh, report.theta).save(out / "calibrated.pgm")
    return data


def _train_arrays(cfg: PipelineConfig, manifest: Manifest):
    tr, va = split(manifest, cfg.split.train_fraction, cfg.split.seed)
    return tr, va, load_arrays(manifest, tr), load_arrays(manifest, va)


def run_train(cfg: PipelineConfig, data: Path, out: Path, log=None):
    from .nn import ModelConfig, TrainConfig, build_model, save_weights, train

    manifest = Manifest.load(data)
    _, _, train_set, val_set = _train_arrays(cfg, manifest)
    image_size = train_set[0].shape[1]
    model = build_model(ModelConfig(image_size=image_size), prototype_cloud(cfg), seed=cfg.train.seed)
    tc = TrainConfig(batch_size=min(cfg.train.batch_size, len(train_set[0])), learning_rate=cfg.train.learning_rate,
                     weight_decay=cfg.train.weight_decay, epochs=cfg.train.epochs, seed=cfg.train.seed)
    model, history = train(model, train_set, val_set, tc, log=log)
    formats.ensure_dir(out)
    save_weights(model, out / "model.weights")
    history.write_csv(out / "history.csv")
    return model, history


def _subset_ids(cfg: PipelineConfig, manifest: Manifest, subset: str) -> list[int]:
    if subset == "all":
        return manifest.frame_ids
    tr, va = split(manifest, cfg.split.train_fraction, cfg.split.seed)
    return sorted(tr if subset == "train" else va)


def evaluate(model, manifest: Manifest, frame_ids, source: str = "sim") -> EvalResult:
    images, clouds = load_arrays(manifest, frame_ids)
    preds = np.concatenate([model.predict(images[i : i + 50]) for i in range(0, len(images), 50)])
    cham = np.array([chamfer_unidirectional(gt, p) for p, gt in zip(preds, clouds)])
    tips = np.array([tip_mae(p, gt) for p, gt in zip(preds, clouds)])
    dirs = [manifest.sample(f).load.force_direction for f in frame_ids]
    return EvalResult(source, manifest.pattern, list(frame_ids), cham, tips, dirs)


def run_eval(cfg: PipelineConfig, data: Path, weights: Path, out: Path, subset: str = "val",
             source: str = "sim", exclude_directions=()) -> EvalResult:
    from .nn import load_weights

    model = load_weights(weights)
    manifest = Manifest.load(data)
    result = evaluate(model, manifest, _subset_ids(cfg, manifest, subset), source)
    formats.ensure_dir(out)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "chamfer_uni_mm", "tip_mae_mm"])
        for fid, c, t in zip(result.frame_ids, result.chamfer_mm, result.tip_mae_mm):
            w.writerow([fid, f"{c:.6f}", f"{t:.6f}"])
        w.writerow(["mean", f"{result.chamfer_mm.mean():.6f}", f"{result.tip_mae_mm.mean():.6f}"])
    emit_report([result], out / "report", exclude_directions)
    return result


def run_gradcam(cfg: PipelineConfig, data: Path, weights: Path, out: Path, subset: str = "val",
                limit: int | None = None) -> list[float]:
    from .dataset import read_sample
    from .nn import grad_cam, load_weights

    model = load_weights(weights)
    manifest = Manifest.load(data)
    ids = _subset_ids(cfg, manifest, subset)[:limit]
    formats.ensure_dir(out / "heatmaps")
    ratios = []
    with open(out / "attention.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "marker_ratio"])
        for fid in ids:
            image, cloud, _ = read_sample(manifest, fid)
            cam = grad_cam(model, image, cloud)
            formats.write_pgm(out / "heatmaps" / f"{fid:06d}.pgm", cam.overlay * 255.0)
            ratio = cam.marker_ratio(image)
            ratios.append(ratio)
            w.writerow([fid, f"{ratio:.6f}"])
    return ratios


def run_icp_merge(cfg: PipelineConfig, a_path: Path, b_path: Path, out: Path):
    a = PointCloud(formats.read_ply(a_path))
    b = PointCloud(formats.read_ply(b_path))
    merged, result = merge_views(a, b, cfg.icp)
    formats.ensure_dir(out)
    formats.write_ply(out / "merged.ply", merged.points)
    (out / "alignment.json").write_text(result.to_json() + "\n")
    return merged, result


def simcheck(spec: ActuatorSpec | None = None) -> list[tuple[str, bool, str]]:
    """Analytic validations of the simulator; returns ``(name, passed, detail)``."""
    spec = spec or ActuatorSpec()
    checks = []
    force = 5.0
    mesh_tip = _tip(simulate(spec, LoadCase(external_force=(force, 0.0, 0.0))))
    beam = force * spec.length**3 / (3 * spec.bending_stiffness)
    rel = abs(mesh_tip[0] - beam) / beam
    checks.append(("cantilever tip deflection", rel <= 0.02, f"{mesh_tip[0]:.5f} mm vs {beam:.5f} mm"))
    vol = spec.full_bend_volume
    tip = _tip(simulate(spec, LoadCase(actuation_volume=vol)))
    radius = spec.length / (math.pi / 2)
    arc = np.array([radius, 0.0, radius])
    err = float(np.linalg.norm(tip - arc))
    checks.append(("constant-curvature arc tip", err <= 1e-6 * spec.length, f"error {err:.3e} mm"))
    return checks


def _tip(mesh) -> np.ndarray:
    # centre of the distal inner ring sits on the backbone
    return mesh.vertices[mesh.inner_vertex_ids[-1]].mean(axis=0)


# entry point ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softproprio", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, weights=False):
        p.add_argument("--config", type=Path, help="JSON pipeline config")
        p.add_argument("--seed", type=int, help="override the pipeline seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (1 = reproducible)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        if data:
            p.add_argument("--data", type=Path, help="dataset directory (default: --out)")
        if weights:
            p.add_argument("--weights", type=Path, required=True, help="model weights file")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted config overrides")
        return p

    common(sub.add_parser("generate", help="simulate and render a dataset"))
    p = common(sub.add_parser("calibrate", help="fit scene parameters to a reference image"))
    p.add_argument("--reference", type=Path, required=True, help="reference binary image (PGM)")
    common(sub.add_parser("train", help="train the image-to-cloud network"), data=True)
    for name in ("eval", "gradcam"):
        p = common(sub.add_parser(name, help=f"{name} on a dataset split"), data=True, weights=True)
        p.add_argument("--subset", choices=("train", "val", "all"), default="val")
        if name == "eval":
            p.add_argument("--source", default="sim", help="label for the report's data-source column")
            p.add_argument("--exclude", action="append", default=[], help="drop frames with this force direction")
        else:
            p.add_argument("--limit", type=int, help="at most this many frames")
    p = sub.add_parser("icp-merge", help="merge two partial clouds")
    p.add_argument("first", type=Path)
    p.add_argument("second", type=Path)
    common(p)
    common(sub.add_parser("simcheck", help="analytic simulator validations"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out
    try:
        if stage == "generate":
            manifest = run_generate(cfg, out, cfg.seed, args.jobs)
            print(f"wrote {len(manifest)} frames to {out}")
        elif stage == "calibrate":
            ref = BinaryImage.load(args.reference)
            data = run_calibrate(cfg, ref, out)
            print(f"mse {data['initial_mse']:.6f} -> {data['final_mse']:.6f} in {data['iterations']} iterations")
        elif stage == "train":
            _, history = run_train(cfg, args.data or out, out, log=print)
            print(f"best epoch {history.best_epoch}, val loss {min(history.val_loss):.4f}")
        elif stage == "eval":
            result = run_eval(cfg, args.data or out, args.weights, out, args.subset, args.source, tuple(args.exclude))
            s = result.summary(tuple(args.exclude))
            print(f"chamfer {s['chamfer_mm']:.3f} mm, tip MAE {s['tip_mae_mm']:.3f} mm over {len(result.frame_ids)} frames")
        elif stage == "gradcam":
            ratios = run_gradcam(cfg, args.data or out, args.weights, out, args.subset, args.limit)
            finite = [r for r in ratios if math.isfinite(r)]
            share = np.mean([r >= 2.0 for r in finite]) if finite else 0.0
            print(f"{len(ratios)} heatmaps; marker/background >= 2 on {100 * share:.1f}% of frames")
        elif stage == "icp-merge":
            merged, result = run_icp_merge(cfg, args.first, args.second, out)
            print(f"merged {len(merged)} points, rms {result.rms:.4f} mm after {result.iterations} iterations")
        elif stage == "simcheck":
            checks = simcheck(cfg.actuator)
            for name, ok, detail in checks:
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
            return 0 if all(ok for _, ok, _ in checks) else 1
    except (ValueError, OSError) as exc:
        print(f"{stage}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
