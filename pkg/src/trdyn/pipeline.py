"""Command implementations behind the ``trdyn`` command line.

Each ``cmd_*`` function takes a validated :class:`RunConfig` plus paths and
writes its artifacts; none of them print.  Reports are JSON documents whose
``meta`` block holds the only run-dependent fields (wall-clock timings).
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, NumericalError
from .fitting import (FitConfig, continual_fit, extrapolation_errors, fit, new_field, predict)
from .field import field_query, load_field, save_field
from .render import Camera, load_camera, save_camera, splat_image, write_png, write_ply
from .scenes import (BENCHMARKS, SceneSpec, TrajectoryDataset, benchmark_spec, generate_scene,
                     read_dataset, write_dataset)
from .segmentation import (cluster_residuals, kmeans, label_colors, motion_features, seg_metrics,
                           select_k, write_labels_csv)


# -- configuration --------------------------------------------------------------------

@dataclass
class SceneSection:
    benchmark: Optional[str] = "multipart"
    n_particles: int = 600
    n_frames: int = 60
    spec: Optional[dict] = None


@dataclass
class ModelSection:
    backend: str = "table"
    init: str = "difference"
    width: int = 256
    depth: int = 8
    pos_degree: int = 8
    time_degree: int = 5
    use_time: bool = True


@dataclass
class RolloutSection:
    n_steps: int = 14
    dt_multiple: int = 1
    mode: str = "derive"
    order: Optional[int] = None


@dataclass
class SegmentSection:
    k: Optional[int] = None
    standardize: bool = False
    query_time: Optional[float] = None
    k_min: int = 2
    k_max: int = 8


@dataclass
class RenderSection:
    camera: Optional[str] = None
    width: int = 256
    height: int = 256
    fov_deg: float = 50.0
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    every: int = 1


@dataclass
class ContinualSection:
    windows: list = field(default_factory=lambda: [0.15, 0.30, 0.45, 0.60, 0.75])
    history: Optional[float] = 0.075
    init: str = "difference"


@dataclass
class AblateSection:
    dt_multiples: list = field(default_factory=lambda: [1, 2, 3])
    orders: list = field(default_factory=lambda: [1, 2, 3])
    modes: list = field(default_factory=lambda: ["derive", "requery"])
    parametrizations: list = field(default_factory=lambda: ["equivalent", "raw"])
    supervisions: list = field(default_factory=lambda: ["pairs", "from_origin"])


SECTIONS = {"scene": SceneSection, "fit": FitConfig, "model": ModelSection, "rollout": RolloutSection,
            "segment": SegmentSection, "render": RenderSection, "continual": ContinualSection,
            "ablate": AblateSection}


@dataclass
class RunConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    fit: FitConfig = field(default_factory=FitConfig)
    model: ModelSection = field(default_factory=ModelSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    segment: SegmentSection = field(default_factory=SegmentSection)
    render: RenderSection = field(default_factory=RenderSection)
    continual: ContinualSection = field(default_factory=ContinualSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    seed: int = 0

    def __post_init__(self):
        if self.model.backend not in ("table", "mlp"):
            raise ConfigError(f"unknown backend {self.model.backend!r}")
        if self.model.init not in ("difference", "zeros"):
            raise ConfigError(f"unknown model.init {self.model.init!r}")
        if self.rollout.mode not in ("derive", "requery"):
            raise ConfigError(f"unknown rollout mode {self.rollout.mode!r}")
        if self.rollout.n_steps < 0 or self.rollout.dt_multiple < 1:
            raise ConfigError("rollout needs n_steps >= 0 and dt_multiple >= 1")
        if self.segment.k is not None and self.segment.k < 1:
            raise ConfigError("segment.k must be >= 1")
        if self.scene.benchmark is None and self.scene.spec is None:
            raise ConfigError("scene needs either a benchmark name or a spec")
        if self.scene.benchmark is not None and self.scene.benchmark not in BENCHMARKS + ("piecewise",):
            raise ConfigError(f"unknown benchmark {self.scene.benchmark!r}")
        if self.render.every < 1:
            raise ConfigError("render.every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad value in {name!r}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    """Build a :class:`RunConfig`, rejecting unknown keys at every level."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {', '.join(unknown)}")
    kw = {name: _section(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()}
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    return RunConfig(seed=seed, **kw)


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply ``{"section.key": value}`` overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in dotted:
            sec, key = dotted.split(".", 1)
            data.setdefault(sec, {})[key] = value
        else:
            data[dotted] = value
    return config_from_dict(data)


def versions() -> dict:
    import scipy

    return {"trdyn": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _fit_config(cfg: RunConfig) -> FitConfig:
    return FitConfig(**{**asdict(cfg.fit), "seed": cfg.seed})


def _new_field(ds, cfg: RunConfig, fcfg: FitConfig):
    m = cfg.model
    if m.backend == "table":
        return new_field(ds, fcfg, "table", init=m.init)
    return new_field(ds, fcfg, "mlp", width=m.width, depth=m.depth, pos_degree=m.pos_degree,
                     time_degree=m.time_degree, use_time=m.use_time)


# -- commands ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out_dir) -> TrajectoryDataset:
    """Synthesize the configured scene and write ``scene.json`` + ``traj.csv``."""
    sc = cfg.scene
    if sc.spec is not None:
        spec = SceneSpec.from_dict({**sc.spec, "seed": sc.spec.get("seed", cfg.seed)})
    else:
        spec = benchmark_spec(sc.benchmark, sc.n_particles, seed=cfg.seed, n_frames=sc.n_frames)
    ds = generate_scene(spec)
    write_dataset(ds, out_dir)
    return ds


def cmd_fit(dataset_dir, cfg: RunConfig, out_dir):
    """Fit a field to the training frames; writes ``field.json`` (+ sidecar) and ``fit_report.json``."""
    ds = read_dataset(dataset_dir)
    fcfg = _fit_config(cfg)
    fld = _new_field(ds, cfg, fcfg)
    res = fit(ds, fld, fcfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = save_field(fld, out / "field")
    report = res.report()
    wall = report.pop("wall_clock_s")
    report.update({"model": asdict(cfg.model), "n_particles": ds.n_particles, "n_train_frames": ds.split,
                   "versions": versions(), "meta": {"wall_clock_s": wall}})
    _write_json(out / "fit_report.json", report)
    return ckpt, res


def _prediction_dataset(ds: TrajectoryDataset, pos, quat, start: int, dt_multiple: int) -> TrajectoryDataset:
    times = ds.times[start] + np.arange(len(pos)) * ds.frame_dt * dt_multiple
    return TrajectoryDataset(times=times, positions=pos, orientations=quat if ds.has_orientations else None,
                             labels=ds.labels, split=len(pos), part_motions={}, spec=ds.spec,
                             scales=ds.scales, colors=ds.colors, opacities=ds.opacities)


def eval_report(rows: list, cfg: RunConfig, extra: Optional[dict] = None) -> dict:
    report = {"horizons": [r["horizon"] for r in rows], "times": [r["time"] for r in rows],
              "rmse": [r["rmse"] for r in rows], "rot_err": [r["rot_err"] for r in rows],
              "segmentation": None, "config": cfg.to_dict(), "versions": versions(), "meta": {}}
    report.update(extra or {})
    return report


def cmd_extrapolate(dataset_dir, checkpoint, cfg: RunConfig, out_dir) -> dict:
    """Roll out from the last training frame; writes ``pred/`` (dataset format) and ``eval_report.json``."""
    ds = read_dataset(dataset_dir)
    fld = load_field(checkpoint)
    _check_field(fld, ds)
    ro = cfg.rollout
    start = ds.split - 1
    max_steps = (ds.n_frames - 1 - start) // ro.dt_multiple
    n_steps = min(ro.n_steps, max_steps) if max_steps > 0 else ro.n_steps
    t0 = time.perf_counter()
    pos, quat = predict(ds, fld, start, n_steps, ro.dt_multiple, ro.mode, ro.order, cfg.fit.position_scheme)
    wall = time.perf_counter() - t0
    if not np.all(np.isfinite(pos)):
        raise NumericalError("extrapolated positions are not finite")
    out = Path(out_dir)
    write_dataset(_prediction_dataset(ds, pos, quat, start, ro.dt_multiple), out / "pred")
    rows = extrapolation_errors(ds, pos, quat, start, ro.dt_multiple)
    report = eval_report(rows, cfg, {"start_frame": start, "scene_diameter": ds.diameter(),
                                     "meta": {"wall_clock_s": wall}})
    _write_json(out / "eval_report.json", report)
    return report


def _check_field(fld, ds):
    if getattr(fld, "kind", "") == "table" and fld.n_particles != ds.n_particles:
        raise DataError(f"checkpoint has {fld.n_particles} particles, dataset has {ds.n_particles}")


def cmd_segment(checkpoint, dataset_dir, cfg: RunConfig, out_dir) -> dict:
    """Cluster motion features; writes ``labels.csv``, ``labels.ply`` and ``segment_report.json``."""
    ds = read_dataset(dataset_dir)
    fld = load_field(checkpoint)
    _check_field(fld, ds)
    sg = cfg.segment
    t_query = float(ds.times[ds.split - 1]) if sg.query_time is None else float(sg.query_time)
    frame = int(np.argmin(np.abs(ds.times - t_query)))
    ids = np.arange(ds.n_particles)
    params = field_query(fld, ds.positions[frame], t_query, ids)
    feats = motion_features(params, standardize=sg.standardize)
    t0 = time.perf_counter()
    if sg.k is None:
        res = select_k(feats, seed=cfg.seed, k_range=(sg.k_min, sg.k_max), ids=ids)
    else:
        res = kmeans(feats, sg.k, seed=cfg.seed, ids=ids)
    wall = time.perf_counter() - t0
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labels_csv(out / "labels.csv", res.labels, ids)
    write_ply(out / "labels.ply", ds.positions[frame], label_colors(res.labels))
    metrics = seg_metrics(res.labels, ds.labels)
    mid = ds.n_frames // 2
    residuals = cluster_residuals(res.labels, ds.positions[0], ds.positions[mid])
    report = {"k": res.k, "inertia": res.inertia, "query_time": t_query, "metrics": metrics,
              "kabsch_residuals": {str(k): v for k, v in residuals.items()},
              "scene_diameter": ds.diameter(), "config": cfg.to_dict(), "versions": versions(),
              "meta": {"wall_clock_s": wall}}
    _write_json(out / "segment_report.json", report)
    return report


def default_camera(ds: TrajectoryDataset, rc: RenderSection) -> Camera:
    lo = ds.positions.min(axis=(0, 1))
    hi = ds.positions.max(axis=(0, 1))
    center = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo)) or 1.0
    dist = 1.3 * radius / np.tan(np.radians(rc.fov_deg) / 2.0)
    eye = center + dist * np.array([0.0, -np.cos(np.radians(30)), np.sin(np.radians(30))])
    return Camera.look_at(eye, center, (0.0, 0.0, 1.0), rc.fov_deg, rc.width, rc.height)


def cmd_render(dataset_dir, cfg: RunConfig, out_dir, camera_path: Optional[str] = None) -> list:
    """Render every ``render.every``-th frame of a dataset or prediction directory to PNG."""
    ds = read_dataset(dataset_dir)
    rc = cfg.render
    cam_file = camera_path or rc.camera
    cam = load_camera(cam_file) if cam_file else default_camera(ds, rc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_camera(cam, out / "camera.json")
    paths = []
    for f in range(0, ds.n_frames, rc.every):
        rgb, alpha = splat_image(ds.frame(f), cam, rc.background)
        paths.append(write_png(rgb, out / f"frame_{f:04d}.png", alpha))
    return paths


def cmd_continual(dataset_dir, cfg: RunConfig, out_dir) -> dict:
    """Windowed fit-then-extrapolate; writes ``continual_report.json``."""
    ds = read_dataset(dataset_dir)
    fcfg = _fit_config(cfg)
    cc = cfg.continual
    fld = _new_field(ds, cfg, fcfg) if cfg.model.backend == "mlp" else new_field(ds, fcfg, "table", init="zeros")
    t0 = time.perf_counter()
    rows = continual_fit(ds, fld, cc.windows, fcfg, history=cc.history, mode=cfg.rollout.mode,
                         init=cc.init if cfg.model.init == "difference" else "zeros")
    wall = time.perf_counter() - t0
    diam = ds.diameter()
    out = Path(out_dir)
    windows = []
    for i, r in enumerate(rows):
        (out / f"window_{i}").mkdir(parents=True, exist_ok=True)
        save_field(r.pop("field"), out / f"window_{i}" / "field")
        windows.append({**r, "rmse_over_diameter": r["rmse"] / diam})
    rel = [w["rmse_over_diameter"] for w in windows]
    report = {"windows": windows, "scene_diameter": diam,
              "worst_over_best": (max(rel) / min(rel)) if rel and min(rel) > 0 else None,
              "config": cfg.to_dict(), "versions": versions(), "meta": {"wall_clock_s": wall}}
    _write_json(out / "continual_report.json", report)
    return report


def ablation_cells(ab: AblateSection):
    for m in ab.dt_multiples:
        for o in ab.orders:
            for mode in ab.modes:
                for par in ab.parametrizations:
                    for sup in ab.supervisions:
                        yield {"dt_multiple": int(m), "order": int(o), "rollout_mode": mode,
                               "parametrization": par, "supervision": sup}


def cmd_ablate(dataset_dir, cfg: RunConfig, out_dir) -> dict:
    """Fit and extrapolate every ablation cell; writes ``ablation_report.json``.

    Each cell trains with its own settings (``rollout_mode`` covers both the
    training rollout and the extrapolation) from the same seed, so the
    (2, 2, derive, equivalent, pairs) cell reproduces a standalone
    fit + extrapolate run.
    """
    ds = read_dataset(dataset_dir)
    ro = cfg.rollout
    start = ds.split - 1
    cells = []
    for cell in ablation_cells(cfg.ablate):
        fcfg = FitConfig(**{**asdict(cfg.fit), **cell, "seed": cfg.seed})
        fld = _new_field(ds, cfg, fcfg)
        t0 = time.perf_counter()
        res = fit(ds, fld, fcfg)
        max_steps = (ds.n_frames - 1 - start) // ro.dt_multiple
        pos, quat = predict(ds, fld, start, min(ro.n_steps, max_steps), ro.dt_multiple, cell["rollout_mode"],
                            None, fcfg.position_scheme)
        rows = extrapolation_errors(ds, pos, quat, start, ro.dt_multiple)
        cells.append({"cell": cell, "final_loss": res.loss_history[-1] if res.loss_history else None,
                      "horizons": [r["horizon"] for r in rows], "rmse": [r["rmse"] for r in rows],
                      "rot_err": [r["rot_err"] for r in rows],
                      "meta": {"wall_clock_s": time.perf_counter() - t0}})
    report = {"cells": cells, "scene_diameter": ds.diameter(), "config": cfg.to_dict(),
              "versions": versions()}
    _write_json(Path(out_dir) / "ablation_report.json", report)
    return report
