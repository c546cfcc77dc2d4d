"""Synthetic multi-part scenes with closed-form rigid motions.

A :class:`SceneSpec` lists parts, each with a shape, a particle count and a
:class:`MotionSpec`.  :func:`generate_scene` samples particles on the part
surfaces and evaluates the exact motion on a uniform time grid, producing a
:class:`TrajectoryDataset` that serves as ground truth for fitting,
extrapolation and segmentation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import RawCenterParams
from .errors import ConfigError, DataError
from .geometry import quat_from_axis_angle, quat_mul, quat_normalize, rodrigues

MOTION_KINDS = ("static", "const_velocity", "const_accel", "rotation", "screw", "piecewise")
SHAPES = ("box", "sphere", "point_cloud")
CSV_HEADER = ["t", "particle_id", "x", "y", "z", "qw", "qx", "qy", "qz", "label"]


def _vec(v) -> list:
    return [float(x) for x in v]


@dataclass
class MotionSpec:
    """Closed-form rigid motion.

    ``rotation``/``screw`` turn by ``omega0 * t + alpha * t**2 / 2`` about
    ``axis`` through ``point``; a screw also advances ``pitch`` metres along
    the axis per turn.  ``piecewise`` chains ``segments`` of
    ``(start_time, MotionSpec)``, each starting from the state reached by
    the previous one.
    """

    kind: str = "static"
    velocity: tuple = (0.0, 0.0, 0.0)
    accel: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (0.0, 0.0, 1.0)
    point: tuple = (0.0, 0.0, 0.0)
    omega0: float = 0.0
    alpha: float = 0.0
    pitch: float = 0.0
    segments: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise ConfigError(f"unknown motion kind {self.kind!r}")
        self.velocity = tuple(_vec(self.velocity))
        self.accel = tuple(_vec(self.accel))
        self.axis = tuple(_vec(self.axis))
        self.point = tuple(_vec(self.point))
        if self.kind in ("rotation", "screw") and abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ConfigError("rotation axis must be unit length")
        segs = []
        for start, motion in self.segments:
            if not isinstance(motion, MotionSpec):
                motion = MotionSpec(**motion)
            segs.append((float(start), motion))
        self.segments = segs
        if self.kind == "piecewise":
            if not segs or segs[0][0] != 0.0:
                raise ConfigError("piecewise motion needs segments starting at t=0")
            if any(b[0] <= a[0] for a, b in zip(segs, segs[1:])):
                raise ConfigError("piecewise segment start times must increase")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "const_velocity":
            d["velocity"] = list(self.velocity)
        elif self.kind == "const_accel":
            d.update(velocity=list(self.velocity), accel=list(self.accel))
        elif self.kind in ("rotation", "screw"):
            d.update(axis=list(self.axis), point=list(self.point), omega0=self.omega0, alpha=self.alpha)
            if self.kind == "screw":
                d["pitch"] = self.pitch
        elif self.kind == "piecewise":
            d["segments"] = [[s, m.to_dict()] for s, m in self.segments]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        return cls(**d)


def _angle(m: MotionSpec, t):
    return m.omega0 * t + 0.5 * m.alpha * t * t


def exact_state(motion: MotionSpec, x0, r0, t: float):
    """Closed-form position and orientation at time ``t`` from ``(x0, r0)`` at 0."""
    x0 = np.asarray(x0, dtype=np.float64)
    r0 = np.asarray(r0, dtype=np.float64)
    t = float(t)
    k = motion.kind
    if k == "static":
        return x0.copy(), r0.copy()
    if k == "const_velocity":
        return x0 + np.asarray(motion.velocity) * t, r0.copy()
    if k == "const_accel":
        return x0 + np.asarray(motion.velocity) * t + 0.5 * np.asarray(motion.accel) * t * t, r0.copy()
    if k in ("rotation", "screw"):
        axis = np.asarray(motion.axis)
        p = np.asarray(motion.point)
        th = _angle(motion, t)
        R = rodrigues(axis, th)
        x = p + (x0 - p) @ R.T
        if k == "screw":
            x = x + motion.pitch * th / (2.0 * math.pi) * axis
        r = quat_normalize(quat_mul(quat_from_axis_angle(axis, th), r0))
        return x, r
    # piecewise
    x, r = x0, r0
    segs = motion.segments
    for i, (start, seg) in enumerate(segs):
        end = segs[i + 1][0] if i + 1 < len(segs) else math.inf
        if t <= end:
            return exact_state(seg, x, r, t - start)
        x, r = exact_state(seg, x, r, end - start)
    return x, r


def motion_params(motion: MotionSpec, t: float) -> RawCenterParams:
    """Ground-truth center/rotation parameters of ``motion`` at time ``t``.

    For piecewise motions the rotation point of a later segment is taken as
    given in world coordinates at that segment's start.
    """
    z = np.zeros(3)
    k = motion.kind
    if k == "static":
        return RawCenterParams(z, z, z, z, z)
    if k == "const_velocity":
        return RawCenterParams(z, np.asarray(motion.velocity), z, z, z)
    if k == "const_accel":
        v = np.asarray(motion.velocity) + np.asarray(motion.accel) * t
        return RawCenterParams(z, v, np.asarray(motion.accel), z, z)
    if k in ("rotation", "screw"):
        axis = np.asarray(motion.axis)
        omega = motion.omega0 + motion.alpha * t
        lead = motion.pitch / (2.0 * math.pi) if k == "screw" else 0.0
        return RawCenterParams(np.asarray(motion.point), lead * omega * axis, lead * motion.alpha * axis,
                               omega * axis, motion.alpha * axis)
    segs = motion.segments
    for i, (start, seg) in enumerate(segs):
        end = segs[i + 1][0] if i + 1 < len(segs) else math.inf
        if t < end:
            return motion_params(seg, t - start)
    start, seg = segs[-1]
    return motion_params(seg, t - start)


@dataclass
class PartSpec:
    shape: str = "sphere"
    particle_count: int = 100
    motion: MotionSpec = field(default_factory=MotionSpec)
    color: tuple = (0.8, 0.8, 0.8)
    label: int = 0
    center: tuple = (0.0, 0.0, 0.0)
    extent: tuple = (0.5, 0.5, 0.5)
    radius: float = 0.25
    file: Optional[str] = None
    particle_scale: float = 0.02

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown part shape {self.shape!r}")
        if int(self.particle_count) < 1:
            raise ConfigError("particle_count must be >= 1")
        if self.shape == "point_cloud" and not self.file:
            raise ConfigError("point_cloud parts need a file")
        if isinstance(self.motion, dict):
            self.motion = MotionSpec.from_dict(self.motion)
        self.particle_count = int(self.particle_count)
        self.color = tuple(_vec(self.color))
        self.center = tuple(_vec(self.center))
        self.extent = tuple(_vec(self.extent))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motion"] = self.motion.to_dict()
        return d


@dataclass
class SceneSpec:
    parts: list
    duration: float = 1.0
    frame_rate: float = 60.0
    train_fraction: float = 0.7
    seed: int = 0
    emit_orientations: bool = True
    name: str = "scene"
    position_noise: float = 0.0

    def __post_init__(self):
        self.parts = [p if isinstance(p, PartSpec) else PartSpec(**p) for p in self.parts]
        if not self.parts:
            raise ConfigError("a scene needs at least one part")
        if not self.position_noise >= 0.0:
            raise ConfigError("position_noise must be >= 0")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if self.n_frames < 2:
            raise ConfigError("a scene needs at least 2 frames (duration * frame_rate >= 2)")
        labels = [p.label for p in self.parts]
        if len(set(labels)) != len(labels):
            raise ConfigError("part labels must be unique")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    def to_dict(self) -> dict:
        return {"parts": [p.to_dict() for p in self.parts], "duration": self.duration,
                "frame_rate": self.frame_rate, "train_fraction": self.train_fraction,
                "seed": self.seed, "emit_orientations": self.emit_orientations, "name": self.name,
                "position_noise": self.position_noise}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class TrajectoryDataset:
    """Rectangular particle trajectories.

    ``positions`` is (frames, particles, 3); ``orientations`` is
    (frames, particles, 4) or ``None`` for position-only tracking.  Frames
    ``[0, split)`` are for training.
    """

    times: np.ndarray
    positions: np.ndarray
    orientations: Optional[np.ndarray]
    labels: np.ndarray
    split: int
    part_motions: dict = field(default_factory=dict)
    spec: Optional[dict] = None
    scales: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    opacities: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        F, N = self.positions.shape[:2]
        if self.times.shape != (F,) or self.labels.shape != (N,):
            raise DataError("dataset arrays are not rectangular")
        if F >= 2 and np.any(np.diff(self.times) <= 0):
            raise DataError("dataset times must be strictly increasing")
        if self.orientations is not None:
            self.orientations = np.asarray(self.orientations, dtype=np.float64)
            if self.orientations.shape != (F, N, 4):
                raise DataError("orientation array does not match positions")
        if self.scales is None:
            self.scales = np.full((N, 3), 0.02)
        if self.colors is None:
            self.colors = np.full((N, 3), 0.7)
        if self.opacities is None:
            self.opacities = np.full(N, 0.9)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def frame_dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def has_orientations(self) -> bool:
        return self.orientations is not None

    def frame(self, i: int):
        """RigidParticle snapshot of frame ``i``."""
        from .dynamics import RigidParticle

        r = self.orientations[i] if self.orientations is not None else \
            np.tile([1.0, 0.0, 0.0, 0.0], (self.n_particles, 1))
        return RigidParticle(self.positions[i].copy(), r.copy(), self.scales.copy(),
                             self.colors.copy(), self.opacities.copy())

    def diameter(self) -> float:
        """Bounding-box diagonal over all frames."""
        lo = self.positions.reshape(-1, 3).min(axis=0)
        hi = self.positions.reshape(-1, 3).max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def truncated(self, n_frames: int) -> "TrajectoryDataset":
        return TrajectoryDataset(self.times[:n_frames], self.positions[:n_frames],
                                 None if self.orientations is None else self.orientations[:n_frames],
                                 self.labels, min(self.split, n_frames), self.part_motions, self.spec,
                                 self.scales, self.colors, self.opacities)


def _random_quats(rng, n):
    return quat_normalize(rng.normal(size=(n, 4)))


def load_point_cloud(path) -> np.ndarray:
    """xyz points from a PLY (via :func:`trdyn.render.read_ply`) or a whitespace/CSV text file."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".ply":
            from .render import read_ply

            return read_ply(path)["xyz"]
        pts = np.loadtxt(path, delimiter="," if path.suffix.lower() == ".csv" else None, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read point cloud {path}: {exc}") from exc
    if pts.shape[1] < 3:
        raise DataError(f"point cloud {path} needs 3 columns")
    return pts[:, :3]


def sample_surface(part: PartSpec, rng) -> np.ndarray:
    n = part.particle_count
    c = np.asarray(part.center)
    if part.shape == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return c + part.radius * d
    if part.shape == "box":
        e = np.asarray(part.extent)
        areas = np.array([e[1] * e[2], e[0] * e[2], e[0] * e[1]] * 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 3)) * e
        ax = face % 3
        sign = np.where(face < 3, 0.5, -0.5)
        u[np.arange(n), ax] = sign * e[ax]
        return c + u
    pts = load_point_cloud(part.file)
    idx = rng.choice(len(pts), size=n, replace=len(pts) < n)
    return c + pts[idx]


def generate_scene(spec: SceneSpec) -> TrajectoryDataset:
    rng = np.random.default_rng(spec.seed)
    n_frames = spec.n_frames
    times = np.arange(n_frames) / spec.frame_rate
    x0s, r0s, labels, colors, scales = [], [], [], [], []
    for part in spec.parts:
        x0 = sample_surface(part, rng)
        x0s.append(x0)
        r0s.append(_random_quats(rng, part.particle_count))
        labels.append(np.full(part.particle_count, part.label))
        colors.append(np.tile(part.color, (part.particle_count, 1)))
        scales.append(np.full((part.particle_count, 3), part.particle_scale))
    N = sum(p.particle_count for p in spec.parts)
    pos = np.empty((n_frames, N, 3))
    quat = np.empty((n_frames, N, 4))
    start = 0
    for part, x0, r0 in zip(spec.parts, x0s, r0s):
        sl = slice(start, start + part.particle_count)
        for f, t in enumerate(times):
            pos[f, sl], quat[f, sl] = exact_state(part.motion, x0, r0, t)
        start += part.particle_count
    if spec.position_noise > 0.0:
        # observation noise, drawn after all geometry so noise-free draws are unchanged
        pos = pos + rng.normal(scale=spec.position_noise, size=pos.shape)
    split = int(math.floor(spec.train_fraction * n_frames))
    return TrajectoryDataset(
        times=times, positions=pos, orientations=quat if spec.emit_orientations else None,
        labels=np.concatenate(labels), split=split,
        part_motions={p.label: p.motion for p in spec.parts}, spec=spec.to_dict(),
        scales=np.concatenate(scales), colors=np.concatenate(colors), opacities=np.full(N, 0.9),
    )


# -- benchmark scenes -----------------------------------------------------------

def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return tuple(v / np.linalg.norm(v))


def benchmark_spec(name: str, n_particles: int = 600, seed: int = 0, n_frames: int = 60) -> SceneSpec:
    """Desk-scale benchmark scenes.

    ``multipart``: three parts turning about distinct axes, one of them
    speeding up.  ``indoor``: three translating parts (two accelerating)
    plus a static one.  ``fan``: a flat blade assembly spinning up about
    its normal.  ``piecewise``: two parts whose motion changes in every
    0.15 time-unit window, for the continual-learning protocol.
    """
    def split(k):
        base = [n_particles // k] * k
        base[0] += n_particles - sum(base)
        return base

    if name == "multipart":
        n = split(3)
        parts = [
            PartSpec("box", n[0], MotionSpec("rotation", axis=(0, 0, 1), point=(-0.6, 0.0, 0.0), omega0=1.2),
                     color=(0.9, 0.2, 0.2), label=0, center=(-0.35, 0.0, 0.0), extent=(0.5, 0.12, 0.3)),
            PartSpec("box", n[1], MotionSpec("rotation", axis=(1, 0, 0), point=(0.0, 0.4, 0.0), omega0=-0.8,
                                             alpha=1.5),
                     color=(0.2, 0.8, 0.2), label=1, center=(0.1, 0.4, 0.2), extent=(0.3, 0.3, 0.3)),
            PartSpec("sphere", n[2], MotionSpec("rotation", axis=_unit((0, 1, 1)), point=(0.5, -0.3, 0.0),
                                                omega0=1.6),
                     color=(0.2, 0.3, 0.9), label=2, center=(0.5, -0.3, 0.15), radius=0.2),
        ]
    elif name == "indoor":
        n = split(4)
        parts = [
            PartSpec("box", n[0], MotionSpec("const_velocity", velocity=(0.3, 0.0, 0.0)),
                     color=(0.9, 0.6, 0.1), label=0, center=(-0.6, 0.3, 0.0), extent=(0.25, 0.25, 0.25)),
            PartSpec("sphere", n[1], MotionSpec("const_accel", velocity=(0.0, -0.2, 0.0), accel=(0.0, 0.0, 0.6)),
                     color=(0.1, 0.7, 0.7), label=1, center=(0.4, 0.5, -0.2), radius=0.15),
            PartSpec("box", n[2], MotionSpec("const_accel", velocity=(-0.25, 0.1, 0.0), accel=(0.4, 0.0, 0.0)),
                     color=(0.7, 0.1, 0.7), label=2, center=(0.3, -0.4, 0.1), extent=(0.3, 0.15, 0.2)),
            PartSpec("box", n[3], MotionSpec("static"),
                     color=(0.6, 0.6, 0.6), label=3, center=(0.0, 0.0, -0.6), extent=(1.4, 1.4, 0.05)),
        ]
    elif name == "fan":
        parts = [
            PartSpec("box", n_particles, MotionSpec("rotation", axis=(0, 0, 1), point=(0.0, 0.0, 0.0),
                                                    omega0=3.0, alpha=4.0),
                     color=(0.9, 0.9, 0.3), label=0, center=(0.0, 0.0, 0.0), extent=(1.0, 0.15, 0.04)),
        ]
    elif name == "piecewise":
        n = split(2)
        # one switch per 0.15 window, alternating parts, each changing the
        # surface acceleration by about 1 m/s^2 (|alpha jump| 3 rad/s^2 at r ~ 0.3 m)
        a = MotionSpec("piecewise", segments=[
            (0.0, MotionSpec("rotation", axis=(0, 0, 1), point=(-0.3, 0.0, 0.0), omega0=1.0, alpha=0.0)),
            (0.225, MotionSpec("rotation", axis=(0, 0, 1), point=(-0.3, 0.0, 0.0), omega0=1.0, alpha=3.0)),
            (0.525, MotionSpec("rotation", axis=(0, 0, 1), point=(-0.3, 0.0, 0.0), omega0=1.9, alpha=0.0)),
            (0.825, MotionSpec("rotation", axis=(0, 0, 1), point=(-0.3, 0.0, 0.0), omega0=1.9, alpha=-3.0)),
        ])
        b = MotionSpec("piecewise", segments=[
            (0.0, MotionSpec("const_velocity", velocity=(0.0, 0.2, 0.0))),
            (0.375, MotionSpec("const_accel", velocity=(0.0, 0.2, 0.0), accel=(0.0, 0.0, 1.0))),
            (0.675, MotionSpec("const_velocity", velocity=(0.0, 0.2, 0.3))),
        ])
        parts = [
            PartSpec("box", n[0], a, color=(0.9, 0.3, 0.3), label=0, center=(-0.3, 0.3, 0.0),
                     extent=(0.4, 0.15, 0.1)),
            PartSpec("sphere", n[1], b, color=(0.3, 0.3, 0.9), label=1, center=(0.4, -0.2, 0.0), radius=0.15),
        ]
    else:
        raise ConfigError(f"unknown benchmark scene {name!r}")
    return SceneSpec(parts=parts, duration=1.0, frame_rate=float(n_frames), seed=seed, name=name)


BENCHMARKS = ("multipart", "indoor", "fan")


# -- dataset files ----------------------------------------------------------------

def write_dataset(ds: TrajectoryDataset, directory) -> Path:
    """Write ``scene.json`` and ``traj.csv`` into ``directory``."""
    if ds.n_particles == 0 or (ds.spec is not None and not ds.spec.get("parts", [None])):
        raise DataError("refusing to write a dataset without parts/particles")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "spec": ds.spec,
        "times": [float(t) for t in ds.times],
        "labels": [int(x) for x in ds.labels],
        "split": int(ds.split),
        "has_orientations": ds.has_orientations,
        "part_motions": {str(k): m.to_dict() for k, m in ds.part_motions.items()},
        "scales": ds.scales.tolist(),
        "colors": ds.colors.tolist(),
        "opacities": ds.opacities.tolist(),
    }
    (directory / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    fmt = lambda x: format(float(x), ".17g")
    lines = [",".join(CSV_HEADER)]
    for f, t in enumerate(ds.times):
        ts = fmt(t)
        for p in range(ds.n_particles):
            x = ds.positions[f, p]
            if ds.has_orientations:
                q = ",".join(fmt(v) for v in ds.orientations[f, p])
            else:
                q = ",,,"
            lines.append(f"{ts},{p},{fmt(x[0])},{fmt(x[1])},{fmt(x[2])},{q},{int(ds.labels[p])}")
    (directory / "traj.csv").write_text("\n".join(lines) + "\n")
    return directory


def read_trajectory_csv(path):
    """Parse ``traj.csv``; returns ``(times, ids, positions, orientations|None, labels)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty trajectory file") from None
        if header != CSV_HEADER:
            raise DataError(f"{path}: malformed header {header!r}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no trajectory rows")
    if any(len(r) != len(CSV_HEADER) for r in rows):
        raise DataError(f"{path}: ragged row")
    try:
        t = np.array([float(r[0]) for r in rows])
        pid = np.array([int(r[1]) for r in rows])
        xyz = np.array([[float(v) for v in r[2:5]] for r in rows])
        qraw = [r[5:9] for r in rows]
        lab = np.array([int(r[9]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    has_q = all(v != "" for v in qraw[0])
    times = np.unique(t)
    ids = np.unique(pid)
    F, N = len(times), len(ids)
    if len(rows) != F * N:
        raise DataError(f"{path}: not every particle is observed at every time")
    order = np.lexsort((pid, t))
    if not (np.array_equal(pid[order].reshape(F, N), np.tile(ids, (F, 1)))):
        raise DataError(f"{path}: duplicate (time, particle) rows")
    pos = xyz[order].reshape(F, N, 3)
    quat = None
    if has_q:
        try:
            quat = np.array([[float(v) for v in q] for q in qraw])[order].reshape(F, N, 4)
        except ValueError as exc:
            raise DataError(f"{path}: missing orientation values") from exc
    labels = lab[order].reshape(F, N)[0]
    return times, ids, pos, quat, labels


def read_dataset(directory) -> TrajectoryDataset:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "scene.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {directory / 'scene.json'}: {exc}") from exc
    missing = [k for k in ("times", "split") if k not in meta]
    if missing:
        raise DataError(f"{directory / 'scene.json'} lacks required keys {missing}")
    times, ids, pos, quat, labels = read_trajectory_csv(directory / "traj.csv")
    if not np.array_equal(ids, np.arange(len(ids))):
        raise DataError("particle ids must be 0..N-1")
    if len(meta["times"]) != len(times) or not np.array_equal(np.asarray(meta["times"]), times):
        raise DataError("scene.json times do not match traj.csv")
    motions = {int(k): MotionSpec.from_dict(v) for k, v in meta.get("part_motions", {}).items()}
    return TrajectoryDataset(
        times=times, positions=pos, orientations=quat, labels=labels, split=int(meta["split"]),
        part_motions=motions, spec=meta.get("spec"),
        scales=np.asarray(meta["scales"]) if "scales" in meta else None,
        colors=np.asarray(meta["colors"]) if "colors" in meta else None,
        opacities=np.asarray(meta["opacities"]) if "opacities" in meta else None,
    )
