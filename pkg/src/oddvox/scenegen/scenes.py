"""Scene layout: N copies of one base shape, a minority of them edited."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, GenerationError, ValidationError
from ..geometry import ObjectBox3D
from .anomalies import ANOMALY_TYPES, DEFAULT_RANGES, AnomalyType, inject_anomaly
from .cameras import Camera, CameraConfig, sample_cameras
from .shapes import SHAPE_KINDS, PrimitiveShape, interior_samples, padded_bounds, random_shape

PLACEMENT_TRIES = 1000


@dataclass
class SceneConfig:
    n_objects: tuple[int, int] = (3, 6)
    n_anomalies: tuple[int, int] = (1, 1)
    anomaly_types: tuple[str, ...] = tuple(t.value for t in ANOMALY_TYPES)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    size_range: tuple[float, float] = (0.12, 0.2)
    yaw_range_deg: float = 360.0
    cell_spacing: float = 0.3
    position_jitter: float = 0.04
    bounds_min: tuple[float, float, float] = (-0.96, -0.96, 0.0)
    bounds_max: tuple[float, float, float] = (0.96, 0.96, 0.32)
    num_views: int = 5
    camera: CameraConfig = field(default_factory=CameraConfig)
    anomaly_ranges: dict = field(default_factory=dict)

    def validate(self):
        lo, hi = self.n_objects
        if not 3 <= lo <= hi <= 12:
            raise ConfigError(f"n_objects must satisfy 3 <= min <= max <= 12, got {self.n_objects}")
        a_lo, a_hi = self.n_anomalies
        if not 1 <= a_lo <= a_hi or not a_hi < lo / 2:
            raise ConfigError(
                f"n_anomalies {self.n_anomalies} must be >= 1 and below half the smallest object count {lo}"
            )
        for t in self.anomaly_types:
            if t not in {a.value for a in ANOMALY_TYPES}:
                raise ConfigError(f"unknown anomaly type {t!r}")
        if not self.anomaly_types:
            raise ConfigError("anomaly_types must not be empty")
        for k in self.shape_kinds:
            if k not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape kind {k!r}")
        for k in self.anomaly_ranges:
            if k not in DEFAULT_RANGES:
                raise ConfigError(f"unknown anomaly range {k!r}")
        if self.num_views < 1:
            raise ConfigError("num_views must be >= 1")


@dataclass
class Instance:
    position: tuple
    yaw: float
    anomaly: AnomalyType
    shape: PrimitiveShape
    box: ObjectBox3D
    anomaly_params: dict = field(default_factory=dict)

    @property
    def label(self):
        return int(self.anomaly is not AnomalyType.NONE)

    def to_dict(self):
        return {
            "position": [float(x) for x in self.position],
            "yaw": float(self.yaw),
            "anomaly": self.anomaly.value,
            "label": self.label,
            "shape": self.shape.to_dict(),
            "box": self.box.to_dict(),
            "anomaly_params": self.anomaly_params,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["position"]),
            d["yaw"],
            AnomalyType(d["anomaly"]),
            PrimitiveShape.from_dict(d["shape"]),
            ObjectBox3D.from_dict(d["box"]),
            d["anomaly_params"],
        )


@dataclass
class SceneSpec:
    scene_id: int
    seed: int
    base_shape: PrimitiveShape
    instances: list
    cameras: list
    bounds: ObjectBox3D

    @property
    def name(self):
        return f"scene_{self.scene_id:04d}"

    @property
    def labels(self):
        return [inst.label for inst in self.instances]

    @property
    def boxes(self):
        return [inst.box for inst in self.instances]

    @property
    def anomaly_types(self):
        return [inst.anomaly.value for inst in self.instances]

    def validate(self):
        n = len(self.instances)
        if not 3 <= n <= 12:
            raise ValidationError(f"scene needs 3-12 instances, has {n}")
        k = sum(self.labels)
        if not 1 <= k < n / 2:
            raise ValidationError(f"scene has {k} anomalous of {n} instances")
        for i in range(n):
            for j in range(i + 1, n):
                if self.instances[i].box.overlaps(self.instances[j].box):
                    raise ValidationError(f"instance boxes {i} and {j} overlap")

    def to_dict(self):
        return {
            "scene_id": self.scene_id,
            "seed": self.seed,
            "base_shape": self.base_shape.to_dict(),
            "instances": [inst.to_dict() for inst in self.instances],
            "cameras": [c.to_dict() for c in self.cameras],
            "bounds": self.bounds.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["scene_id"],
            d["seed"],
            PrimitiveShape.from_dict(d["base_shape"]),
            [Instance.from_dict(x) for x in d["instances"]],
            [Camera.from_dict(c) for c in d["cameras"]],
            ObjectBox3D.from_dict(d["bounds"]),
        )


def rot_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def world_box(shape, position, yaw, resolution=40):
    """Axis-aligned world box of a posed shape, from sampled interior points."""
    inside, step = interior_samples(shape, resolution)
    pts = inside @ rot_z(yaw).T + np.asarray(position)
    lo, hi = padded_bounds(pts, step)
    return ObjectBox3D(tuple(float(x) for x in lo), tuple(float(x) for x in hi))


def scene_seed(master_seed, scene_id):
    """Independent per-scene seed, identical however scenes are scheduled."""
    return int(np.random.SeedSequence([master_seed, scene_id]).generate_state(1)[0])


def generate_scene(seed, config=None, scene_id=0):
    """Lay out one scene; rendering is separate (see :func:`render_scene`)."""
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    k = int(rng.integers(cfg.n_anomalies[0], cfg.n_anomalies[1] + 1))
    base = random_shape(rng, cfg.shape_kinds, cfg.size_range)
    anomalous = set(int(i) for i in rng.choice(n, size=k, replace=False))
    shapes, kinds, params = [], [], []
    for i in range(n):
        if i in anomalous:
            kind = AnomalyType(str(rng.choice(list(cfg.anomaly_types))))
            shape, prm = inject_anomaly(base, kind, int(rng.integers(2**32)), cfg.anomaly_ranges)
        else:
            kind, shape, prm = AnomalyType.NONE, base, {}
        shapes.append(shape)
        kinds.append(kind)
        params.append(prm)
    yaws = rng.uniform(0, math.radians(cfg.yaw_range_deg), size=n)
    boxes_local = [world_box(s, (0.0, 0.0, 0.0), y) for s, y in zip(shapes, yaws)]

    bounds = ObjectBox3D(cfg.bounds_min, cfg.bounds_max)
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    cells = [((c - (cols - 1) / 2) * cfg.cell_spacing, (r - (rows - 1) / 2) * cfg.cell_spacing) for r in range(rows) for c in range(cols)]
    for _ in range(PLACEMENT_TRIES):
        chosen = rng.permutation(len(cells))[:n]
        jitter = rng.uniform(-cfg.position_jitter, cfg.position_jitter, size=(n, 2))
        instances = []
        for i in range(n):
            bl = boxes_local[i]
            x, y = np.asarray(cells[chosen[i]]) + jitter[i]
            z = cfg.bounds_min[2] + 0.005 - bl.min[2]  # rest on the floor of the bounds
            pos = (float(x), float(y), float(z))
            box = ObjectBox3D(tuple(np.add(bl.min, pos)), tuple(np.add(bl.max, pos)))
            instances.append(Instance(pos, float(yaws[i]), kinds[i], shapes[i], box, params[i]))
        if _placement_ok(instances, bounds):
            break
    else:
        raise GenerationError(
            f"could not place {n} non-overlapping instances inside bounds after {PLACEMENT_TRIES} tries; "
            "enlarge bounds_min/bounds_max or cell_spacing"
        )

    corners = np.concatenate([inst.box.corners() for inst in instances])
    center = 0.5 * (corners.min(axis=0) + corners.max(axis=0))
    cameras = sample_cameras(cfg.num_views, cfg.camera, int(rng.integers(2**32)), center=center, fit_points=corners)
    spec = SceneSpec(scene_id, int(seed), base, instances, cameras, bounds)
    spec.validate()
    return spec


def _placement_ok(instances, bounds):
    for i, a in enumerate(instances):
        if not bounds.contains_box(a.box):
            return False
        for b in instances[i + 1 :]:
            if a.box.overlaps(b.box):
                return False
    return True
