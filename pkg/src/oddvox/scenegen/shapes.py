"""Procedural shapes described by signed distance functions.

A :class:`PrimitiveShape` is either an analytic primitive or a union of
rigidly placed children. Anomalies are layered on top as SDF edits
(stretch, bumps, cuts, slice shifts) so the base description stays intact.
All distances are meters; all primitives are centred on the local origin
with z as the vertical axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError

PRIMITIVE_KINDS = ("sphere", "box", "cylinder", "capsule", "torus")
SHAPE_KINDS = PRIMITIVE_KINDS + ("composite",)

_REQUIRED = {
    "sphere": ("radius",),
    "box": ("hx", "hy", "hz"),
    "cylinder": ("radius", "half_height"),
    "capsule": ("radius", "half_height"),
    "torus": ("major", "minor"),
    "composite": (),
}


@dataclass
class Child:
    shape: "PrimitiveShape"
    offset: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    scale: float = 1.0

    def to_dict(self):
        return {"shape": self.shape.to_dict(), "offset": list(self.offset), "yaw": self.yaw, "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(PrimitiveShape.from_dict(d["shape"]), tuple(d["offset"]), d["yaw"], d["scale"])


@dataclass
class PrimitiveShape:
    kind: str
    params: dict = field(default_factory=dict)
    albedo: tuple = (0.8, 0.8, 0.8)
    children: list = field(default_factory=list)
    # anomaly edits, applied in this order after the base SDF
    shifts: list = field(default_factory=list)  # {"z": z0, "delta": [dx, dy, dz]}
    stretch: tuple = (1.0, 1.0, 1.0)
    bumps: list = field(default_factory=list)  # {"center": [...], "radius": r}
    cuts: list = field(default_factory=list)  # halfspace {"normal", "offset"} | box {"center", "half"}

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in SHAPE_KINDS:
            raise ValidationError(f"unknown shape kind {self.kind!r}")
        for key in _REQUIRED[self.kind]:
            if not self.params.get(key, 0) > 0:
                raise ValidationError(f"{self.kind} needs positive {key!r}, got {self.params.get(key)}")
        if self.kind == "torus" and self.params["minor"] >= self.params["major"]:
            raise ValidationError("torus minor radius must be smaller than the major radius")
        if self.kind == "composite" and not 1 <= len(self.children) <= 5:
            raise ValidationError(f"composite needs 1-5 children, got {len(self.children)}")
        if min(self.stretch) <= 0:
            raise ValidationError("stretch factors must be positive")
        if any(not 0 <= a <= 1 for a in self.albedo):
            raise ValidationError(f"albedo must lie in [0, 1], got {self.albedo}")

    def to_dict(self):
        return {
            "kind": self.kind,
            "params": dict(self.params),
            "albedo": list(self.albedo),
            "children": [c.to_dict() for c in self.children],
            "shifts": [dict(s) for s in self.shifts],
            "stretch": list(self.stretch),
            "bumps": [dict(b) for b in self.bumps],
            "cuts": [dict(c) for c in self.cuts],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            params=dict(d["params"]),
            albedo=tuple(d["albedo"]),
            children=[Child.from_dict(c) for c in d["children"]],
            shifts=[dict(s) for s in d["shifts"]],
            stretch=tuple(d["stretch"]),
            bumps=[dict(b) for b in d["bumps"]],
            cuts=[dict(c) for c in d["cuts"]],
        )


def _rot_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _primitive_sdf(kind, prm, p):
    if kind == "sphere":
        return np.linalg.norm(p, axis=-1) - prm["radius"]
    if kind == "box":
        q = np.abs(p) - np.array([prm["hx"], prm["hy"], prm["hz"]])
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)
    if kind == "cylinder":
        d = np.stack([np.linalg.norm(p[..., :2], axis=-1) - prm["radius"], np.abs(p[..., 2]) - prm["half_height"]], -1)
        return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    if kind == "capsule":
        hh = prm["half_height"]
        q = p.copy()
        q[..., 2] = p[..., 2] - np.clip(p[..., 2], -hh, hh)
        return np.linalg.norm(q, axis=-1) - prm["radius"]
    if kind == "torus":
        q = np.stack([np.linalg.norm(p[..., :2], axis=-1) - prm["major"], p[..., 2]], -1)
        return np.linalg.norm(q, axis=-1) - prm["minor"]
    raise ValidationError(f"not a primitive: {kind}")


def _base_sdf(shape, p):
    if shape.kind != "composite":
        return _primitive_sdf(shape.kind, shape.params, p)
    out = None
    for child in shape.children:
        local = (p - np.asarray(child.offset)) @ _rot_z(child.yaw) / child.scale
        d = sdf_eval(child.shape, local) * child.scale
        out = d if out is None else np.minimum(out, d)
    return out


def _shifted_sdf(shape, p):
    d = _base_sdf(shape, p)
    for s in shape.shifts:
        z0, delta = s["z"], np.asarray(s["delta"])
        moved = _base_sdf(shape, p - delta)
        lower = np.maximum(d, p[..., 2] - z0)
        upper = np.maximum(moved, z0 - p[..., 2])
        d = np.minimum(lower, upper)
    return d


def sdf_eval(shape, p):
    """Signed distance (negative inside) of ``shape`` at points ``p [..., 3]``.

    The result is a Lipschitz-1 lower bound of the true distance, exact for
    unedited primitives.
    """
    p = np.asarray(p, dtype=np.float64)
    s = np.asarray(shape.stretch, dtype=np.float64)
    if np.all(s == 1.0):
        d = _shifted_sdf(shape, p)
    else:
        d = _shifted_sdf(shape, p / s) * s.min()
    for b in shape.bumps:
        d = np.minimum(d, np.linalg.norm(p - np.asarray(b["center"]), axis=-1) - b["radius"])
    for c in shape.cuts:
        if c["kind"] == "halfspace":
            removed = c["offset"] - p @ np.asarray(c["normal"])
        else:
            removed = _primitive_sdf("box", dict(zip(("hx", "hy", "hz"), c["half"])), p - np.asarray(c["center"]))
        d = np.maximum(d, -removed)
    return d


def bound_radius(shape):
    """Radius of a sphere around the local origin that contains the shape."""
    prm = shape.params
    if shape.kind == "sphere":
        r = prm["radius"]
    elif shape.kind == "box":
        r = math.sqrt(prm["hx"] ** 2 + prm["hy"] ** 2 + prm["hz"] ** 2)
    elif shape.kind in ("cylinder",):
        r = math.hypot(prm["radius"], prm["half_height"])
    elif shape.kind == "capsule":
        r = prm["half_height"] + prm["radius"]
    elif shape.kind == "torus":
        r = prm["major"] + prm["minor"]
    else:
        r = max(np.linalg.norm(c.offset) + c.scale * bound_radius(c.shape) for c in shape.children)
    r += max((np.linalg.norm(s["delta"]) for s in shape.shifts), default=0.0)
    r *= max(shape.stretch)
    for b in shape.bumps:
        r = max(r, float(np.linalg.norm(b["center"])) + b["radius"])
    return float(r)


def interior_samples(shape, resolution=40):
    """Lattice points inside the solid and the lattice spacing."""
    r = bound_radius(shape) * 1.02
    axis = np.linspace(-r, r, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    inside = grid[sdf_eval(shape, grid) <= 0]
    if len(inside) == 0:
        raise ValidationError("shape has no interior at the sampling resolution")
    return inside, float(axis[1] - axis[0])


def padded_bounds(points, step, pad_frac=0.02):
    """Bounds of sampled interior points grown by one spacing plus ``pad_frac``.

    A surface point lies within one lattice spacing of some interior sample
    along each axis, so the result encloses the true solid.
    """
    lo, hi = points.min(axis=0) - step, points.max(axis=0) + step
    pad = pad_frac * (hi - lo)
    return lo - pad, hi + pad


def local_extent(shape, resolution=40, pad_frac=0.02):
    """Axis-aligned bounds ``(lo, hi)`` of the solid in its own frame."""
    inside, step = interior_samples(shape, resolution)
    return padded_bounds(inside, step, pad_frac)


def object_scale(shape):
    """Largest side of the shape's bounding box (meters)."""
    lo, hi = local_extent(shape, resolution=24)
    return float((hi - lo).max())


def monte_carlo_volume(shape, n=100_000, seed=0):
    r = bound_radius(shape) * 1.02
    pts = np.random.default_rng(seed).uniform(-r, r, size=(n, 3))
    return float((sdf_eval(shape, pts) <= 0).mean() * (2 * r) ** 3)


def random_shape(rng, kinds=SHAPE_KINDS, size_range=(0.14, 0.22)):
    """Draw a base shape whose largest side is roughly within ``size_range``."""
    kind = str(rng.choice(list(kinds)))
    size = float(rng.uniform(*size_range))
    albedo = tuple(float(a) for a in rng.uniform(0.45, 0.95, size=3))
    h = size / 2
    if kind == "sphere":
        return PrimitiveShape("sphere", {"radius": h}, albedo)
    if kind == "box":
        dims = rng.uniform(0.55, 1.0, size=3) * h
        dims[int(rng.integers(3))] = h
        return PrimitiveShape("box", {"hx": dims[0], "hy": dims[1], "hz": dims[2]}, albedo)
    if kind == "cylinder":
        return PrimitiveShape("cylinder", {"radius": h * rng.uniform(0.5, 1.0), "half_height": h * rng.uniform(0.6, 1.0)}, albedo)
    if kind == "capsule":
        r = h * rng.uniform(0.35, 0.55)
        return PrimitiveShape("capsule", {"radius": r, "half_height": h - r}, albedo)
    if kind == "torus":
        minor = h * rng.uniform(0.25, 0.4)
        return PrimitiveShape("torus", {"major": h - minor, "minor": minor}, albedo)
    return _random_composite(rng, h, albedo)


def _random_composite(rng, h, albedo):
    """A small 'toy': a body with 1-4 attached parts (head, arms, base...)."""
    body_kind = str(rng.choice(["box", "cylinder", "capsule", "sphere"]))
    bh = h * 0.55
    if body_kind == "box":
        body = PrimitiveShape("box", {"hx": bh * 0.8, "hy": bh * 0.6, "hz": bh}, albedo)
    elif body_kind == "cylinder":
        body = PrimitiveShape("cylinder", {"radius": bh * 0.7, "half_height": bh}, albedo)
    elif body_kind == "capsule":
        body = PrimitiveShape("capsule", {"radius": bh * 0.6, "half_height": bh * 0.5}, albedo)
    else:
        body = PrimitiveShape("sphere", {"radius": bh * 0.9}, albedo)
    children = [Child(body, (0.0, 0.0, -h * 0.3))]
    n_parts = int(rng.integers(1, 5))
    slots = [
        ((0.0, 0.0, h * 0.55), "sphere"),
        ((h * 0.7, 0.0, -h * 0.2), "capsule"),
        ((-h * 0.7, 0.0, -h * 0.2), "capsule"),
        ((0.0, h * 0.55, -h * 0.35), "box"),
    ]
    order = rng.permutation(len(slots))[:n_parts]
    for i in sorted(order):
        offset, kind = slots[i]
        r = h * rng.uniform(0.22, 0.32)
        if kind == "sphere":
            part = PrimitiveShape("sphere", {"radius": r}, albedo)
        elif kind == "capsule":
            part = PrimitiveShape("capsule", {"radius": r * 0.5, "half_height": r * 0.8}, albedo)
        else:
            part = PrimitiveShape("box", {"hx": r * 0.8, "hy": r * 0.6, "hz": r * 0.6}, albedo)
        children.append(Child(part, offset))
    return PrimitiveShape("composite", {}, albedo, children=children)
