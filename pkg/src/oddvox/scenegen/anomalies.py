"""Anomaly types and their injection as SDF / albedo edits."""

from __future__ import annotations

import copy
import enum

import numpy as np

from ..errors import ValidationError
from .shapes import bound_radius, object_scale, sdf_eval


class AnomalyType(str, enum.Enum):
    NONE = "none"
    MATERIAL = "material"
    BUMP = "bump"
    FRACTURE = "fracture"
    MISSING_PART = "missing_part"
    TRANSLATION = "translation"
    DEFORMATION = "deformation"


ANOMALY_TYPES = tuple(t for t in AnomalyType if t is not AnomalyType.NONE)

# magnitude ranges; invented, so exposed for configuration
DEFAULT_RANGES = {
    "material_factor": (0.3, 0.7),
    "bump_radius": (0.05, 0.15),
    "fracture_fraction": (0.10, 0.25),
    "translation_fraction": (0.10, 0.30),
    "deformation_low": (0.6, 0.85),
    "deformation_high": (1.15, 1.4),
    "missing_box_fraction": (0.3, 0.45),
}

_MC_POINTS = 100_000
_FRACTURE_MARGIN = 0.015


def _unit(rng, min_z=-1.0):
    while True:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if v[2] >= min_z:
            return v


def surface_point(shape, rng, min_z=-0.2, tries=64):
    """March from outside toward the centre along a random direction."""
    r = bound_radius(shape) * 1.05 + 0.01
    for _ in range(tries):
        u = _unit(rng, min_z)
        t, origin, direction = 0.0, u * r, -u
        for _ in range(256):
            p = origin + t * direction
            d = float(sdf_eval(shape, p))
            if d < 1e-6:
                return p
            t += d
            if t > 2 * r:
                break
    raise ValidationError("could not find a surface point on the shape")


def _horizontal(rng):
    a = rng.uniform(0, 2 * np.pi)
    return np.array([np.cos(a), np.sin(a), 0.0])


def inject_anomaly(shape, anomaly_type, seed, ranges=None):
    """Return ``(edited_shape, params)``; the input shape is not modified.

    ``params`` records the drawn magnitudes so they can be logged per scene.
    """
    anomaly_type = AnomalyType(anomaly_type)
    if anomaly_type is AnomalyType.NONE:
        raise ValidationError("inject_anomaly needs an anomaly type other than 'none'")
    rng = np.random.default_rng(seed)
    rg = dict(DEFAULT_RANGES, **(ranges or {}))
    out = copy.deepcopy(shape)
    kind = anomaly_type.value

    if anomaly_type is AnomalyType.MATERIAL:
        f = float(rng.uniform(*rg["material_factor"]))
        out.albedo = tuple(float(a * f) for a in shape.albedo)
        _recolor(out, f)
        params = {"factor": f}

    elif anomaly_type is AnomalyType.BUMP:
        frac = float(rng.uniform(*rg["bump_radius"]))
        c = surface_point(shape, rng)
        radius = frac * object_scale(shape)
        out.bumps.append({"center": [float(x) for x in c], "radius": radius})
        params = {"radius_fraction": frac, "radius": radius, "center": [float(x) for x in c]}

    elif anomaly_type is AnomalyType.FRACTURE:
        lo, hi = rg["fracture_fraction"]
        # keep clear of the range ends so sampling noise cannot leave it
        target = float(rng.uniform(lo + _FRACTURE_MARGIN, hi - _FRACTURE_MARGIN))
        n = _unit(rng, min_z=0.0)
        r = bound_radius(shape) * 1.02
        pts = rng.uniform(-r, r, size=(_MC_POINTS, 3))
        proj = pts[sdf_eval(shape, pts) <= 0] @ n
        # removed fraction is monotone in the offset, so the quantile hits it
        offset = float(np.quantile(proj, 1.0 - target))
        out.cuts.append({"kind": "halfspace", "normal": [float(x) for x in n], "offset": offset})
        params = {"target_fraction": target, "normal": [float(x) for x in n], "offset": offset}

    elif anomaly_type is AnomalyType.MISSING_PART:
        if shape.kind == "composite" and len(shape.children) >= 2:
            idx = int(rng.integers(1, len(shape.children)))
            del out.children[idx]
            params = {"mode": "remove_child", "child": idx}
        else:
            c = surface_point(shape, rng, min_z=0.0)
            frac = float(rng.uniform(*rg["missing_box_fraction"]))
            half = [frac * object_scale(shape)] * 3
            out.cuts.append({"kind": "box", "center": [float(x) for x in c], "half": half})
            params = {"mode": "box", "center": [float(x) for x in c], "half": half}

    elif anomaly_type is AnomalyType.TRANSLATION:
        frac = float(rng.uniform(*rg["translation_fraction"]))
        direction = _horizontal(rng)
        if shape.kind == "composite" and len(shape.children) >= 2:
            idx = int(rng.integers(1, len(shape.children)))
            child = out.children[idx]
            extent = 2 * bound_radius(child.shape) * child.scale
            delta = direction * frac * extent
            child.offset = tuple(float(a + b) for a, b in zip(child.offset, delta))
            params = {"mode": "child", "child": idx, "fraction": frac, "delta": [float(x) for x in delta]}
        else:
            extent = object_scale(shape)
            delta = direction * frac * extent
            out.shifts.append({"z": 0.0, "delta": [float(x) for x in delta]})
            params = {"mode": "slice", "fraction": frac, "delta": [float(x) for x in delta]}

    else:  # deformation
        axis = int(rng.integers(3))
        lo, hi = rg["deformation_low"], rg["deformation_high"]
        w_lo, w_hi = lo[1] - lo[0], hi[1] - hi[0]
        u = rng.uniform(0, w_lo + w_hi)
        factor = float(lo[0] + u if u < w_lo else hi[0] + (u - w_lo))
        s = [1.0, 1.0, 1.0]
        s[axis] = factor
        out.stretch = tuple(a * b for a, b in zip(shape.stretch, s))
        params = {"axis": axis, "factor": factor}

    out.validate()
    return out, {"type": kind, **params}


def _recolor(shape, f):
    for child in shape.children:
        child.shape.albedo = tuple(float(a * f) for a in child.shape.albedo)
        _recolor(child.shape, f)
