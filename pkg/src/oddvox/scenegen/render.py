"""Sphere-traced rendering of a scene's SDF with Lambertian shading."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenes import rot_z
from .shapes import bound_radius, sdf_eval

BACKGROUND = 0.15
AMBIENT = 0.2
MAX_STEPS = 128
HIT_EPS = 1e-4
LIGHT_DIR = (0.35, -0.45, 0.82)
# beyond this distance from a bounding sphere, the sphere bound is used as the step
_NEAR_BOUND = 0.05


@dataclass
class RenderedView:
    rgb: np.ndarray  # [H, W, 3] in [0, 1]
    depth: np.ndarray  # [H, W] camera-frame z, 0 where the ray missed
    camera: object


class _SceneField:
    """Union of posed instance SDFs with bounding-sphere culling."""

    def __init__(self, instances):
        self.shapes = [inst.shape for inst in instances]
        self.pos = [np.asarray(inst.position, dtype=np.float64) for inst in instances]
        self.rot = [rot_z(inst.yaw) for inst in instances]
        self.radius = [bound_radius(s) for s in self.shapes]

    def __len__(self):
        return len(self.shapes)

    def local(self, k, p):
        # world -> local is R^T (p - pos); as row vectors that is (p - pos) @ R
        return (p - self.pos[k]) @ self.rot[k]

    def eval(self, p):
        best = np.full(len(p), np.inf)
        which = np.full(len(p), -1, dtype=np.int64)
        for k in range(len(self)):
            q = self.local(k, p)
            d = np.linalg.norm(q, axis=1) - self.radius[k]
            near = d < _NEAR_BOUND
            if near.any():
                d[near] = sdf_eval(self.shapes[k], q[near])
            closer = d < best
            best[closer] = d[closer]
            which[closer] = k
        return best, which

    def normal(self, k, p, h=2e-4):
        q = self.local(k, p)
        grads = []
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            grads.append(sdf_eval(self.shapes[k], q + e) - sdf_eval(self.shapes[k], q - e))
        n_local = np.stack(grads, axis=1)
        n_local /= np.maximum(np.linalg.norm(n_local, axis=1, keepdims=True), 1e-12)
        return n_local @ self.rot[k].T


def camera_rays(camera):
    """Unit world-space ray directions ``[H*W, 3]`` and their camera-z components."""
    jj, ii = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    d_cam = np.stack([(jj - camera.cx) / camera.fx, (ii - camera.cy) / camera.fy, np.ones_like(jj)], -1).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    return d_cam @ camera.R, d_cam[:, 2]


def _slab(origin, dirs, lo, hi):
    """Entry/exit distances of rays through an axis-aligned box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    return np.maximum(tmin, 0.0), tmax


def render_view(scene, camera, light_dir=LIGHT_DIR, ambient=AMBIENT, background=BACKGROUND, clamp=True):
    """Raymarch every pixel of ``camera`` through ``scene.instances``.

    Shading is ``albedo * (ambient + (1 - ambient) * max(0, n . l))`` for a
    fixed world-space light direction; misses get the background grey and
    depth 0. With ``clamp=False`` the shaded colour is returned unclipped.
    """
    H, W = camera.height, camera.width
    rgb = np.full((H * W, 3), background, dtype=np.float64)
    depth = np.zeros(H * W, dtype=np.float64)
    instances = list(scene.instances)
    if not instances:
        return RenderedView(rgb.reshape(H, W, 3), depth.reshape(H, W), camera)

    field = _SceneField(instances)
    dirs, dz = camera_rays(camera)
    origin = camera.center
    lo = np.min([p - r for p, r in zip(field.pos, field.radius)], axis=0)
    hi = np.max([p + r for p, r in zip(field.pos, field.radius)], axis=0)
    t, t_exit = _slab(origin, dirs, lo, hi)
    active = np.nonzero(t < t_exit)[0]
    t = t.copy()
    hit_obj = np.full(H * W, -1, dtype=np.int64)
    for _ in range(MAX_STEPS):
        if len(active) == 0:
            break
        p = origin + t[active, None] * dirs[active]
        dist, which = field.eval(p)
        hit = dist < HIT_EPS
        hit_obj[active[hit]] = which[hit]
        t[active] += np.where(hit, 0.0, dist)
        keep = ~hit & (t[active] <= t_exit[active])
        active = active[keep]

    light = np.asarray(light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    for k in range(len(field)):
        pix = np.nonzero(hit_obj == k)[0]
        if len(pix) == 0:
            continue
        p = origin + t[pix, None] * dirs[pix]
        n = field.normal(k, p)
        shade = ambient + (1.0 - ambient) * np.maximum(n @ light, 0.0)
        rgb[pix] = shade[:, None] * np.asarray(field.shapes[k].albedo)[None]
        depth[pix] = t[pix] * dz[pix]
    if clamp:
        rgb = np.clip(rgb, 0.0, 1.0)
    return RenderedView(rgb.reshape(H, W, 3), depth.reshape(H, W), camera)


def render_scene(scene, cameras=None, **kwargs):
    """Render ``scene`` from each of its cameras (or the given ones)."""
    return [render_view(scene, cam, **kwargs) for cam in (cameras or scene.cameras)]
