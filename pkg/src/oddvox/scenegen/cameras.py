"""Pinhole cameras and ring placement around a scene."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError


@dataclass
class Camera:
    """World-to-camera pinhole model; x = K (R X + t).

    Pixel (row i, column j) covers ``[j, j+1) x [i, i+1)`` in continuous
    coordinates, so its centre is at ``(u, v) = (j + 0.5, i + 0.5)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6 or not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValidationError("camera rotation must be orthonormal with det 1")
        if self.fx <= 0 or self.fy <= 0 or self.width < 1 or self.height < 1:
            raise ValidationError("camera focal lengths and image size must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def P(self):
        """3x4 projection matrix K[R|t]."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @property
    def center(self):
        return -self.R.T @ self.t

    def world_to_camera(self, X):
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def to_dict(self):
        return {
            "K": [float(self.fx), float(self.fy), float(self.cx), float(self.cy)],
            "R": [float(x) for x in self.R.reshape(-1)],
            "t": [float(x) for x in self.t],
            "W": int(self.width),
            "H": int(self.height),
        }

    @classmethod
    def from_dict(cls, d):
        fx, fy, cx, cy = d["K"]
        return cls(fx, fy, cx, cy, np.array(d["R"]).reshape(3, 3), np.array(d["t"]), d["W"], d["H"])


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Rotation and translation of a camera at ``eye`` looking at ``target``.

    Camera axes: x right, y down, z forward.
    """
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        raise ValidationError("look-at direction is parallel to the up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


@dataclass
class CameraConfig:
    radius: float = 2.2
    elevation_deg: float = 35.0
    azimuth0_deg: float = 0.0
    azimuth_jitter_deg: float = 10.0
    image_size: int = 64
    fov_deg: float = 50.0
    margin_px: float = 2.0


def fit_focal(cams_Rt, points, width, height, margin_px):
    """Largest focal length keeping every point inside every image."""
    best = math.inf
    half = min(width, height) / 2 - margin_px
    for R, t in cams_Rt:
        pc = points @ R.T + t
        if np.any(pc[:, 2] <= 1e-6):
            raise ValidationError("scene content lies behind a camera; increase the ring radius")
        slope = np.abs(pc[:, :2] / pc[:, 2:3]).max()
        best = min(best, half / max(slope, 1e-9))
    return best


def sample_cameras(M, config=None, seed=0, center=(0.0, 0.0, 0.0), fit_points=None):
    """Place ``M`` cameras on a ring above ``center``, all looking at it.

    Azimuths are evenly spaced starting at ``azimuth0_deg`` with a seeded
    uniform jitter. With ``fit_points`` the shared focal length is the
    largest that keeps all of them in every frame; otherwise ``fov_deg``.
    """
    if M < 1:
        raise ValidationError(f"need at least one camera, got M={M}")
    cfg = config or CameraConfig()
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)
    elev = math.radians(cfg.elevation_deg)
    jitter = rng.uniform(-cfg.azimuth_jitter_deg, cfg.azimuth_jitter_deg, size=M)
    poses = []
    for k in range(M):
        az = math.radians(cfg.azimuth0_deg + 360.0 * k / M + jitter[k])
        offset = cfg.radius * np.array([math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev)])
        poses.append(look_at(center + offset, center))
    size = cfg.image_size
    if fit_points is not None:
        f = fit_focal(poses, np.asarray(fit_points, dtype=np.float64), size, size, cfg.margin_px)
    else:
        f = (size / 2) / math.tan(math.radians(cfg.fov_deg) / 2)
    return [Camera(f, f, size / 2, size / 2, R, t, size, size) for R, t in poses]


def camera_azimuth(camera, center=(0.0, 0.0, 0.0)):
    """Azimuth in degrees of the camera centre around ``center``."""
    d = camera.center - np.asarray(center)
    return math.degrees(math.atan2(d[1], d[0]))
