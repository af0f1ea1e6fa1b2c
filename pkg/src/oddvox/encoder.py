"""Frozen 2D feature encoders producing per-view patch feature maps.

``pseudo_patch`` stands in for a pretrained ViT: each ``stride x stride``
patch is flattened, centred, projected by a fixed seeded orthonormal matrix
and squashed by ``tanh``. Nothing here is trainable.

External feature files (``kind="external"``) live next to a dataset as
``<feature_dir>/<scene_name>/view_<k>.bin`` with a JSON sidecar
``view_<k>.json`` holding ``{"dims": [d, h, w], "dtype": "float32",
"stride": s}``; the binary is the C-order little-endian array.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import jsonio
from .errors import ConfigError, DatasetError, DimensionError

ENCODER_KINDS = ("pseudo_patch", "identity_gray", "external")


@dataclass
class EncoderSpec:
    kind: str = "pseudo_patch"
    patch_stride: int = 14
    out_dim: int = 64
    seed: int = 0
    scale: float = 2.0
    feature_dir: str = ""

    def validate(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.patch_stride < 1:
            raise ConfigError("patch_stride must be >= 1")
        if self.out_dim < 1:
            raise ConfigError("out_dim must be >= 1")
        if self.kind == "identity_gray" and self.out_dim != 1:
            raise ConfigError("identity_gray produces a single channel; set out_dim to 1")
        if self.kind == "external" and not self.feature_dir:
            raise ConfigError("external encoder needs feature_dir")


def pad_to_stride(image, stride):
    """Reflect-pad the bottom and right edges up to a multiple of ``stride``.

    Padding only at the far edges keeps patch ``(a, b)`` centred at image
    pixel ``((b + 0.5) s, (a + 0.5) s)``.
    """
    H, W = image.shape[:2]
    ph, pw = (-H) % stride, (-W) % stride
    if ph == 0 and pw == 0:
        return image
    mode = "reflect" if ph < H and pw < W else "symmetric"
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode)


def patchify(image, stride):
    """``[H, W, 3]`` -> ``[h, w, 3 * stride**2]`` patch vectors."""
    img = pad_to_stride(np.asarray(image, dtype=np.float64), stride)
    H, W, C = img.shape
    h, w = H // stride, W // stride
    return img.reshape(h, stride, w, stride, C).transpose(0, 2, 1, 3, 4).reshape(h, w, stride * stride * C)


def projection_matrix(out_dim, in_dim, seed):
    """Seeded matrix with orthonormal rows (or columns when ``out_dim > in_dim``)."""
    rng = np.random.default_rng([seed, out_dim, in_dim])
    a = rng.normal(size=(max(out_dim, in_dim), min(out_dim, in_dim)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.T if out_dim <= in_dim else q


class Encoder:
    """Callable frozen encoder; ``encode(image)`` returns ``[d, h, w]`` float32."""

    def __init__(self, spec=None):
        self.spec = spec or EncoderSpec()
        self.spec.validate()
        s = self.spec
        self._proj = projection_matrix(s.out_dim, 3 * s.patch_stride**2, s.seed) if s.kind == "pseudo_patch" else None

    @property
    def out_dim(self):
        return self.spec.out_dim

    @property
    def stride(self):
        return self.spec.patch_stride

    def parameters(self):
        return []

    def encode(self, image):
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionError(f"encoder expects an [H, W, 3] image, got {image.shape}")
        patches = patchify(image, self.stride)
        if self.spec.kind == "identity_gray":
            return patches.mean(axis=-1)[None].astype(np.float32)
        if self.spec.kind == "pseudo_patch":
            z = (patches - 0.5) @ self._proj.T
            return np.tanh(self.spec.scale * z).transpose(2, 0, 1).astype(np.float32)
        raise ConfigError("external features are read per scene; use encode_scene")

    def encode_scene(self, scene):
        """Feature maps for every view of a dataset scene."""
        if self.spec.kind == "external":
            root = Path(self.spec.feature_dir) / scene.name
            return [read_feature_file(root / f"view_{k}", self.spec) for k in range(len(scene.views))]
        return [self.encode(img) for img in scene.images]


def write_feature_file(stem, array, stride):
    """Write one external feature map (``stem.bin`` + ``stem.json``)."""
    array = np.ascontiguousarray(array, dtype="<f4")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".bin").write_bytes(array.tobytes())
    jsonio.dump({"dims": list(array.shape), "dtype": "float32", "stride": int(stride)}, stem.with_suffix(".json"))


def read_feature_file(stem, spec):
    stem = Path(stem)
    try:
        meta = jsonio.load(stem.with_suffix(".json"))
        raw = stem.with_suffix(".bin").read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"missing external feature file {exc.filename}") from exc
    if meta.get("dtype") != "float32" or len(meta.get("dims", [])) != 3:
        raise DatasetError(f"{stem}.json: expected float32 [d, h, w] features, got {meta}")
    if meta.get("stride") != spec.patch_stride:
        raise DatasetError(f"{stem}.json: stride {meta.get('stride')} differs from encoder stride {spec.patch_stride}")
    d, h, w = meta["dims"]
    if d != spec.out_dim:
        raise DatasetError(f"{stem}.json: {d} channels, encoder expects {spec.out_dim}")
    if len(raw) != 4 * d * h * w:
        raise DatasetError(f"{stem}.bin: size {len(raw)} does not match dims {meta['dims']}")
    return np.frombuffer(raw, dtype="<f4").reshape(d, h, w).astype(np.float32)
