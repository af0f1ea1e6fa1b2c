"""On-disk dataset layout (format tag ``oddvox-ds-v1``).

::

    <root>/meta.json                 format tag, config echo, scene names
    <root>/scene_0000/view_0.png     8-bit RGB, one per camera
    <root>/scene_0000/cameras.json   [{"K": [fx, fy, cx, cy], "R": [9], "t": [3], "W", "H"}]
    <root>/scene_0000/boxes.json     [{"min": [3], "max": [3]}] per instance
    <root>/scene_0000/labels.json    [0/1] per instance
    <root>/scene_0000/scene.json     full scene description (shapes, poses, anomalies)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .. import __version__, jsonio
from ..configtools import to_dict
from ..errors import DatasetError, DatasetVersionError
from .cameras import Camera
from .render import RenderedView, render_scene
from .scenes import SceneConfig, SceneSpec, generate_scene, scene_seed

FORMAT_TAG = "oddvox-ds-v1"


@dataclass
class Scene:
    """A scene description together with its rendered views."""

    spec: SceneSpec
    views: list

    @property
    def images(self):
        return [v.rgb for v in self.views]

    @property
    def cameras(self):
        return self.spec.cameras

    @property
    def labels(self):
        return self.spec.labels

    @property
    def boxes(self):
        return self.spec.boxes

    @property
    def name(self):
        return self.spec.name


def build_scene(master_seed, scene_id, config=None):
    """Generate and render scene ``scene_id`` of a dataset seeded by ``master_seed``."""
    spec = generate_scene(scene_seed(master_seed, scene_id), config, scene_id=scene_id)
    return Scene(spec, render_scene(spec))


def build_dataset(master_seed, count, config=None, start=0):
    return [build_scene(master_seed, i, config) for i in range(start, start + count)]


def _to_png(rgb):
    return np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


def write_dataset(scenes, root, config=None, extra_meta=None):
    """Write scenes in the dataset layout; returns the root path."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": FORMAT_TAG,
            "tool_version": __version__,
            "config": to_dict(config) if config is not None else None,
            "scenes": [s.name for s in scenes],
        }
        meta.update(extra_meta or {})
        jsonio.dump(meta, root / "meta.json")
        for scene in scenes:
            d = root / scene.name
            d.mkdir(exist_ok=True)
            for k, view in enumerate(scene.views):
                Image.fromarray(_to_png(view.rgb), mode="RGB").save(d / f"view_{k}.png", optimize=False)
            jsonio.dump([c.to_dict() for c in scene.spec.cameras], d / "cameras.json")
            jsonio.dump([b.to_dict() for b in scene.spec.boxes], d / "boxes.json")
            jsonio.dump(scene.spec.labels, d / "labels.json")
            jsonio.dump(scene.spec.to_dict(), d / "scene.json")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {root}: {exc}") from exc
    return root


def read_meta(root):
    root = Path(root)
    path = root / "meta.json"
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    if not path.is_file():
        raise DatasetError(f"missing {path}; not an oddvox dataset")
    try:
        meta = jsonio.load(path)
    except ValueError as exc:
        raise DatasetError(f"corrupt {path}: {exc}") from exc
    if meta.get("format") != FORMAT_TAG:
        raise DatasetVersionError(f"{path}: dataset format {meta.get('format')!r}, this tool reads {FORMAT_TAG!r}")
    return meta


def _read_image(path):
    if not path.is_file():
        raise DatasetError(f"missing image {path}")
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"corrupt image {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def read_scene(root, name):
    d = Path(root) / name
    try:
        spec = SceneSpec.from_dict(jsonio.load(d / "scene.json"))
        cams = [Camera.from_dict(c) for c in jsonio.load(d / "cameras.json")]
        labels = jsonio.load(d / "labels.json")
    except FileNotFoundError as exc:
        raise DatasetError(f"missing file in {d}: {exc.filename}") from exc
    except (ValueError, KeyError) as exc:
        raise DatasetError(f"corrupt metadata in {d}: {exc}") from exc
    if labels != spec.labels:
        raise DatasetError(f"{d}: labels.json disagrees with scene.json")
    spec.cameras = cams
    views = [RenderedView(_read_image(d / f"view_{k}.png"), None, cam) for k, cam in enumerate(cams)]
    return Scene(spec, views)


def read_dataset(root, limit=None):
    """Load every scene listed in ``meta.json`` (images as float32 in [0, 1])."""
    meta = read_meta(root)
    names = meta["scenes"] if limit is None else meta["scenes"][:limit]
    return [read_scene(root, n) for n in names]


def dataset_config(root):
    """The scene config echoed in ``meta.json``, or the default."""
    from ..configtools import from_dict

    cfg = read_meta(root).get("config")
    return from_dict(SceneConfig, cfg) if cfg else SceneConfig()
