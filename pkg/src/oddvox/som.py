"""Set-of-Mark prompting baseline for a multimodal chat model.

Every object gets a 1-based index shared by all views. Its ground-truth box
is projected into each view, outlined, and labelled with the index. All
annotated views go to the chat model in one message, and the reply is parsed
for indices. Labels are only read when scoring, after the reply is parsed.

The HTTP client speaks the common chat-completion schema. It reads
``ODDVOX_CHAT_API_KEY`` (required), ``ODDVOX_CHAT_BASE_URL`` (default
``https://api.openai.com/v1``) and ``ODDVOX_CHAT_MODEL`` (default
``gpt-4o``) from the environment.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import jsonio
from .errors import ExternalServiceError, ValidationError
from .evaluation import accuracy
from .geometry import project_point

PROMPT = (
    "Here is a list of images taken from multiple view-points of the same scene, each object is annotated with "
    "an index and the bounding box, one or more objects are different from the majority of all other objects, "
    "reply only with a list of indices of the odd objects"
)

PALETTE = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (255, 255, 255),
)

# 5x7 digits, one string of five bits per row
_FONT = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
GLYPHS = {d: np.array([[c == "1" for c in row] for row in rows]) for d, rows in _FONT.items()}


@dataclass
class Mark:
    index: int
    box2d: tuple
    color: tuple = None


def project_box2d(box, camera):
    """Image-space bounds of a 3D box: ``((u0, v0, u1, v1), outside)``.

    The bounds span the corners in front of the camera and are clamped to the
    image. ``outside`` is true when no corner is in front or the clamped box
    has no area; the bounds are then ``None``.
    """
    u, v, _, front = project_point(camera.P, box.corners())
    if not np.any(front):
        return None, True
    u, v = u[front], v[front]
    u0, u1 = np.clip([u.min(), u.max()], 0.0, camera.width)
    v0, v1 = np.clip([v.min(), v.max()], 0.0, camera.height)
    if u1 <= u0 or v1 <= v0:
        return None, True
    return (float(u0), float(v0), float(u1), float(v1)), False


def scene_colors(n, seed):
    """Per-object colours from the palette in a seeded order (cycled if ``n > 12``)."""
    order = np.random.default_rng(seed).permutation(len(PALETTE))
    return [PALETTE[order[i % len(PALETTE)]] for i in range(n)]


def scene_marks(boxes, cameras, seed):
    """Marks per view; object ``i`` carries index ``i + 1`` and the same colour everywhere."""
    colors = scene_colors(len(boxes), seed)
    views = []
    for cam in cameras:
        marks = []
        for i, box in enumerate(boxes):
            b2, outside = project_box2d(box, cam)
            if not outside:
                marks.append(Mark(i + 1, b2, colors[i]))
        views.append(marks)
    return views


def _to_uint8(image):
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.copy()
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def draw_text(img, text, x, y, color, scale=1):
    """Stamp digits with the 5x7 font, top-left at pixel ``(x, y)``; clipped to the image."""
    H, W = img.shape[:2]
    for ch in text:
        glyph = np.kron(GLYPHS[ch], np.ones((scale, scale), dtype=bool))
        gh, gw = glyph.shape
        ys, xs = np.nonzero(glyph)
        ys, xs = ys + y, xs + x
        keep = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
        img[ys[keep], xs[keep]] = color
        x += gw + scale


def annotate(image, marks, seed=0, thickness=2):
    """Outline every mark's box and write its index at the box's top-left corner.

    Marks without a colour take one from the palette by ``seed`` and index.
    Returns a new ``uint8`` image; the input is not modified.
    """
    img = _to_uint8(image)
    H, W = img.shape[:2]
    scale = max(1, min(H, W) // 128)
    fallback = scene_colors(max([m.index for m in marks], default=0), seed)
    for m in marks:
        color = np.array(m.color if m.color is not None else fallback[m.index - 1], dtype=np.uint8)
        u0, v0, u1, v1 = m.box2d
        x0, y0 = int(np.clip(np.floor(u0), 0, W - 1)), int(np.clip(np.floor(v0), 0, H - 1))
        x1, y1 = int(np.clip(np.ceil(u1) - 1, 0, W - 1)), int(np.clip(np.ceil(v1) - 1, 0, H - 1))
        t = thickness
        img[y0 : min(y0 + t, y1 + 1), x0 : x1 + 1] = color
        img[max(y1 - t + 1, y0) : y1 + 1, x0 : x1 + 1] = color
        img[y0 : y1 + 1, x0 : min(x0 + t, x1 + 1)] = color
        img[y0 : y1 + 1, max(x1 - t + 1, x0) : x1 + 1] = color
        draw_text(img, str(m.index), x0 + t + 1, y0 + t + 1, color, scale)
    return img


@dataclass
class ChatRequest:
    prompt: str
    images: list
    scene: str = ""

    def png_bytes(self):
        out = []
        for img in self.images:
            buf = io.BytesIO()
            Image.fromarray(img).save(buf, format="PNG")
            out.append(buf.getvalue())
        return out

    def image_digests(self):
        return [hashlib.sha256(b).hexdigest() for b in self.png_bytes()]

    def messages(self):
        """Single user message: the prompt text followed by the images as data URLs."""
        parts = [{"type": "text", "text": self.prompt}]
        for png in self.png_bytes():
            url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
            parts.append({"type": "image_url", "image_url": {"url": url}})
        return [{"role": "user", "content": parts}]


def build_prompt(annotated_views, scene=""):
    if not annotated_views:
        raise ValidationError("the prompt needs at least one annotated view")
    return ChatRequest(PROMPT, list(annotated_views), scene)


_INT = re.compile(r"\d+")


def parse_reply(text, n_objects=None):
    """Indices mentioned in a reply, as ``(set, dropped)``.

    Every run of digits counts as an index. With ``n_objects``, indices
    outside ``[1, n_objects]`` are dropped and counted.
    """
    found = {int(m) for m in _INT.findall(text or "")}
    if n_objects is None:
        return found, 0
    kept = {i for i in found if 1 <= i <= n_objects}
    return kept, len(found - kept)


# --- clients -----------------------------------------------------------------------


class MockClient:
    """Deterministic scripted replies.

    ``replies`` maps scene names to reply text or to a callable taking the
    request; scenes not listed get ``default``.
    """

    name = "mock"

    def __init__(self, replies=None, default="none"):
        self.replies = dict(replies or {})
        self.default = default

    def complete(self, request):
        r = self.replies.get(request.scene, self.default)
        return r(request) if callable(r) else r


class ReplayClient:
    """Answers from a recorded transcript, keyed by scene; the prompt must match."""

    name = "replay"

    def __init__(self, transcript):
        self.entries = {e["scene"]: e for e in read_transcript(transcript)}

    def complete(self, request):
        e = self.entries.get(request.scene)
        if e is None:
            raise ExternalServiceError(f"transcript has no reply for scene {request.scene}")
        if e["prompt"] != request.prompt or e["images"] != request.image_digests():
            raise ExternalServiceError(f"request for scene {request.scene} differs from the recorded one")
        return e["reply"]


class HttpChatClient:
    """Chat-completion endpoint with retries and exponential backoff."""

    name = "http"

    def __init__(self, base_url=None, api_key=None, model=None, timeout=60.0, max_retries=4, backoff=1.0):
        self.api_key = api_key or os.environ.get("ODDVOX_CHAT_API_KEY")
        if not self.api_key:
            raise ExternalServiceError("set ODDVOX_CHAT_API_KEY to use the http client (or use --client mock)")
        self.base_url = (base_url or os.environ.get("ODDVOX_CHAT_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self.model = model or os.environ.get("ODDVOX_CHAT_MODEL") or "gpt-4o"
        self.timeout, self.max_retries, self.backoff = timeout, max_retries, backoff

    def complete(self, request):
        body = json.dumps({"model": self.model, "messages": request.messages(), "temperature": 0}).encode()
        req = urllib.request.Request(
            f"{self.base_url}/chat/completions",
            data=body,
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.api_key}"},
        )
        last = None
        for attempt in range(self.max_retries + 1):
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read())
                return payload["choices"][0]["message"]["content"]
            except urllib.error.HTTPError as exc:
                last = exc
                if exc.code not in (408, 429) and exc.code < 500:
                    break
            except (urllib.error.URLError, TimeoutError, KeyError, ValueError) as exc:
                last = exc
            if attempt < self.max_retries:
                time.sleep(self.backoff * 2**attempt)
        raise ExternalServiceError(f"chat endpoint {self.base_url} failed: {last}")


# --- pipeline ---------------------------------------------------------------------


def scene_request(scene, seed=0):
    """Annotated prompt for one dataset scene (uses boxes and cameras, never labels)."""
    marks = scene_marks(scene.boxes, scene.cameras, seed)
    views = [annotate(img, m) for img, m in zip(scene.images, marks)]
    return build_prompt(views, scene.name)


@dataclass
class SomResult:
    scene: str
    predicted: set
    dropped: int
    reply: str
    n_objects: int

    def predicted_labels(self):
        return np.array([1 if i + 1 in self.predicted else 0 for i in range(self.n_objects)])


def query_scenes(scenes, client, seed=0, concurrency=1, transcript=None):
    """Send every scene's request; results come back in scene order."""
    requests = [scene_request(s, seed) for s in scenes]

    def ask(req):
        return req.scene, client.complete(req)

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            replies = dict(pool.map(ask, requests))
    else:
        replies = dict(ask(r) for r in requests)
    results = []
    for s, req in zip(scenes, requests):
        found, dropped = parse_reply(replies[req.scene], len(s.boxes))
        results.append(SomResult(s.name, found, dropped, replies[req.scene], len(s.boxes)))
    if transcript is not None:
        write_transcript(transcript, requests, [replies[r.scene] for r in requests])
    return results


def score_results(results, scenes):
    """Pooled object accuracy and per-type accuracy; the only place labels are read."""
    preds, labels, types = [], [], []
    for r, s in zip(results, scenes):
        preds.extend(r.predicted_labels())
        labels.extend(s.labels)
        types.extend(str(getattr(t, "value", t)) for t in s.spec.anomaly_types)
    preds, labels = np.array(preds), np.array(labels)
    per_type = {}
    for p, y, t in zip(preds, labels, types):
        per_type.setdefault("normalcy" if y == 0 else t, []).append(p == y)
    return {
        "accuracy": accuracy(preds, labels),
        "per_type": {k: float(np.mean(v)) for k, v in sorted(per_type.items())},
        "objects": int(labels.size),
        "scenes": len(results),
        "dropped_indices": int(sum(r.dropped for r in results)),
    }


def evaluate_som(scenes, client, seed=0, concurrency=1, transcript=None):
    results = query_scenes(scenes, client, seed, concurrency, transcript)
    report = score_results(results, scenes)
    report["client"] = client.name
    return report


def write_transcript(path, requests, replies):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for req, reply in zip(requests, replies):
            fh.write(jsonio.dumps({"scene": req.scene, "prompt": req.prompt, "images": req.image_digests(), "reply": reply}) + "\n")


def read_transcript(path):
    try:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    except OSError as exc:
        raise ExternalServiceError(f"cannot read transcript {path}: {exc}") from exc
