"""Metrics, per-type breakdown, view/object-count sweeps and the cost benchmark.

AUC is the Mann-Whitney statistic pooled over every object of every test
scene. Accuracy thresholds the sigmoid probability inclusively (``p >= 0.5``
counts as anomalous) and is the raw fraction of correctly labelled objects.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import jsonio
from .diffcore import no_grad, sigmoid_np
from .errors import ValidationError

NORMALCY = "normalcy"


def auc(scores, labels):
    """Area under the ROC curve by the rank-sum formula; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores for {y.size} labels")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ValidationError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC is undefined unless both classes are present")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold=0.5):
    """Fraction of objects whose ``score >= threshold`` decision equals the label."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise ValidationError("accuracy of an empty set is undefined")
    return float(np.mean((s >= threshold) == (y == 1)))


def balanced_accuracy(scores, labels, threshold=0.5):
    """Mean of the per-class accuracies; immune to the normal/anomalous imbalance."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    accs = [np.mean((s[y == c] >= threshold) == (c == 1)) for c in (0, 1) if np.any(y == c)]
    return float(np.mean(accs))


@dataclass
class ObjectRecord:
    scene: str
    index: int
    logit: float
    label: int
    anomaly_type: str

    @property
    def probability(self):
        return float(sigmoid_np(np.float64(self.logit)))


def breakdown_by_type(records, threshold=0.5):
    """Accuracy per anomaly type over anomalous objects, plus ``normalcy`` over normal ones."""
    groups = {}
    for r in records:
        key = NORMALCY if r.label == 0 else r.anomaly_type
        groups.setdefault(key, []).append((r.probability >= threshold) == (r.label == 1))
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def score_scenes(model, data, views=None):
    """Run the model on prepared scenes; ``views=k`` keeps only the first k cameras."""
    records = []
    with no_grad():
        for scene in data:
            s = scene if views is None else scene.subset_views(views)
            logits = model(s.features, s.projections, s.boxes).logits.data.astype(np.float64)
            for i, (lg, y, t) in enumerate(zip(logits, scene.labels, scene.anomaly_types)):
                records.append(ObjectRecord(scene.name, i, float(lg), int(y), t))
    return records


def _columns(records):
    logits = np.array([r.logit for r in records])
    return logits, sigmoid_np(logits), np.array([r.label for r in records])


def per_scene_auc(records):
    """Mean of per-scene AUCs, skipping scenes with a single class."""
    by_scene = {}
    for r in records:
        by_scene.setdefault(r.scene, []).append(r)
    vals = []
    for recs in by_scene.values():
        logits, _, y = _columns(recs)
        if 0 < y.sum() < y.size:
            vals.append(auc(logits, y))
    return float(np.mean(vals))


def summarize(records, threshold=0.5):
    logits, probs, y = _columns(records)
    return {
        "auc": auc(logits, y),
        "accuracy": accuracy(probs, y, threshold),
        "balanced_accuracy": balanced_accuracy(probs, y, threshold),
        "per_scene_auc": per_scene_auc(records),
        "per_type": breakdown_by_type(records, threshold),
        "objects": int(y.size),
        "scenes": len({r.scene for r in records}),
    }


def sweep_views(model, data, view_counts=None):
    """AUC using the first ``k`` cameras of every scene, for each ``k``."""
    if view_counts is None:
        view_counts = range(1, min(len(s.features) for s in data) + 1)
    out = {}
    for k in view_counts:
        logits, _, y = _columns(score_scenes(model, data, views=k))
        out[int(k)] = auc(logits, y)
    return out


def sweep_object_count(model, datasets):
    """``datasets`` maps an object count to prepared scenes with that many objects."""
    out = {}
    for n, data in sorted(datasets.items()):
        logits, _, y = _columns(score_scenes(model, data))
        out[int(n)] = auc(logits, y)
    return out


def bench(model, scene, repeats=20, warmup=3):
    """Median forward latency, peak forward allocation and parameter count.

    Memory is the ``tracemalloc`` peak of one forward pass with autograd
    recording on (so the graph's saved activations count), measured above
    the allocation level before the call. Latency runs use ``no_grad``.
    """
    def run():
        return model(scene.features, scene.projections, scene.boxes)

    with no_grad():
        for _ in range(warmup):
            run()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
    tracemalloc.start()
    try:
        base = tracemalloc.get_traced_memory()[0]
        out = run()
        peak = tracemalloc.get_traced_memory()[1] - base
        del out
    finally:
        tracemalloc.stop()
    times = np.array(times) * 1000.0
    return {
        "latency_ms_median": float(np.median(times)),
        "latency_ms_mean": float(np.mean(times)),
        "latency_ms_first_half_median": float(np.median(times[: max(1, repeats // 2)])),
        "latency_ms_second_half_median": float(np.median(times[max(1, repeats // 2) :])) if repeats > 1 else float(times[0]),
        "peak_forward_bytes": int(peak),
        "memory_method": "tracemalloc peak of one forward with autograd recording",
        "parameters": int(model.num_parameters()),
        "repeats": int(repeats),
        "warmup": int(warmup),
    }


@dataclass
class EvalReport:
    auc: float
    accuracy: float
    per_type: dict
    balanced_accuracy: float = None
    per_scene_auc: float = None
    objects: int = 0
    scenes: int = 0
    sweep_views: dict = field(default_factory=dict)
    sweep_objects: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: str = ""

    def validate(self):
        for name in ("auc", "accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} = {v} outside [0, 1]")

    def to_dict(self):
        d = dict(vars(self))
        d["sweep_views"] = {str(k): v for k, v in self.sweep_views.items()}
        d["sweep_objects"] = {str(k): v for k, v in self.sweep_objects.items()}
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["sweep_views"] = {int(k): v for k, v in d.get("sweep_views", {}).items()}
        d["sweep_objects"] = {int(k): v for k, v in d.get("sweep_objects", {}).items()}
        return cls(**d)

    def dumps(self):
        return jsonio.dumps(self.to_dict(), indent=1) + "\n"


def evaluate(model, data, threshold=0.5):
    report = EvalReport(**summarize(score_scenes(model, data), threshold))
    report.validate()
    return report


# --- SVG plots -------------------------------------------------------------------

_W, _H, _PAD = 420, 260, 48


def _svg(body, title):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">\n'
        f'<rect width="{_W}" height="{_H}" fill="white"/>\n'
        f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>\n'
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - 16}" y2="{_H - _PAD}" stroke="black"/>\n'
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_PAD}" y2="30" stroke="black"/>\n'
        + "".join(
            f'<text x="{_PAD - 6}" y="{_y(v) + 4:.1f}" text-anchor="end">{v:.1f}</text>\n' for v in (0.0, 0.5, 1.0)
        )
        + body
        + "</svg>\n"
    )


def _y(v):
    return _H - _PAD - v * (_H - _PAD - 30)


def bar_chart(values, title):
    """Bars in [0, 1], one per key."""
    keys = list(values)
    if not keys:
        return _svg("", title)
    slot = (_W - 16 - _PAD) / len(keys)
    parts = []
    for i, k in enumerate(keys):
        x = _PAD + i * slot + slot * 0.15
        y = _y(values[k])
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{slot * 0.7:.1f}" height="{_H - _PAD - y:.1f}" fill="#4472c4"/>\n')
        parts.append(f'<text x="{x + slot * 0.35:.1f}" y="{_H - _PAD + 14}" text-anchor="middle">{k}</text>\n')
        parts.append(f'<text x="{x + slot * 0.35:.1f}" y="{y - 3:.1f}" text-anchor="middle">{values[k]:.2f}</text>\n')
    return _svg("".join(parts), title)


def line_chart(values, title):
    """Points ``(x, y in [0, 1])`` joined in key order."""
    xs = sorted(values)
    if not xs:
        return _svg("", title)
    lo, hi = xs[0], xs[-1]
    span = (hi - lo) or 1

    def px(x):
        return _PAD + 12 + (x - lo) / span * (_W - 16 - _PAD - 24)

    pts = " ".join(f"{px(x):.1f},{_y(values[x]):.1f}" for x in xs)
    parts = [f'<polyline points="{pts}" fill="none" stroke="#c0504d" stroke-width="2"/>\n']
    for x in xs:
        parts.append(f'<circle cx="{px(x):.1f}" cy="{_y(values[x]):.1f}" r="3" fill="#c0504d"/>\n')
        parts.append(f'<text x="{px(x):.1f}" y="{_H - _PAD + 14}" text-anchor="middle">{x}</text>\n')
    return _svg("".join(parts), title)


def write_plots(report, out_dir):
    """Write per-type, view-sweep and object-sweep charts; returns the paths written."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    charts = [("per_type.svg", bar_chart, report.per_type, "Accuracy by anomaly type")]
    if report.sweep_views:
        charts.append(("sweep_views.svg", line_chart, report.sweep_views, "AUC vs number of views"))
    if report.sweep_objects:
        charts.append(("sweep_objects.svg", line_chart, report.sweep_objects, "AUC vs number of objects"))
    for name, fn, values, title in charts:
        path = out_dir / name
        path.write_text(fn(values, title))
        written.append(path)
    return written
