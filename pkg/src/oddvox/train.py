"""Training loop: BCE over objects plus the normality term, AdamW, cosine lr.

Every epoch appends one JSON object to ``train_log.jsonl``::

    {"epoch": 1, "step": 15, "lr": 0.0002, "loss": 2.1, "bce": 1.9,
     "normality": 0.2, "grad_norm_mean": 0.8, "grad_norm_max": 1.4,
     "wall_time": 12.3}

``lr`` is the rate used by the last optimizer step of the epoch.
``wall_time`` is the only field that varies between identical reruns.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import jsonio
from .configtools import to_dict
from .diffcore import AdamW, LrSchedule, bce_loss, load_checkpoint, mse_loss, save_checkpoint, stack
from .errors import CheckpointError, ConfigError, NumericError, ValidationError

LOG_NAME = "train_log.jsonl"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 20
    base_lr: float = 2e-4
    schedule: str = "cosine"
    weight_decay: float = 0.01
    seed: int = 0
    residual_enabled: bool = True
    loss_weight_normality: float = 1.0
    normality_stop_gradient: bool = True
    checkpoint_every: int = 5

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr < 0 or self.weight_decay < 0 or self.loss_weight_normality < 0:
            raise ConfigError("base_lr, weight_decay and loss_weight_normality must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass
class SceneBatch:
    """One scene prepared for the model: frozen features, projections, boxes, labels."""

    name: str
    features: list
    projections: list
    boxes: list
    labels: np.ndarray
    anomaly_types: list

    def subset_views(self, k):
        return SceneBatch(self.name, self.features[:k], self.projections[:k], self.boxes, self.labels, self.anomaly_types)


def prepare_scenes(scenes, encoder):
    """Encode every view once; the encoder is frozen so this is done up front."""
    out = []
    for s in scenes:
        out.append(
            SceneBatch(
                name=s.name,
                features=encoder.encode_scene(s),
                projections=[c.P for c in s.cameras],
                boxes=list(s.boxes),
                labels=np.asarray(s.labels, dtype=np.int64),
                anomaly_types=[str(getattr(t, "value", t)) for t in s.spec.anomaly_types],
            )
        )
    return out


def normal_centroid(Z, labels):
    """Mean of the rows of ``Z`` whose label is 0; gradients flow into ``Z``."""
    labels = np.asarray(labels)
    idx = np.flatnonzero(labels == 0)
    if idx.size == 0:
        raise ValidationError("every object is labelled anomalous; the normal centroid is undefined")
    return stack([Z[int(i)] for i in idx], axis=0).mean(axis=0)


def compute_loss(output, labels, residual_enabled=True, normality_weight=1.0, stop_gradient=False):
    """Return ``(total, parts)`` where parts holds float ``bce`` and ``normality``.

    With ``stop_gradient`` the normal centroid is a constant target, so the
    normality term trains only the residual branch that produces ``z0``.
    """
    labels = np.asarray(labels)
    if labels.shape != output.logits.shape:
        raise ValidationError(f"labels {labels.shape} not aligned with logits {output.logits.shape}")
    bce = bce_loss(output.logits, labels)
    if not residual_enabled or output.z0 is None:
        return bce, {"bce": float(bce.data), "normality": 0.0}
    Z = output.Z.detach() if stop_gradient else output.Z
    norm = mse_loss(normal_centroid(Z, labels), output.z0)
    total = bce + norm * normality_weight
    return total, {"bce": float(bce.data), "normality": float(norm.data)}


class TrainState:
    """Optimizer, schedule and position within training; everything resume needs."""

    def __init__(self, model, config, steps_per_epoch):
        self.config = config
        self.optimizer = AdamW(model.named_parameters(), weight_decay=config.weight_decay)
        self.schedule = LrSchedule(config.base_lr, config.epochs * steps_per_epoch, config.schedule)
        self.epoch = 0

    @property
    def step(self):
        return self.optimizer.state.step


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def _grad_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))


def train_epoch(model, data, config, state):
    """One pass over ``data`` (a list of :class:`SceneBatch`) in a seeded order."""
    if not data:
        raise ValidationError("training set is empty")
    order = epoch_order(config.seed, state.epoch, len(data))
    params = list(state.optimizer.params.values())
    sums = {"loss": 0.0, "bce": 0.0, "normality": 0.0}
    norms, lr = [], 0.0
    for start in range(0, len(order), config.batch_size):
        batch = order[start : start + config.batch_size]
        state.optimizer.zero_grad()
        for i in batch:
            scene = data[int(i)]
            try:
                out = model(scene.features, scene.projections, scene.boxes)
                total, parts = compute_loss(
                    out, scene.labels, config.residual_enabled, config.loss_weight_normality, config.normality_stop_gradient
                )
                if not np.isfinite(total.data):
                    raise NumericError("loss is not finite")
                (total * (1.0 / len(batch))).backward()
            except NumericError as exc:
                raise NumericError(f"{exc} (scene {scene.name}, step {state.step + 1}, epoch {state.epoch + 1})") from exc
            sums["loss"] += float(total.data)
            sums["bce"] += parts["bce"]
            sums["normality"] += parts["normality"]
        norms.append(_grad_norm(params))
        lr = state.schedule(state.step)
        state.optimizer.step(lr)
    state.epoch += 1
    n = len(data)
    return {
        "epoch": state.epoch,
        "step": state.step,
        "lr": lr,
        "loss": sums["loss"] / n,
        "bce": sums["bce"] / n,
        "normality": sums["normality"] / n,
        "grad_norm_mean": float(np.mean(norms)),
        "grad_norm_max": float(np.max(norms)),
    }


def save_training_checkpoint(path, model, state, meta=None):
    meta = dict(meta or {})
    meta["epoch"] = state.epoch
    save_checkpoint(path, model.state_dict(), meta=meta, optimizer_state=state.optimizer.state)


def restore_training_checkpoint(path, model, state):
    params, meta, opt = load_checkpoint(path)
    model.load_state_dict(params)
    if opt is None:
        raise CheckpointError(f"{path} holds no optimizer state; cannot resume")
    state.optimizer.state = opt
    state.epoch = int(meta["epoch"])
    return meta


def fit(model, data, config, out_dir, resume=None, meta=None, log_fn=None):
    """Train for ``config.epochs`` epochs, checkpointing into ``out_dir``.

    Writes ``checkpoint_eNNNN.ckpt`` every ``checkpoint_every`` epochs and
    ``final.ckpt`` at the end. With ``resume``, training continues from that
    checkpoint's epoch and the log is truncated to the epochs it covers.
    Returns the list of per-epoch log records.
    """
    config.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create output directory {out_dir}: {exc}") from exc
    steps = math.ceil(len(data) / config.batch_size)
    state = TrainState(model, config, steps)
    meta = dict(meta or {})
    meta["train"] = to_dict(config)
    log_path = out_dir / LOG_NAME
    records = []
    if resume is not None:
        restore_training_checkpoint(resume, model, state)
        if log_path.exists():
            lines = log_path.read_text().splitlines()[: state.epoch]
            records = [jsonio.loads(line) for line in lines]
    try:
        log_path.write_text("".join(jsonio.dumps(r) + "\n" for r in records))
    except OSError as exc:
        raise CheckpointError(f"cannot write training log {log_path}: {exc}") from exc

    while state.epoch < config.epochs:
        t0 = time.perf_counter()
        rec = train_epoch(model, data, config, state)
        rec["wall_time"] = time.perf_counter() - t0
        records.append(rec)
        with open(log_path, "a") as fh:
            fh.write(jsonio.dumps(rec) + "\n")
        if log_fn is not None:
            log_fn(rec)
        if state.epoch % config.checkpoint_every == 0 and state.epoch < config.epochs:
            save_training_checkpoint(out_dir / f"checkpoint_e{state.epoch:04d}.ckpt", model, state, meta)
    save_training_checkpoint(out_dir / "final.ckpt", model, state, meta)
    return records


def read_log(path):
    try:
        return [jsonio.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    except OSError as exc:
        raise CheckpointError(f"cannot read training log {path}: {exc}") from exc
