"""Scene scorer: lifted volume -> 3D U-Net -> per-object tokens -> set heads.

Heads:

* ``dense`` (default): a transformer over object tokens (context head),
  optionally followed by the residual head, which learns a normality
  centroid ``z0`` and scores objects by their residual to it;
* ``sparse``: the ablation that attends across objects only at matching
  voxel locations of their 8x8x8 crops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    Conv3d,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    TransformerEncoderLayer,
    amax,
    as_tensor,
    concat,
    relu,
    sigmoid_np,
    stack,
    upsample_nearest3d,
)
from .diffcore.layers import trunc_normal
from .errors import ConfigError, DimensionError, OddvoxError, ValidationError
from .geometry import lift_features, reduce_channels, roi_pool, squeeze_crop

HEAD_KINDS = ("dense", "sparse")
SCORE_SOURCES = ("residual", "context", "average")


@dataclass
class BackboneConfig:
    scales: int = 4
    base_channels: int = 32
    multipliers: tuple[int, ...] = (1, 2, 4, 8)
    skip: bool = True
    kernel: int = 3
    zero_init_final: bool = False

    def validate(self):
        if self.scales < 1 or len(self.multipliers) != self.scales:
            raise ConfigError(f"need one channel multiplier per scale, got {self.multipliers} for {self.scales} scales")
        if self.base_channels < 1 or min(self.multipliers) < 1:
            raise ConfigError("channel counts must be positive")
        if self.kernel != 1 and self.kernel % 2 == 0:
            raise ConfigError(f"backbone kernel must be odd, got {self.kernel}")


@dataclass
class HeadConfig:
    kind: str = "dense"
    layers: int = 2
    heads: int = 8
    head_dim: int = 32
    residual_enabled: bool = True
    score_source: str = "residual"
    sparse_heads: int = 8
    sparse_head_dim: int = 4
    sparse_layers: int = 1
    sparse_shared: bool = False
    sparse_aggregate: str = "mean"

    def validate(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.score_source not in SCORE_SOURCES:
            raise ConfigError(f"unknown score_source {self.score_source!r}")
        if self.score_source != "context" and not self.residual_enabled and self.kind == "dense":
            raise ConfigError("score_source needs the residual head; enable it or score from 'context'")
        if self.layers < 0 or self.heads < 1 or self.head_dim < 1:
            raise ConfigError("layers must be >= 0 and heads, head_dim >= 1")
        if self.sparse_aggregate not in ("mean", "max"):
            raise ConfigError(f"sparse_aggregate must be 'mean' or 'max', got {self.sparse_aggregate!r}")

    @property
    def token_dim(self):
        return self.heads * self.head_dim


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    roi_out: tuple[int, int, int] = (8, 8, 8)
    roi_mode: str = "max"
    seed: int = 0

    def validate(self):
        self.backbone.validate()
        self.head.validate()
        if self.roi_mode not in ("max", "mean"):
            raise ConfigError(f"roi_mode must be 'max' or 'mean', got {self.roi_mode!r}")
        if self.head.kind == "sparse" and self.head.sparse_heads * self.head.sparse_head_dim != self.backbone.base_channels:
            raise ConfigError("sparse head width (sparse_heads x sparse_head_dim) must equal backbone base_channels")


@dataclass
class ModelOutput:
    logits: Tensor
    Z: Tensor = None
    z0: Tensor = None
    logits_context: Tensor = None
    logits_residual: Tensor = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def probabilities(self):
        return sigmoid_np(self.logits.data.astype(np.float64))


class Backbone(Module):
    """U-shaped 3D CNN; the output has the input's channels and spatial size.

    Encoder: a stem conv, then ``scales - 1`` stride-2 3x3x3 convs. Decoder:
    nearest upsampling, concatenation with the encoder feature of the same
    scale (when ``skip``), and a conv. A final 1x1 conv maps back to the
    input width.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        ch = [cfg.base_channels * m for m in cfg.multipliers]
        k = cfg.kernel
        self.stem = Conv3d(ch[0], ch[0], k, rng)
        self.down = [Conv3d(ch[i - 1], ch[i], 3, rng, stride=2, padding=1) for i in range(1, cfg.scales)]
        self.up = [
            Conv3d(ch[i + 1] + (ch[i] if cfg.skip else 0), ch[i], k, rng) for i in range(cfg.scales - 2, -1, -1)
        ]
        self.final = Conv3d(ch[0], ch[0], 1, rng, zero_init=cfg.zero_init_final)

    def check_dims(self, dims):
        f = 2 ** (self.cfg.scales - 1)
        if any(d % f for d in dims):
            raise ConfigError(f"backbone with {self.cfg.scales} scales needs grid dims divisible by {f}, got {tuple(dims)}")

    def forward(self, x):
        x = as_tensor(x)
        if x.shape[0] != self.cfg.base_channels:
            raise DimensionError(f"backbone expects {self.cfg.base_channels} channels, got {x.shape[0]}")
        self.check_dims(x.shape[1:])
        feats = [relu(self.stem(x))]
        for conv in self.down:
            feats.append(relu(conv(feats[-1])))
        h = feats[-1]
        for conv, skip in zip(self.up, reversed(feats[:-1])):
            h = upsample_nearest3d(h, 2)
            if self.cfg.skip:
                h = concat([h, skip], axis=0)
            h = relu(conv(h))
        return self.final(h)


class ReduceChannels(Module):
    """Learnable 1x1 projection of encoder features to the backbone width."""

    def __init__(self, d_in, d_out, rng):
        self.weight = Parameter(trunc_normal(rng, (d_out, d_in), std=1.0 / math.sqrt(d_in)))
        self.bias = Parameter(np.zeros(d_out, dtype=self.weight.dtype))

    def forward(self, F):
        return reduce_channels(F, self.weight, self.bias)


class ContextHead(Module):
    def __init__(self, cfg, rng):
        self.layers = [TransformerEncoderLayer(cfg.heads, cfg.head_dim, rng) for _ in range(cfg.layers)]
        self.score = Linear(cfg.token_dim, 1, rng)

    def forward(self, O, keep_attention=False):
        Z = O
        attn = []
        for layer in self.layers:
            layer.attn.keep_attention = keep_attention
            Z = layer(Z)
            if keep_attention:
                attn.append(layer.attn.last_attention)
        return Z, self.score(Z).reshape(-1), attn


class ResidualHead(Module):
    """Learnable token ``t0`` attends over the object tokens; its output is ``z0``."""

    def __init__(self, cfg, rng):
        q = cfg.token_dim
        self.t0 = Parameter(trunc_normal(rng, (1, q)))
        self.layer = TransformerEncoderLayer(cfg.heads, cfg.head_dim, rng)
        self.f_linear = Linear(q, q, rng)
        self.f_norm = LayerNorm(q)
        self.score = Linear(q, 1, rng)

    def centroid(self, O):
        return self.layer(concat([self.t0, O], axis=0))[0]

    def embed(self, Z):
        return relu(self.f_norm(self.f_linear(Z)))

    def forward(self, O, Z):
        z0 = self.centroid(O)
        R = self.embed(Z) - z0
        return z0, R, self.score(R).reshape(-1)


class SparseVoxelHead(Module):
    """Attention across objects at each crop location, then a per-location score.

    With ``sparse_shared=False`` each of the locations has its own layer
    and score weights (stacked along a leading batch axis).
    """

    def __init__(self, cfg, n_locations, rng):
        batch = None if cfg.sparse_shared else n_locations
        self.aggregate = cfg.sparse_aggregate
        self.layers = [
            TransformerEncoderLayer(cfg.sparse_heads, cfg.sparse_head_dim, rng, batch=batch) for _ in range(cfg.sparse_layers)
        ]
        self.score = Linear(cfg.sparse_heads * cfg.sparse_head_dim, 1, rng, batch=batch)

    def forward(self, crops):
        N, d = crops.shape[:2]
        tokens = crops.reshape(N, d, -1).transpose(2, 0, 1)  # [locations, N, d]
        for layer in self.layers:
            tokens = layer(tokens)
        scores = self.score(tokens).reshape(tokens.shape[0], N)
        if self.aggregate == "mean":
            return scores.mean(axis=0)
        return amax(scores, axis=0)


class OddModel(Module):
    """Full scorer from per-view encoder features, projections and object boxes."""

    def __init__(self, config, d_enc, stride, grid):
        self.config = config
        config.validate()
        self.d_enc, self.stride, self.grid = d_enc, float(stride), grid
        rng = np.random.default_rng(config.seed)
        c = config.backbone.base_channels
        hc = config.head
        self.reduce = ReduceChannels(d_enc, c, rng)
        self.backbone = Backbone(config.backbone, rng)
        self.backbone.check_dims(grid.dims)
        if hc.kind == "dense":
            self.token_proj = Linear(c, hc.token_dim, rng)
            self.token_proj.weight.data = trunc_normal(rng, (hc.token_dim, c), std=1.0 / math.sqrt(c))
            self.context = ContextHead(hc, rng)
            self.residual = ResidualHead(hc, rng) if hc.residual_enabled else None
        else:
            self.sparse = SparseVoxelHead(hc, int(np.prod(config.roi_out)), rng)

    # -- stages ---------------------------------------------------------------

    def lift(self, features, projections):
        views = [(self.reduce(as_tensor(F)), P) for F, P in zip(features, projections)]
        return lift_features(views, self.grid, stride=self.stride)

    def crops(self, G, boxes):
        return [roi_pool(G, box, self.grid, self.config.roi_out, self.config.roi_mode) for box in boxes]

    def tokenize(self, G, boxes):
        pooled = stack([squeeze_crop(c) for c in self.crops(G, boxes)], axis=0)  # [N, c]
        return self.token_proj(pooled)

    def heads(self, G, boxes, keep_attention=False):
        hc = self.config.head
        if hc.kind == "sparse":
            crops = stack(self.crops(G, boxes), axis=0)
            return ModelOutput(self.sparse(crops))
        O = self.tokenize(G, boxes)
        Z, logits_ctx, attn = self.context(O, keep_attention)
        out = ModelOutput(logits_ctx, Z=Z, logits_context=logits_ctx, diagnostics={"attention": attn} if keep_attention else {})
        if self.residual is not None:
            z0, R, logits_res = self.residual(O, Z)
            out.z0, out.logits_residual = z0, logits_res
            out.diagnostics["residuals"] = R
            if hc.score_source == "residual":
                out.logits = logits_res
            elif hc.score_source == "average":
                out.logits = (logits_ctx + logits_res) * 0.5
        return out

    def forward(self, features, projections, boxes, keep_attention=False):
        if len(features) == 0 or len(features) != len(projections):
            raise ValidationError(f"need >= 1 view with one projection each, got {len(features)} and {len(projections)}")
        if len(boxes) < 2:
            raise ValidationError(f"need at least 2 objects to compare, got {len(boxes)}")
        stage = "lift"
        try:
            volume = self.lift(features, projections)
            stage = "backbone"
            G = self.backbone(volume.data)
            stage = "heads"
            out = self.heads(G, boxes, keep_attention)
        except OddvoxError as exc:
            raise type(exc)(f"[{stage}] {exc}") from exc
        out.diagnostics["valid_count"] = volume.valid_count
        return out


def build_model(config, encoder_spec, grid):
    return OddModel(config, encoder_spec.out_dim, encoder_spec.patch_stride, grid)


def model_forward(model, encoder, images, cameras, boxes, keep_attention=False):
    """Encode the views and score the objects in ``boxes``."""
    features = [encoder.encode(img) for img in images]
    return model(features, [cam.P for cam in cameras], boxes, keep_attention)
