"""Camera projection, feature lifting into a voxel grid, and ROI pooling.

Coordinate conventions:

* image pixel ``(row i, col j)`` covers ``[j, j+1) x [i, i+1)``; ``u`` is
  the horizontal (column) coordinate and ``v`` the vertical one;
* a feature map with patch stride ``s`` holds feature ``(a, b)`` at image
  pixel ``((b + 0.5) s, (a + 0.5) s)``, so its lattice coordinate is
  ``image / s - 0.5``;
* voxel ``(i, j, k)`` has its centre at ``origin + (index + 0.5) * voxel_size``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .diffcore import Tensor, as_tensor, concat, matmul, sparse_matmul, take_flat
from .errors import ConfigError, DimensionError, ValidationError

BEHIND_EPS = 1e-9


@dataclass
class VoxelGridSpec:
    dims: tuple[int, int, int] = (48, 48, 8)
    voxel_size: float = 0.04
    origin: tuple[float, float, float] = (-0.96, -0.96, 0.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = tuple(float(o) for o in self.origin)
        self.validate()

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"grid dims must be three positive integers, got {self.dims}")
        if not self.voxel_size > 0:
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")

    @property
    def num_voxels(self):
        return int(np.prod(self.dims))

    @property
    def extent(self):
        lo = np.asarray(self.origin)
        return lo, lo + np.asarray(self.dims) * self.voxel_size

    def centers(self):
        """World coordinates of all voxel centres, ``[X, Y, Z, 3]``."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def covers(self, box):
        lo, hi = self.extent
        return bool(np.all(np.asarray(box.min) >= lo - 1e-9) and np.all(np.asarray(box.max) <= hi + 1e-9))

    def to_dict(self):
        return {"dims": list(self.dims), "voxel_size": self.voxel_size, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["dims"]), d["voxel_size"], tuple(d["origin"]))


@dataclass
class ObjectBox3D:
    min: tuple
    max: tuple

    def __post_init__(self):
        self.min = tuple(float(x) for x in self.min)
        self.max = tuple(float(x) for x in self.max)
        if not all(a < b for a, b in zip(self.min, self.max)):
            raise ValidationError(f"box min {self.min} must be below max {self.max} on every axis")

    def corners(self):
        lo, hi = np.asarray(self.min), np.asarray(self.max)
        sel = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)], dtype=bool)
        return np.where(sel, hi, lo)

    def overlaps(self, other):
        return all(a0 < b1 and b0 < a1 for a0, a1, b0, b1 in zip(self.min, self.max, other.min, other.max))

    def contains_box(self, other):
        return all(a0 <= b0 and b1 <= a1 for a0, a1, b0, b1 in zip(self.min, self.max, other.min, other.max))

    def contains(self, p):
        p = np.asarray(p)
        return np.all((p >= np.asarray(self.min)) & (p <= np.asarray(self.max)), axis=-1)

    def to_dict(self):
        return {"min": list(self.min), "max": list(self.max)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["min"]), tuple(d["max"]))


@dataclass
class FeatureVolume:
    data: Tensor  # [d, X, Y, Z]
    grid: VoxelGridSpec
    valid_count: np.ndarray = field(default=None)  # [X, Y, Z]

    @property
    def channels(self):
        return self.data.shape[0]


def project_point(P, X):
    """Project world points ``X [..., 3]`` with a 3x4 matrix.

    Returns ``(u, v, depth, in_front)``; ``depth`` is the camera-frame z and
    ``in_front`` is False for points at or behind the camera plane, where
    ``u`` and ``v`` are NaN.
    """
    P = np.asarray(P, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    h = X @ P[:, :3].T + P[:, 3]
    depth = h[..., 2]
    in_front = depth > BEHIND_EPS
    safe = np.where(in_front, depth, 1.0)
    u = np.where(in_front, h[..., 0] / safe, np.nan)
    v = np.where(in_front, h[..., 1] / safe, np.nan)
    return u, v, depth, in_front


def bilinear_weights(x, y, height, width):
    """Flat neighbour indices ``[K, 4]``, weights ``[K, 4]`` and validity ``[K]``.

    ``x`` indexes columns and ``y`` rows, both in lattice units (value
    ``(i, j)`` sits at ``y=i, x=j``). Positions within half a cell outside
    the lattice are valid and clamp to the border; farther ones are not.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    finite = np.isfinite(x) & np.isfinite(y)
    xs, ys = np.where(finite, x, 0.0), np.where(finite, y, 0.0)
    valid = finite & (xs >= -0.5) & (xs <= width - 0.5) & (ys >= -0.5) & (ys <= height - 0.5)
    xc, yc = np.clip(xs, 0, width - 1), np.clip(ys, 0, height - 1)
    x0 = np.minimum(np.floor(xc), max(width - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(yc), max(height - 2, 0)).astype(np.int64)
    fx, fy = xc - x0, yc - y0
    x1, y1 = np.minimum(x0 + 1, width - 1), np.minimum(y0 + 1, height - 1)
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w, valid


def bilinear_sample(fmap, u, v):
    """Sample ``fmap [d, h, w]`` at lattice coordinates (``u`` column, ``v`` row).

    Scalar inputs return ``(values [d], valid)``; arrays return
    ``(values [d, K], valid [K])``. Invalid samples are zero.
    """
    data = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap)
    d, h, w = data.shape
    idx, wts, valid = bilinear_weights(u, v, h, w)
    flat = data.reshape(d, h * w)
    vals = (flat[:, idx] * wts[None]).sum(axis=-1) * valid
    if np.ndim(u) == 0:
        return vals[:, 0], bool(valid[0])
    return vals, valid


def _view_key(P, F):
    return (np.asarray(P, dtype=np.float64).tobytes(), F.data.tobytes())


def lift_plan(projections, shapes, grid, stride=1.0):
    """Sparse averaging matrix ``S [V, sum(h w)]`` and per-voxel valid counts.

    Row ``v`` of ``S`` holds the bilinear weights of voxel ``v``'s projection
    in every view that sees it, divided by the number of such views.
    """
    centers = grid.centers().reshape(-1, 3)
    V = len(centers)
    rows, cols, vals = [], [], []
    count = np.zeros(V, dtype=np.int64)
    per_view = []
    offset = 0
    for P, (h, w) in zip(projections, shapes):
        u, v, _, front = project_point(P, centers)
        idx, wts, valid = bilinear_weights(u / stride - 0.5, v / stride - 0.5, h, w)
        valid &= front
        count += valid
        per_view.append((idx + offset, wts, valid))
        offset += h * w
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
    for idx, wts, valid in per_view:
        vox = np.nonzero(valid)[0]
        rows.append(np.repeat(vox, 4))
        cols.append(idx[vox].reshape(-1))
        vals.append((wts[vox] * inv[vox, None]).reshape(-1))
    S = sp.csr_matrix(
        (np.concatenate(vals) if vals else [], (np.concatenate(rows) if rows else [], np.concatenate(cols) if cols else [])),
        shape=(V, offset),
    )
    S.sum_duplicates()
    return S, count.reshape(grid.dims)


def lift_features(views, grid, stride=1.0):
    """Average bilinear samples of per-view feature maps at every voxel centre.

    ``views`` is a list of ``(F [d, h, w], P [3, 4])``. Views are put in a
    canonical order first, so permuting them gives a bit-identical result.
    """
    if not views:
        raise ValidationError("lift_features needs at least one view")
    views = [(as_tensor(F), np.asarray(P, dtype=np.float64)) for F, P in views]
    d = views[0][0].shape[0]
    for F, P in views:
        if F.ndim != 3 or F.shape[0] != d:
            raise ConfigError(f"all feature maps must be [d, h, w] with d={d}, got {F.shape}")
        if P.shape != (3, 4):
            raise DimensionError(f"projection matrix must be 3x4, got {P.shape}")
    views = sorted(views, key=lambda fp: _view_key(fp[1], fp[0]))
    S, count = lift_plan([P for _, P in views], [F.shape[1:] for F, _ in views], grid, stride)
    stacked = concat([F.reshape(d, -1) for F, _ in views], axis=1)  # [d, sum hw]
    lifted = sparse_matmul(S, stacked.transpose(1, 0))  # [V, d]
    data = lifted.transpose(1, 0).reshape(d, *grid.dims)
    return FeatureVolume(data, grid, count)


def reduce_channels(F, weight, bias=None):
    """Pointwise (1x1) channel projection of ``F [c_in, h, w]`` by ``weight [c_out, c_in]``."""
    F, weight = as_tensor(F), as_tensor(weight)
    if F.ndim != 3:
        raise DimensionError(f"reduce_channels expects [c, h, w], got {F.shape}")
    if weight.ndim != 2 or weight.shape[1] != F.shape[0]:
        raise DimensionError(f"reduce_channels: weight {weight.shape} does not match {F.shape[0]} input channels")
    c, h, w = F.shape
    out = matmul(weight, F.reshape(c, h * w))
    if bias is not None:
        out = out + as_tensor(bias).reshape(-1, 1)
    return out.reshape(weight.shape[0], h, w)


def roi_bins(box, grid, out=(8, 8, 8)):
    """Per-axis voxel index lists for each of the ``out`` bins of ``box``.

    Bin ``k`` on an axis spans ``[lo + k (hi-lo)/n, lo + (k+1)(hi-lo)/n)`` in
    continuous voxel coordinates and takes voxels whose centres fall in it.
    An empty bin takes the voxel nearest its centre (clipped to the grid).
    """
    lo_w, hi_w = grid.extent
    if np.any(np.asarray(box.max) <= lo_w) or np.any(np.asarray(box.min) >= hi_w):
        raise ValidationError(f"box {box.min} - {box.max} lies entirely outside the voxel grid")
    bins = []
    for a in range(3):
        lo = (box.min[a] - grid.origin[a]) / grid.voxel_size
        hi = (box.max[a] - grid.origin[a]) / grid.voxel_size
        edges = lo + (hi - lo) * np.arange(out[a] + 1) / out[a]
        centres = np.arange(grid.dims[a]) + 0.5
        axis_bins = []
        for k in range(out[a]):
            sel = np.nonzero((centres >= edges[k]) & (centres < edges[k + 1]))[0]
            if len(sel) == 0:
                mid = 0.5 * (edges[k] + edges[k + 1])
                sel = np.array([int(np.clip(np.floor(mid), 0, grid.dims[a] - 1))])
            axis_bins.append(sel)
        bins.append(axis_bins)
    return bins


def _padded(axis_bins):
    width = max(len(b) for b in axis_bins)
    return np.stack([np.concatenate([b, np.full(width - len(b), b[0])]) for b in axis_bins])


def roi_pool(volume, box, grid=None, out=(8, 8, 8), mode="max"):
    """Pool the part of ``volume [d, X, Y, Z]`` inside ``box`` to ``[d, *out]``."""
    if isinstance(volume, FeatureVolume):
        grid = grid or volume.grid
        volume = volume.data
    volume = as_tensor(volume)
    if grid is None:
        raise ValidationError("roi_pool needs the voxel grid of the volume")
    if tuple(volume.shape[1:]) != tuple(grid.dims):
        raise DimensionError(f"volume shape {volume.shape} does not match grid dims {grid.dims}")
    bins = roi_bins(box, grid, out)
    d = volume.shape[0]
    X, Y, Z = grid.dims
    if mode == "max":
        ix, iy, iz = (_padded(b) for b in bins)  # [n_a, L_a]
        flat = (
            ix[:, None, None, :, None, None] * (Y * Z)
            + iy[None, :, None, None, :, None] * Z
            + iz[None, None, :, None, None, :]
        )  # [ox, oy, oz, Lx, Ly, Lz]
        cells = flat.reshape(*out, -1)
        data = volume.data.reshape(d, -1)[:, cells]  # [d, ox, oy, oz, L]
        arg = data.argmax(axis=-1)
        chosen = np.take_along_axis(cells[None].repeat(d, 0), arg[..., None], axis=-1)[..., 0]
        index = chosen + (np.arange(d) * (X * Y * Z))[:, None, None, None]
        return take_flat(volume, index)
    if mode == "mean":
        mats = []
        for a, axis_bins in enumerate(bins):
            A = np.zeros((out[a], grid.dims[a]), dtype=volume.dtype)
            for k, sel in enumerate(axis_bins):
                A[k, sel] = 1.0 / len(sel)
            mats.append(Tensor(A))
        t = matmul(volume.reshape(d * X * Y, Z), mats[2].transpose(1, 0)).reshape(d, X, Y, out[2])
        t = t.transpose(0, 1, 3, 2).reshape(d * X * out[2], Y)
        t = matmul(t, mats[1].transpose(1, 0)).reshape(d, X, out[2], out[1])
        t = t.transpose(0, 3, 2, 1).reshape(d * out[1] * out[2], X)
        t = matmul(t, mats[0].transpose(1, 0)).reshape(d, out[1], out[2], out[0])
        return t.transpose(0, 3, 1, 2)
    raise ConfigError(f"unknown roi pooling mode {mode!r}")


def squeeze_crop(crop):
    """Average a ``[d, a, b, c]`` crop over its spatial cells to ``[d]``."""
    crop = as_tensor(crop)
    return crop.reshape(crop.shape[0], -1).mean(axis=1)

