"""Binary checkpoint container (format tag ``oddvox-ckpt-v1``).

Layout::

    b"oddvox-ckpt-v1\\n"
    uint64 little-endian header length
    UTF-8 JSON header
    raw little-endian array bytes, concatenated in header order

The header lists every array as ``{"key", "dtype", "shape", "offset", "nbytes"}``
and carries free-form metadata (config echo, optimizer step, epoch, ...).
Array keys are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

FORMAT_TAG = "oddvox-ckpt-v1"
_MAGIC = (FORMAT_TAG + "\n").encode()


def save_checkpoint(path, params, meta=None, optimizer_state=None):
    """Write parameter arrays (name -> array) plus optional AdamW state."""
    arrays = {f"param/{k}": v for k, v in params.items()}
    meta = dict(meta or {})
    if optimizer_state is not None:
        meta["optimizer"] = {
            "step": optimizer_state.step,
            "beta1": optimizer_state.beta1,
            "beta2": optimizer_state.beta2,
            "eps": optimizer_state.eps,
            "weight_decay": optimizer_state.weight_decay,
        }
        for k, v in optimizer_state.m.items():
            arrays[f"adam_m/{k}"] = v
        for k, v in optimizer_state.v.items():
            arrays[f"adam_v/{k}"] = v

    entries, blobs, offset = [], [], 0
    for key, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append(
            {"key": key, "dtype": arr.dtype.str.lstrip("<>=|"), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format": FORMAT_TAG, "meta": meta, "arrays": entries}, sort_keys=True).encode()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(params, meta, optimizer_state_or_None)``."""
    from .optim import AdamWState

    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path} is not an {FORMAT_TAG} checkpoint")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos : pos + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    if header.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: format {header.get('format')!r}, expected {FORMAT_TAG!r}")
    data_start = pos + hlen
    params, m, v = {}, {}, {}
    for e in header["arrays"]:
        start = data_start + e["offset"]
        raw = blob[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {e['key']}")
        arr = np.frombuffer(raw, dtype=np.dtype("<" + e["dtype"])).reshape(e["shape"]).copy()
        kind, name = e["key"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][name] = arr
    meta = header["meta"]
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = AdamWState(step=o["step"], m=m, v=v, beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], weight_decay=o["weight_decay"])
    return params, meta, opt
