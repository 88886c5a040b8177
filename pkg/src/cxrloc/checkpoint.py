"""Checkpoint container: a single .npz holding named parameter arrays,
optional Adam accumulators, and a JSON metadata blob.

Layout (documented for external readers):
  meta             zero-dim unicode array with a JSON object
                   {"format": "cxrloc-ckpt", "version": 1, "model": ..., "extra": {...}}
  param:<name>     float64 parameter arrays
  adam:m:<name>    first-moment accumulators (optional)
  adam:v:<name>    second-moment accumulators (optional)
  adam:t           zero-dim int step counter (optional)
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import Tensor
from .nn import AdamState

FORMAT = "cxrloc-ckpt"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model_kind: str, params: dict[str, Tensor],
                    adam: AdamState | None = None, extra: dict | None = None) -> None:
    arrays = {f"param:{k}": v.data for k, v in params.items()}
    if adam is not None:
        for k, v in adam.m.items():
            arrays[f"adam:m:{k}"] = v
        for k, v in adam.v.items():
            arrays[f"adam:v:{k}"] = v
        arrays["adam:t"] = np.asarray(adam.t)
    meta = {"format": FORMAT, "version": VERSION, "model": model_kind,
            "extra": extra or {}}
    arrays["meta"] = np.asarray(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (meta dict, {name: ndarray} params, AdamState or None)."""
    with np.load(path, allow_pickle=False) as zf:
        if "meta" not in zf:
            raise CheckpointError(f"{path} is not a cxrloc checkpoint")
        meta = json.loads(str(zf["meta"]))
        if meta.get("format") != FORMAT:
            raise CheckpointError(f"unexpected checkpoint format {meta.get('format')!r}")
        if meta.get("version") != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
        params = {}
        m, v = {}, {}
        t = 0
        for key in zf.files:
            if key.startswith("param:"):
                params[key[len("param:"):]] = zf[key]
            elif key.startswith("adam:m:"):
                m[key[len("adam:m:"):]] = zf[key]
            elif key.startswith("adam:v:"):
                v[key[len("adam:v:"):]] = zf[key]
            elif key == "adam:t":
                t = int(zf[key])
        adam = AdamState(m=m, v=v, t=t) if m else None
    return meta, params, adam


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"checkpoint/model mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, tensor in params.items():
        if tensor.data.shape != arrays[name].shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {tensor.data.shape} vs {arrays[name].shape}")
        tensor.data = arrays[name].astype(np.float64)
