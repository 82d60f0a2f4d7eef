"""Checkpoint archives: a zip holding a JSON manifest and raw tensor bytes.

Layout: `manifest.json` lists metadata plus one entry per tensor (name, shape,
dtype, byte offset and length into `tensors.bin`); `tensors.bin` is the
concatenation of little-endian IEEE-754 payloads in manifest order. Entries
are stored uncompressed with fixed zip timestamps, so identical state always
produces an identical file, and round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

_MANIFEST = "manifest.json"
_PAYLOAD = "tensors.bin"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(module: nn.Module, metadata: dict, path: str | Path) -> None:
    """Atomically write all parameters and buffers of `module` plus metadata."""
    path = Path(path)
    entries = []
    payload = bytearray()
    tensors = list(module.named_parameters()) + list(module.named_buffers())
    for name, tensor in tensors:
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for tensor {name}")
        raw = tensor.detach().cpu().numpy().astype(_DTYPES[tensor.dtype], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": _DTYPES[tensor.dtype],
                "offset": len(payload),
                "size": len(raw),
            }
        )
        payload.extend(raw)
    manifest = json.dumps(
        {"format_version": 1, "metadata": metadata, "tensors": entries}, sort_keys=True
    )
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for arcname, data in ((_MANIFEST, manifest.encode("utf-8")), (_PAYLOAD, bytes(payload))):
                info = zipfile.ZipInfo(arcname, date_time=_FIXED_DATE)
                zf.writestr(info, data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return (metadata, name -> tensor) exactly as saved."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(_MANIFEST).decode("utf-8"))
            payload = zf.read(_PAYLOAD)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    tensors: dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["size"]]
        array = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(array).to(_TORCH_DTYPES[entry["dtype"]])
    return manifest["metadata"], tensors
