"""Versioned single-file checkpoint archive.

Layout: the magic line, an 8-byte little-endian header length, a JSON header
(sorted keys) describing every tensor, then the raw tensor bytes in header
order. Writing the same state twice gives identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataIOError, FormatError

MAGIC = b"ANLCL-CKPT-1\n"


def _flatten(groups: dict) -> dict[str, np.ndarray]:
    flat = {}
    for gname in sorted(groups):
        state = groups[gname]
        if hasattr(state, "state_dict"):
            state = state.state_dict()
        for key in sorted(state):
            value = state[key]
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            flat[f"{gname}/{key}"] = np.ascontiguousarray(value)
    return flat


def save_checkpoint(state: dict, path) -> None:
    """``state`` holds ``groups`` (name -> module or state dict) and JSON-able ``meta``."""
    flat = _flatten(state.get("groups", {}))
    entries, offset = [], 0
    for name, arr in flat.items():
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": int(arr.nbytes)})
        offset += int(arr.nbytes)
    header = json.dumps({"tensors": entries, "meta": state.get("meta", {}), "payload": offset},
                        sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for arr in flat.values():
                fh.write(arr.tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict:
    """Return ``{"groups": {name: {key: tensor}}, "meta": {...}}``."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise FormatError(f"{path} is not an ANLCL checkpoint (bad magic or version)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise FormatError(f"{path} is truncated")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise FormatError(f"{path} is truncated")
    try:
        header = json.loads(blob[pos:pos + hlen])
    except ValueError as exc:
        raise FormatError(f"{path} has a corrupt header") from exc
    pos += hlen
    if len(blob) != pos + header["payload"]:
        raise FormatError(f"{path} is truncated or has trailing bytes")
    groups: dict[str, dict] = {}
    for e in header["tensors"]:
        start = pos + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        gname, key = e["name"].split("/", 1)
        groups.setdefault(gname, {})[key] = torch.from_numpy(arr.copy())
    return {"groups": groups, "meta": header["meta"]}
