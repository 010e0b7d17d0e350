"""Single-file checkpoint format.

Layout::

    8 bytes   magic  b"PICOCKPT"
    8 bytes   header length N (uint64, little-endian)
    N bytes   UTF-8 JSON header
    payload   concatenated little-endian float32 tensors

Header schema::

    {"format": 1,
     "tensors": [{"name": str, "shape": [int, ...], "dtype": str,
                  "offset": int, "nbytes": int}, ...],
     "meta": {...}}

``offset`` is relative to the payload start. ``dtype`` records the original
torch dtype; every payload is stored as float32 and cast back on load.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PICOCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')}")
    base = 16 + n
    state = {}
    for e in header["tensors"]:
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f4").reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, e["dtype"]))
    return state, header.get("meta", {})


def load_into(model: torch.nn.Module, state: dict[str, torch.Tensor]) -> None:
    """Strict load with a readable shape report."""
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    mismatched = [f"{k}: checkpoint {tuple(state[k].shape)} vs model {tuple(v.shape)}"
                  for k, v in own.items() if k in state and tuple(state[k].shape) != tuple(v.shape)]
    if missing or unexpected or mismatched:
        parts = []
        if missing:
            parts.append(f"missing {len(missing)} tensors (e.g. {missing[0]})")
        if unexpected:
            parts.append(f"unexpected {len(unexpected)} tensors (e.g. {unexpected[0]})")
        if mismatched:
            parts.append(f"shape mismatch: {mismatched[0]}" + (f" (+{len(mismatched) - 1} more)" if len(mismatched) > 1 else ""))
        raise CheckpointError("checkpoint incompatible with model: " + "; ".join(parts))
    model.load_state_dict(state)
