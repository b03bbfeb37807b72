"""Single-file binary checkpoints.

Layout::

    b"GPLACKPT"                 8-byte magic
    u32 LE                      format_version
    u64 LE                      header length in bytes
    header (UTF-8 JSON)         {"params": [{name, shape, offset}], "optimizer": {...} | null, "meta": {...}}
    payload                     raw little-endian f32, offsets relative to payload start

The optimizer manifest, when present, carries kind/lr/betas/eps/weight_decay/
step_count plus its own ``tensors`` list (``m/<name>``, ``v/<name>``) laid out
after the parameters.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GPLACKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack(arrays: dict[str, np.ndarray], offset: int) -> tuple[list[dict], list[bytes], int]:
    manifest, blobs = [], []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    return manifest, blobs, offset


def save(path, params: dict[str, np.ndarray], optimizer=None, meta: dict | None = None):
    """Write ``params`` (and optionally an ``Adam`` optimizer's state) atomically."""
    manifest, blobs, offset = _pack(params, 0)
    opt_header = None
    if optimizer is not None:
        st = optimizer.state
        opt_manifest, opt_blobs, offset = _pack(optimizer.state_arrays(), offset)
        blobs.extend(opt_blobs)
        opt_header = {"kind": st.kind, "lr": st.lr, "betas": list(st.betas), "eps": st.eps,
                      "weight_decay": st.weight_decay, "step_count": st.step_count,
                      "tensors": opt_manifest}
    header = json.dumps({"params": manifest, "optimizer": opt_header, "meta": meta or {}},
                        sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict | None, dict]:
    """Returns (params, optimizer_state_or_None, meta).

    The optimizer entry, if present, is the header dict plus an ``arrays`` map.
    """
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version}")
    header = json.loads(raw[20:20 + hlen])
    payload = memoryview(raw)[20 + hlen:]

    def read(entries):
        out = {}
        for e in entries:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
            out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
        return out

    params = read(header["params"])
    opt = header.get("optimizer")
    if opt is not None:
        opt = dict(opt)
        opt["arrays"] = read(opt.pop("tensors"))
    return params, opt, header.get("meta", {})


def restore_optimizer(optimizer, opt_state: dict):
    optimizer.state.lr = opt_state["lr"]
    optimizer.load_state_arrays(opt_state["arrays"], opt_state["step_count"])
