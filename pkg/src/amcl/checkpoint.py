"""``AMCL-CKPT v1`` checkpoint files.

Layout::

    AMCL-CKPT v1\\n
    <byte length of the JSON header>\\n
    <JSON header>\\n
    <tensor payload, little-endian, concatenated in header order>

The header holds ``architecture_id``, free-form ``meta`` and one entry per
tensor with its name, dtype, shape, byte offset and byte count.
"""
import json
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointError

MAGIC = b"AMCL-CKPT v1\n"


def _to_numpy(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    return arr.astype(arr.dtype.newbyteorder("<"), order="C")


def save_checkpoint(path, tensors, architecture_id, meta=None):
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = _to_numpy(value)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"architecture_id": architecture_id, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    try:
        with path.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(f"{len(header)}\n".encode("ascii"))
            fh.write(header + b"\n")
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    """Return ``(tensors, header)`` with tensors as numpy arrays keyed by name."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not an AMCL-CKPT v1 file")
    rest = data[len(MAGIC):]
    nl = rest.index(b"\n")
    size = int(rest[:nl])
    header = json.loads(rest[nl + 1: nl + 1 + size])
    payload = memoryview(rest)[nl + 2 + size:]
    tensors = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header


def save_module(path, module, architecture_id, meta=None, extra=None):
    tensors = dict(module.state_dict())
    if extra:
        tensors.update(extra)
    return save_checkpoint(path, tensors, architecture_id, meta)


def load_module(path, module, architecture_id=None, prefix=""):
    """Fill ``module`` from a checkpoint, validating the id and every tensor shape."""
    tensors, header = load_checkpoint(path)
    if architecture_id is not None and header["architecture_id"] != architecture_id:
        raise CheckpointError(
            f"{path}: architecture_id {header['architecture_id']!r} does not match expected {architecture_id!r}")
    state = module.state_dict()
    new_state = {}
    for name, ref in state.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{path}: tensor {key!r} has shape {tuple(arr.shape)}, expected {tuple(ref.shape)}")
        new_state[name] = torch.from_numpy(arr).to(ref.dtype)
    module.load_state_dict(new_state)
    return header, tensors
