"""Checkpoint files: a JSON manifest followed by a raw little-endian payload.

Layout::

    b"ILACKPT1" | uint64 LE manifest length | manifest (UTF-8 JSON) | payload

The manifest maps every tensor name to its shape, dtype, kind (``param`` or
``buffer``), byte offset into the payload and byte length. Files are written
with sorted keys and tensors in name order so identical models produce
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Literal, Optional, Union

import numpy as np

from .errors import CheckpointError
from .model import Model

MAGIC = b"ILACKPT1"
FORMAT_VERSION = 1

Subset = Literal["all", "trainable", "backbone"]


def _select(model: Model, subset: Subset) -> dict[str, tuple[str, np.ndarray]]:
    chosen: dict[str, tuple[str, np.ndarray]] = {}
    for name, t in model.params.items():
        if subset == "all" or (subset == "trainable") == t.requires_grad:
            chosen[name] = ("param", t.data)
    if subset != "backbone":
        for name, buf in model.buffers.items():
            chosen[name] = ("buffer", buf)
    return chosen


def save_checkpoint(
    path: Union[str, Path], model: Model, subset: Subset = "all", metadata: Optional[dict] = None
) -> Path:
    """Write ``model`` tensors (all, adapters+head only, or frozen backbone only)."""
    return write_tensors(path, _select(model, subset), subset, metadata)


def write_tensors(
    path: Union[str, Path], tensors: dict[str, tuple[str, np.ndarray]], subset: str, metadata: Optional[dict] = None
) -> Path:
    """Write ``{name: (kind, array)}`` in the checkpoint layout."""
    path = Path(path)
    entries, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        kind, arr = tensors[name]
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": le.dtype.str,
            "kind": kind,
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "subset": subset,
        "metadata": metadata or {},
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)
    return path


def read_checkpoint(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + n].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    payload = memoryview(blob)[16 + n :]
    arrays = {}
    for name, e in manifest["tensors"].items():
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {name} runs past end of payload")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=np.dtype(e["dtype"]))
        arrays[name] = arr.reshape(e["shape"]).copy()
    return manifest, arrays


def load_checkpoint(model: Model, paths: Iterable[Union[str, Path]], require_complete: bool = True) -> dict:
    """Copy tensors from one or more checkpoint files into ``model``.

    Files compose in order (e.g. frozen backbone, then adapter-only file).
    Any unknown name, shape or dtype mismatch raises CheckpointError, as does
    leaving a model tensor uncovered when ``require_complete`` is set.
    Returns the metadata of the last file.
    """
    covered: set[str] = set()
    metadata: dict = {}
    for path in paths:
        manifest, arrays = read_checkpoint(path)
        metadata = manifest.get("metadata", {})
        for name, arr in arrays.items():
            kind = manifest["tensors"][name]["kind"]
            if kind == "param" and name in model.params:
                target = model.params[name].data
            elif kind == "buffer" and name in model.buffers:
                target = model.buffers[name]
            else:
                raise CheckpointError(f"{path}: tensor {name!r} ({kind}) does not exist in the model")
            if arr.shape != target.shape or arr.dtype.newbyteorder("=") != target.dtype.newbyteorder("="):
                raise CheckpointError(
                    f"{path}: tensor {name!r} is {arr.dtype}{list(arr.shape)}, "
                    f"model expects {target.dtype}{list(target.shape)}"
                )
            if kind == "param":
                model.params[name].data = arr.astype(target.dtype, copy=False)
            else:
                model.buffers[name][...] = arr
            covered.add(name)
    if require_complete:
        missing = (set(model.params) | set(model.buffers)) - covered
        if missing:
            raise CheckpointError(f"checkpoint(s) do not cover {len(missing)} model tensors, e.g. {sorted(missing)[:3]}")
    return metadata


def manifest_param_count(path: Union[str, Path]) -> int:
    """Element count over every parameter entry of a checkpoint manifest."""
    manifest, _ = read_checkpoint(path)
    return sum(int(np.prod(e["shape"])) for e in manifest["tensors"].values() if e["kind"] == "param")
