"""Checkpoint directory: a text manifest plus one little-endian float blob.

``manifest.txt`` holds ``key = value`` lines. ``format_version`` comes first,
then ``meta.<key>`` entries whose values are JSON, then one
``tensor.<name> = <dtype> <shape> <offset> <nbytes>`` line per tensor in
blob order. ``tensors.bin`` is the tensors concatenated in that order.
"""

from __future__ import annotations

import json
import os

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "tensors.bin"
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _dtype_tag(arr):
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def save_checkpoint(path, tensors, meta=None):
    """Write ``tensors`` (name -> float array) and JSON-able ``meta`` to directory ``path``."""
    os.makedirs(path, exist_ok=True)
    lines = [f"format_version = {FORMAT_VERSION}"]
    for key in sorted(meta or {}):
        lines.append(f"meta.{key} = {json.dumps(meta[key], sort_keys=True)}")
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        shape = ",".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor.{name} = {tag} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    with open(os.path.join(path, BLOB), "wb") as fh:
        for raw in chunks:
            fh.write(raw)
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    """Parse the manifest into ``(meta, entries)``; entries are (name, tag, shape, offset, nbytes)."""
    with open(os.path.join(path, MANIFEST), encoding="utf-8") as fh:
        lines = [line for line in fh.read().split("\n") if line]
    if not lines or not lines[0].startswith("format_version = "):
        raise CheckpointVersionError("manifest does not start with a format_version line")
    version = lines[0].split("=", 1)[1].strip()
    if version != str(FORMAT_VERSION):
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    meta, entries = {}, []
    for line in lines[1:]:
        key, _, value = line.partition(" = ")
        if key.startswith("meta."):
            meta[key[5:]] = json.loads(value)
        elif key.startswith("tensor."):
            name = key[7:]
            tag, shape_s, off_s, nb_s = value.split()
            if tag not in _DTYPES:
                raise CheckpointError(f"tensor {name}: unknown dtype tag {tag}")
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
            entries.append((name, tag, shape, int(off_s), int(nb_s)))
        else:
            raise CheckpointError(f"unrecognized manifest line: {line!r}")
    return meta, entries


def load_checkpoint(path, expected_shapes=None):
    """Read a checkpoint back as ``(tensors, meta)``.

    ``expected_shapes`` (name -> shape) is checked against the manifest;
    a disagreement raises :class:`ShapeMismatchError` naming the tensor.
    """
    meta, entries = read_manifest(path)
    with open(os.path.join(path, BLOB), "rb") as fh:
        blob = fh.read()
    tensors = {}
    for name, tag, shape, offset, nbytes in entries:
        dt = _DTYPES[tag]
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != nbytes:
            raise ShapeMismatchError(f"tensor {name}: shape {shape} does not match {nbytes} stored bytes")
        if expected_shapes is not None and name in expected_shapes:
            if tuple(expected_shapes[name]) != shape:
                raise ShapeMismatchError(
                    f"tensor {name}: manifest shape {shape}, config expects {tuple(expected_shapes[name])}"
                )
        if offset + nbytes > len(blob):
            raise TruncatedCheckpointError(
                f"tensor {name}: needs bytes [{offset}, {offset + nbytes}) but blob has {len(blob)}"
            )
        arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
        tensors[name] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
    if expected_shapes is not None:
        missing = sorted(set(expected_shapes) - set(tensors))
        if missing:
            raise ShapeMismatchError(f"tensor {missing[0]}: missing from checkpoint")
    return tensors, meta
