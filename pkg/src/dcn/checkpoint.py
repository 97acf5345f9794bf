"""Binary checkpoint of named tensors.

Layout::

    DCNCKPT1                      8 magic bytes
    key=value lines (UTF-8)       version, precision, step, config.*, meta.*, tensor.*
    <blank line>
    payload                       little-endian IEEE-754 arrays in header order

Each ``tensor.<name>`` value is ``<dtype>;<comma-separated shape>;<offset>;<nbytes>``
with the offset relative to the start of the payload.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DCNCKPT1"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or an unparseable header."""


class CheckpointTruncatedError(CheckpointError):
    """The payload is shorter than the header promises."""


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    step: int = 0
    precision: int = 32
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _clean(value) -> str:
    s = str(value)
    if "\n" in s:
        raise ValueError(f"header value may not contain newlines: {s!r}")
    return s


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    lines = [f"version={ckpt.version}", f"precision={ckpt.precision}", f"step={ckpt.step}"]
    lines += [f"config.{k}={_clean(v)}" for k, v in ckpt.config.items()]
    lines += [f"meta.{k}={_clean(v)}" for k, v in ckpt.meta.items()]
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        code = "f8" if a.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        shape = ",".join(str(d) for d in a.shape)
        lines.append(f"tensor.{name}={code};{shape};{offset};{len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    end = raw.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise CheckpointFormatError(f"{path}: header is not terminated")
    try:
        text = raw[len(MAGIC) : end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"{path}: header is not UTF-8") from exc
    payload = raw[end + 2 :]

    fields = {}
    for line in text.split("\n"):
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise CheckpointFormatError(f"{path}: malformed header line {line!r}")
        fields[key] = value
    try:
        version = int(fields["version"])
        precision = int(fields["precision"])
        step = int(fields["step"])
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: missing or invalid version/precision/step") from exc
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")

    tensors, config, meta = {}, {}, {}
    for key, value in fields.items():
        if key.startswith("config."):
            config[key[7:]] = value
        elif key.startswith("meta."):
            meta[key[5:]] = value
        elif key.startswith("tensor."):
            try:
                code, shape_s, off_s, n_s = value.split(";")
                dtype = _DTYPES[code]
                shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
                off, nbytes = int(off_s), int(n_s)
            except (ValueError, KeyError) as exc:
                raise CheckpointFormatError(f"{path}: malformed tensor entry {key}") from exc
            if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointFormatError(f"{path}: {key} byte count does not match its shape")
            if off + nbytes > len(payload):
                raise CheckpointTruncatedError(
                    f"{path}: payload has {len(payload)} bytes, {key} needs {off + nbytes}"
                )
            arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
            tensors[key[7:]] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    return Checkpoint(tensors, step, precision, config, meta, version)
