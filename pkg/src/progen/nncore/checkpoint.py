"""Flat binary checkpoint container.

Layout::

    PROGEN-CKPT 1
    meta <key> <value>            (zero or more)
    param <name> <d0,d1,...> <offset> <nbytes>
    ...
    end
    <payload: little-endian float32 values, concatenated>

Offsets are byte offsets into the payload, which starts right after the
``end`` line.  Scalars use the shape string ``-``.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = "PROGEN-CKPT 1"


def save_checkpoint(path: str | os.PathLike, params: dict[str, np.ndarray],
                    meta: dict[str, str] | None = None) -> None:
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in str(k)) or "\n" in str(v):
            raise ValueError(f"meta key/value not storable: {k!r}")
        lines.append(f"meta {k} {v}")
    blobs = []
    offset = 0
    for name, arr in params.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name contains whitespace: {name!r}")
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(str(d) for d in np.shape(arr)) or "-"
        lines.append(f"param {name} {shape} {offset} {len(buf)}")
        blobs.append(buf)
        offset += len(buf)
    lines.append("end")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    pos = 0
    entries = []
    meta: dict[str, str] = {}
    first = True
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode("ascii")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise ValueError(f"{path}: not a checkpoint (header {line!r})")
            first = False
            continue
        if line == "end":
            break
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
        elif kind == "param":
            name, shape, off, nbytes = rest.split(" ")
            dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            entries.append((name, dims, int(off), int(nbytes)))
        else:
            raise ValueError(f"{path}: unknown header line {line!r}")
    payload = raw[pos:]
    params = {}
    for name, dims, off, nbytes in entries:
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off)
        params[name] = arr.reshape(dims).astype(np.float32)
    return params, meta
