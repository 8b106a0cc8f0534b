"""Self-describing binary container used for checkpoints and ground truth.

Layout: an ASCII header of ``key = value`` lines, one ``@array`` line per
stored array (name, dtype, shape, byte offset, byte length), and a blank
line; the raw little-endian array bytes follow.  Files are written to a
temporary sibling and renamed into place.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import MissingFile, ParseError

MAGIC = "mixatlas-container"
VERSION = 1


def _encode(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_encode(v) for v in value)
    text = str(value)
    if "\n" in text:
        raise ValueError("header values must be single-line")
    return text


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    lines = [f"{MAGIC} {VERSION}"]
    for key, value in header.items():
        if "=" in key or " " in key:
            raise ValueError(f"invalid header key {key!r}")
        lines.append(f"{key} = {_encode(value)}")
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"@array {name} {dt.str} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    payload = ("\n".join(lines) + "\n\n").encode("ascii") + b"".join(blobs)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    data = path.read_bytes()
    end = data.find(b"\n\n")
    if end < 0:
        raise ParseError(f"{path}: header terminator not found")
    try:
        lines = data[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: header is not ASCII") from exc
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise ParseError(f"{path}: not a {MAGIC} file")
    if int(magic[1]) > VERSION:
        raise ParseError(f"{path}: unsupported container version {magic[1]}")
    body = data[end + 2:]
    header: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if line.startswith("@array "):
            try:
                _, name, dtype, shape, off, size = line.split()
                off, size = int(off), int(size)
            except ValueError as exc:
                raise ParseError(f"{path}: malformed array line {line!r}") from exc
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            if off + size > len(body):
                raise ParseError(f"{path}: array {name} is truncated")
            arrays[name] = np.frombuffer(body[off:off + size], dtype=np.dtype(dtype)).reshape(dims).copy()
        elif " = " in line:
            key, value = line.split(" = ", 1)
            header[key] = value
        else:
            raise ParseError(f"{path}: malformed header line {line!r}")
    return header, arrays


def parse_bool(text: str) -> bool:
    if text not in ("true", "false"):
        raise ParseError(f"expected true/false, got {text!r}")
    return text == "true"


def parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split()]
