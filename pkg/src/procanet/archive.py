"""Named float32 arrays in a manifest + payload container.

Layout::

    magic (4 bytes) | u32 LE version | u32 LE manifest length
    | manifest: UTF-8 lines "name:d0,d1,..." | f32 LE payloads in manifest order
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    ManifestMismatchError,
    PayloadLengthError,
    TruncatedError,
    VersionMismatchError,
)

VERSION = 1
_HEADER = struct.Struct("<4sII")


def _manifest(arrays: Mapping[str, np.ndarray]) -> bytes:
    lines = []
    for name, arr in arrays.items():
        if ":" in name or "\n" in name:
            raise ValueError(f"invalid array name {name!r}")
        lines.append(f"{name}:{','.join(str(d) for d in arr.shape)}")
    return "\n".join(lines).encode("utf-8")


def write_archive(path, magic: bytes, arrays: Mapping[str, np.ndarray]) -> None:
    manifest = _manifest(arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(magic, VERSION, len(manifest)))
        fh.write(manifest)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def _parse_manifest(text: str):
    entries = []
    for line in text.splitlines():
        name, sep, dims = line.rpartition(":")
        if not sep or not name:
            raise FormatError(f"malformed manifest line {line!r}")
        try:
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        except ValueError:
            raise FormatError(f"malformed shape in manifest line {line!r}") from None
        if any(d < 0 for d in shape):
            raise FormatError(f"negative dimension in manifest line {line!r}")
        entries.append((name, shape))
    return entries


def read_archive(path, magic: bytes) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedError(f"{path}: file ends inside the header")
    found, version, mlen = _HEADER.unpack_from(data)
    if found != magic:
        raise BadMagicError(f"{path}: bad magic {found!r}, expected {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if len(data) < _HEADER.size + mlen:
        raise TruncatedError(f"{path}: file ends inside the manifest")
    try:
        text = data[_HEADER.size:_HEADER.size + mlen].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: manifest is not valid UTF-8") from None
    entries = _parse_manifest(text)
    payload = memoryview(data)[_HEADER.size + mlen:]
    expected = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in entries) * 4
    if expected != len(payload):
        raise PayloadLengthError(
            f"{path}: payload length mismatch, manifest implies {expected} bytes "
            f"but {len(payload)} are present")
    out, offset = {}, 0
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        out[name] = arr.astype(np.float32).reshape(shape)
        offset += count * 4
    return out


def check_shapes(arrays: Mapping[str, np.ndarray], expected: Mapping[str, tuple], what: str):
    """Raise unless ``arrays`` holds exactly ``expected`` names and shapes, in order."""
    got = [(k, tuple(v.shape)) for k, v in arrays.items()]
    want = [(k, tuple(s)) for k, s in expected.items()]
    if got != want:
        diff = next(((g, w) for g, w in zip(got, want) if g != w), None)
        detail = f"first difference {diff[0]} vs {diff[1]}" if diff else \
            f"{len(got)} entries vs {len(want)} expected"
        raise ManifestMismatchError(f"{what} manifest disagrees with expected shapes: {detail}")
