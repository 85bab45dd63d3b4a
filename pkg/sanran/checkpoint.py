"""Binary checkpoint format.

Layout (all integers little-endian):

    magic      8 bytes  b"SANRANCK"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 text (free-form, YAML by convention)
    count      u32
    index      count entries: name_len u16, name, dtype u8, ndim u8, dims u32 * ndim, offset u64
    data       concatenated little-endian buffers, offsets relative to the data start
"""

import logging
import struct
from pathlib import Path

import numpy as np

from sanran.errors import DataError

log = logging.getLogger(__name__)

MAGIC = b"SANRANCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def save_checkpoint(path: Path, tensors: dict[str, np.ndarray], meta: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name, value in tensors.items():
        value = np.asarray(value)
        if value.dtype not in _CODES:
            value = value.astype(np.float32)
        code = _CODES[value.dtype]
        blob = np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes()
        encoded = name.encode("utf-8")
        index.append(
            struct.pack("<H", len(encoded)) + encoded
            + struct.pack("<BB", code, value.ndim)
            + struct.pack(f"<{value.ndim}I", *value.shape)
            + struct.pack("<Q", offset)
        )
        blobs.append(blob)
        offset += len(blob)

    meta_bytes = meta.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(index)))
        for entry in index:
            f.write(entry)
        for blob in blobs:
            f.write(blob)
    log.debug("saved %d tensors to %s", len(index), path)
    return path


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], str]:
    """Return (tensors, meta). Raises DataError on a missing or malformed file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return _parse(raw)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise DataError(f"malformed checkpoint {path}: {exc}") from exc


def _parse(raw: bytes) -> tuple[dict[str, np.ndarray], str]:
    if raw[:8] != MAGIC:
        raise ValueError("bad magic")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    pos = 16
    meta = raw[pos : pos + meta_len].decode("utf-8")
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if code not in _DTYPES:
            raise ValueError(f"unknown dtype code {code} for {name}")
        entries.append((name, _DTYPES[code], shape, offset))

    tensors = {}
    for name, dtype, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64))
        start = pos + offset
        if start + n * dtype.itemsize > len(raw):
            raise ValueError(f"tensor {name} runs past the end of the file")
        tensors[name] = np.frombuffer(raw, dtype=dtype, count=n, offset=start).reshape(shape).copy()
    return tensors, meta
