"""The SATC binary tensor format.

Layout (little-endian, row-major)::

    b"SATC" | version:u8 | dtype:u8 | ndim:u8 | dims:u32 * ndim | payload

dtype 0 is float32, dtype 1 is one byte per boolean.  Masks travel as
companion files named ``<stem>.mask.satc``.
"""
import os
import struct
import tempfile

import numpy as np

MAGIC = b"SATC"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BOOL = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_BOOL: np.dtype("u1")}


class TensorFormatError(ValueError):
    pass


def atomic_write_bytes(path, data):
    """Write to a sibling temp file, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(dims, values, dtype=DTYPE_F32):
    dims = [int(d) for d in dims]
    if not 1 <= len(dims) <= 4:
        raise TensorFormatError(f"ndim must be in 1..4, got {len(dims)}")
    if any(d < 0 or d > 0xFFFFFFFF for d in dims):
        raise TensorFormatError(f"dims out of range: {dims}")
    if dtype not in _DTYPES:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    arr = np.asarray(values)
    if dtype == DTYPE_BOOL:
        arr = arr.astype(bool)
    flat = arr.reshape(-1)
    if flat.size != int(np.prod(dims, dtype=np.int64)):
        raise TensorFormatError(f"{flat.size} values do not fit dims {dims}")
    header = MAGIC + struct.pack("<BBB", VERSION, dtype, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return header + flat.astype(_DTYPES[dtype]).tobytes()


def decode_tensor(data):
    if len(data) < 7:
        raise TensorFormatError("truncated header")
    if data[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {data[:4]!r}")
    version, dtype, ndim = struct.unpack_from("<BBB", data, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if dtype not in _DTYPES:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"bad ndim {ndim}")
    off = 7 + 4 * ndim
    if len(data) < off:
        raise TensorFormatError("truncated header")
    dims = list(struct.unpack_from(f"<{ndim}I", data, 7))
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = count * _DTYPES[dtype].itemsize
    if len(data) - off < nbytes:
        raise TensorFormatError(f"truncated payload: need {nbytes} bytes, have {len(data) - off}")
    if len(data) - off > nbytes:
        raise TensorFormatError("trailing bytes after payload")
    flat = np.frombuffer(data, dtype=_DTYPES[dtype], count=count, offset=off)
    if dtype == DTYPE_BOOL:
        flat = flat.astype(bool)
    else:
        flat = flat.astype(np.float32)
    return dims, flat


def write_tensor(path, dims, values, dtype=DTYPE_F32):
    """Write ``values`` (flat or shaped) with shape ``dims``; output is byte-deterministic."""
    atomic_write_bytes(path, encode_tensor(dims, values, dtype))


def read_tensor(path):
    """Return ``(dims, flat_values)``; float32 for dtype 0, bool for dtype 1."""
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_tensor(data)


def read_array(path):
    dims, flat = read_tensor(path)
    return flat.reshape(dims)


def mask_path(path):
    path = os.fspath(path)
    stem = path[:-5] if path.endswith(".satc") else path
    return stem + ".mask.satc"


def write_masked(path, values, valid=None):
    """Write values plus a ``.mask.satc`` companion (skipped when ``valid`` is None)."""
    values = np.asarray(values, dtype=np.float32)
    write_tensor(path, values.shape, values)
    if valid is not None:
        valid = np.asarray(valid, bool)
        write_tensor(mask_path(path), valid.shape, valid, DTYPE_BOOL)


def read_masked(path):
    """Read values and their companion mask; a missing mask means every finite pixel is valid."""
    values = read_array(path)
    mpath = mask_path(path)
    if os.path.exists(mpath):
        valid = read_array(mpath)
        if valid.shape != values.shape and valid.shape != values.shape[-2:]:
            raise TensorFormatError(f"mask shape {valid.shape} does not match {values.shape}")
    else:
        valid = np.isfinite(values)
    return values, valid


def write_grid(path, g):
    write_masked(path, g.values, g.valid)


def read_grid(path):
    from .grid import Grid2D

    values, valid = read_masked(path)
    if values.ndim == 3 and values.shape[0] == 1:
        values = values[0]
        valid = valid if valid.ndim == 2 else valid[0]
    if values.ndim != 2:
        raise TensorFormatError(f"{path}: expected a single 2-D plane, got {values.shape}")
    return Grid2D.from_array(values, valid)


def write_bands(path, x):
    write_masked(path, x.to_array(), x.valid)


def read_bands(path):
    from .grid import BandStack

    values, valid = read_masked(path)
    return BandStack.from_array(values, valid)
