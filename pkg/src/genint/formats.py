"""Binary formats: MNIST IDX files, GINT tensor files, and dataset bundles.

GINT layout (little-endian)::

    b"GINT" | u32 version=1 | u8 dtype (0 = float32) | u8 ndim | ndim * u32 dims | payload

A dataset bundle is a directory holding ``images.gint``, ``labels.gint``,
an optional ``nuisance.gint`` and a ``meta.json``.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

GINT_MAGIC = b"GINT"
GINT_VERSION = 1
GINT_DTYPES = {0: np.dtype("<f4")}
_MAX_U32 = 2**32 - 1


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Read an MNIST IDX file.

    Image files give a float32 array of shape ``[n, rows, cols, 1]`` scaled to
    [0, 1]; label files give an int64 array of class indices.
    """
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated IDX image header")
        n, rows, cols = struct.unpack(">III", raw[4:16])
        expected = n * rows * cols
        payload = raw[16:]
        if len(payload) < expected:
            raise FormatError(
                f"{path}: payload length {len(payload)} shorter than {expected} bytes"
            )
        pixels = np.frombuffer(payload, dtype=np.uint8, count=expected)
        images = pixels.reshape(n, rows, cols, 1).astype(np.float32) / np.float32(255)
        return images
    if magic == IDX_LABELS_MAGIC:
        (n,) = struct.unpack(">I", raw[4:8])
        payload = raw[8:]
        if len(payload) < n:
            raise FormatError(f"{path}: payload length {len(payload)} shorter than {n} bytes")
        return np.frombuffer(payload, dtype=np.uint8, count=n).astype(np.int64)
    raise FormatError(f"{path}: unrecognised IDX magic number 0x{magic:08X}")


def write_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 images ``[n, rows, cols]`` (or float in [0, 1]) as IDX."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        arr = arr[..., 0]
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    n, rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels) -> None:
    arr = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, arr.shape[0]))
        fh.write(arr.tobytes())


def tensor_to_bytes(t) -> bytes:
    # np.ascontiguousarray would promote 0-d input to 1-d
    arr = np.array(t, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise FormatError("tensor has too many dimensions for GINT")
    if any(d > _MAX_U32 for d in arr.shape):
        raise FormatError(f"dimension overflow in shape {arr.shape}")
    header = GINT_MAGIC + struct.pack("<IBB", GINT_VERSION, 0, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(raw: bytes, source="<bytes>") -> np.ndarray:
    if raw[:4] != GINT_MAGIC:
        raise FormatError(f"{source}: bad magic {raw[:4]!r}, expected {GINT_MAGIC!r}")
    if len(raw) < 10:
        raise FormatError(f"{source}: truncated GINT header")
    version, dtype_code, ndim = struct.unpack("<IBB", raw[4:10])
    if version != GINT_VERSION:
        raise FormatError(f"{source}: unsupported GINT version {version}")
    if dtype_code not in GINT_DTYPES:
        raise FormatError(f"{source}: unknown dtype code {dtype_code}")
    end = 10 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{source}: truncated GINT shape")
    shape = struct.unpack(f"<{ndim}I", raw[10:end])
    dtype = GINT_DTYPES[dtype_code]
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * dtype.itemsize
    if len(raw) - end != nbytes:
        raise FormatError(
            f"{source}: payload has {len(raw) - end} bytes, shape {shape} needs {nbytes}"
        )
    return np.frombuffer(raw, dtype=dtype, count=count, offset=end).reshape(shape).astype(np.float32)


def write_tensor_file(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tensor_file(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), source=str(path))


def file_checksum(path) -> str:
    """Git-style blob SHA-1 of a file's contents."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
