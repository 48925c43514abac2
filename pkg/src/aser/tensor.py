"""Dense float64 matrices and the TNSR binary file format.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in
row-major order. Weights are ``out x in`` and activations ``in x tokens``.
Every function here returns a fresh array and never mutates its inputs.
"""

from __future__ import annotations

import os
import struct
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]

MAGIC = b"TNSR"
VERSION = 1
_HEADER = struct.Struct("<4sIIQQ")
# Largest payload we are willing to address (bytes); guards rows*cols overflow.
_MAX_PAYLOAD = 2**62


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TensorFileError(Exception):
    """Base class for TNSR decoding failures."""


class BadMagicError(TensorFileError):
    pass


class UnsupportedFormatError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class DimensionOverflowError(TensorFileError):
    pass


def _shape(a: np.ndarray) -> str:
    return "x".join(str(d) for d in a.shape)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array (copying if needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return m


def as_vector(d, name: str = "vector") -> np.ndarray:
    v = np.asarray(d, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return v


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {_shape(a)} by {_shape(b)}")
    return a @ b


def gram(x) -> np.ndarray:
    """Return ``x @ x.T``, symmetrised exactly."""
    x = as_matrix(x, "x")
    g = x @ x.T
    return (g + g.T) / 2.0


def fro_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def _check_scale(a: np.ndarray, d: np.ndarray, axis: int, inverse: bool) -> np.ndarray:
    if d.shape[0] != a.shape[axis]:
        which = "columns" if axis == 1 else "rows"
        raise ShapeError(f"scale vector of length {d.shape[0]} does not match {a.shape[axis]} {which}")
    if inverse:
        if np.any(d == 0.0):
            raise ZeroDivisionError("zero entry in scale vector cannot be inverted")
        return 1.0 / d
    return d


def scale_cols(a, d, inverse: bool = False) -> np.ndarray:
    """Right-multiply by ``diag(d)`` (or ``diag(d)^-1`` when ``inverse``)."""
    a = as_matrix(a, "a")
    d = _check_scale(a, as_vector(d, "d"), 1, inverse)
    return a * d[np.newaxis, :]


def scale_rows(a, d, inverse: bool = False) -> np.ndarray:
    """Left-multiply by ``diag(d)`` (or ``diag(d)^-1`` when ``inverse``)."""
    a = as_matrix(a, "a")
    d = _check_scale(a, as_vector(d, "d"), 0, inverse)
    return a * d[:, np.newaxis]


def encode_tensor(m) -> bytes:
    m = as_matrix(m)
    rows, cols = m.shape
    header = _HEADER.pack(MAGIC, VERSION, 2, rows, cols)
    return header + np.ascontiguousarray(m, dtype="<f8").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, rank, rows, cols = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported TNSR version {version}")
    if rank != 2:
        raise UnsupportedFormatError(f"only rank-2 tensors are supported, got rank {rank}")
    if rows * cols * 8 > _MAX_PAYLOAD:
        raise DimensionOverflowError(f"dimensions {rows}x{cols} exceed addressable size")
    want = rows * cols * 8
    have = len(buf) - _HEADER.size
    if have < want:
        raise TruncatedPayloadError(
            f"header declares {rows}x{cols} ({want} bytes) but payload has {have} bytes"
        )
    if have > want:
        raise UnsupportedFormatError(f"{have - want} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=_HEADER.size)
    m = data.astype(np.float64).reshape(rows, cols)
    if not np.isfinite(m).all():
        raise NonFiniteError("tensor file contains NaN or Inf")
    return m


def write_tensor(path: PathLike, m) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(m))


def read_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
