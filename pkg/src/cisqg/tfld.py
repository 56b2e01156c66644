"""Binary TFLD format for fields and time-sampled fields.

Layout (little endian): b"TFLD", u32 version (=1), u32 N, u64 payload bytes,
then N*N f64 physical values in row-major order.  Time-sampled files extend the
header with u32 frame count, f64 t0, f64 dt and store the frames back to back.
"""
from __future__ import annotations

import struct

import numpy as np

from .spectral import TorusField

MAGIC = b"TFLD"
VERSION = 1
_HEAD = struct.Struct("<4sIIQ")
_TIME = struct.Struct("<Idd")


def encode_field(f: TorusField) -> bytes:
    vals = np.ascontiguousarray(f.values, dtype="<f8")
    payload = vals.tobytes(order="C")
    return _HEAD.pack(MAGIC, VERSION, f.N, len(payload)) + payload


def decode_field(buf: bytes) -> TorusField:
    magic, version, N, nbytes = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError("not a TFLD stream")
    if version != VERSION:
        raise ValueError(f"unsupported TFLD version {version}")
    if nbytes != 8 * N * N:
        raise ValueError("payload length does not match grid size")
    start = _HEAD.size
    vals = np.frombuffer(buf, dtype="<f8", count=N * N, offset=start).reshape(N, N)
    return TorusField.from_values(vals.astype(float))


def write_field(path, f: TorusField) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_field(f))


def read_field(path) -> TorusField:
    with open(path, "rb") as fh:
        return decode_field(fh.read())


def encode_frames(values: np.ndarray, t0: float, dt: float) -> bytes:
    """values: array (T, N, N) of physical frames."""
    values = np.ascontiguousarray(values, dtype="<f8")
    T, N, _ = values.shape
    payload = values.tobytes(order="C")
    return _HEAD.pack(MAGIC, VERSION, N, len(payload)) + _TIME.pack(T, float(t0), float(dt)) + payload


def decode_frames(buf: bytes):
    magic, version, N, nbytes = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC or version != VERSION:
        raise ValueError("not a TFLD v1 stream")
    T, t0, dt = _TIME.unpack_from(buf, _HEAD.size)
    if nbytes != 8 * N * N * T:
        raise ValueError("payload length does not match frame count")
    off = _HEAD.size + _TIME.size
    vals = np.frombuffer(buf, dtype="<f8", count=T * N * N, offset=off).reshape(T, N, N)
    return vals.astype(float), t0, dt


def write_frames(path, values: np.ndarray, t0: float, dt: float) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_frames(values, t0, dt))


def read_frames(path):
    with open(path, "rb") as fh:
        return decode_frames(fh.read())
