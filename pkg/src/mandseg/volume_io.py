"""Volume and mask file IO.

Two on-disk formats are supported:

* uncompressed single-file NIfTI-1 (`.nii`): the 348-byte header is read
  with struct; dim[1..3], pixdim[1..3], datatype, vox_offset and
  scl_slope/scl_inter are honored, everything else is ignored.
* raw little-endian payload next to a plain-text sidecar (`<path>.meta`)
  holding `dims`, `spacing` and `dtype` (i16, u8 or f32) as key=value lines.

Payload voxel order is x-fastest in both formats.  Integer data is loaded
without conversion, so HU values survive a round trip exactly.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .grid import Mask, Volume


class LoadError(Exception):
    """Raised when a volume or mask file cannot be parsed."""


_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1"), "f32": np.dtype("<f4")}
_NIFTI_CODES = {2: "u8", 4: "i16", 16: "f32"}
_NIFTI_CODE_OF = {"u8": 2, "i16": 4, "f32": 16}
_BITPIX = {"u8": 8, "i16": 16, "f32": 32}

_HDR_SIZE = 348
_NII_OFFSET = 352.0


def _dtype_key(dtype: np.dtype) -> str:
    kind = np.dtype(dtype)
    if kind == np.int16:
        return "i16"
    if kind == np.uint8:
        return "u8"
    if kind in (np.float32, np.float64):
        return "f32"
    raise ValueError("unsupported dtype %s; cast to int16, uint8 or float32" % kind)


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise LoadError("dims must have 3 entries, got %r" % (dims,))
    if any(d <= 0 for d in dims):
        raise LoadError("nonpositive dimension in dims=%r" % (dims,))
    return dims


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise LoadError("nonpositive spacing in spacing=%r" % (spacing,))
    return spacing


def _payload_to_array(payload: bytes, dims, dtype: np.dtype) -> np.ndarray:
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) < expected:
        raise LoadError("truncated data: expected %d bytes, found %d" % (expected, len(payload)))
    flat = np.frombuffer(payload[:expected], dtype=dtype)
    return flat.reshape(dims, order="F").copy()


# -- raw + sidecar ----------------------------------------------------------

def _read_sidecar(path: str) -> dict:
    meta_path = path + ".meta"
    if not os.path.exists(meta_path):
        raise LoadError("missing sidecar file %s" % meta_path)
    meta = {}
    with open(meta_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise LoadError("malformed sidecar line %r" % line)
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    for key in ("dims", "spacing", "dtype"):
        if key not in meta:
            raise LoadError("sidecar missing key %r" % key)
    return meta


def _load_raw(path: str) -> tuple[np.ndarray, tuple[float, float, float]]:
    meta = _read_sidecar(path)
    try:
        dims = _check_dims(meta["dims"].split(","))
    except ValueError:
        raise LoadError("malformed dims %r" % meta["dims"])
    try:
        spacing = _check_spacing(meta["spacing"].split(","))
    except ValueError:
        raise LoadError("malformed spacing %r" % meta["spacing"])
    if meta["dtype"] not in _DTYPES:
        raise LoadError("unknown dtype %r (expected i16, u8 or f32)" % meta["dtype"])
    with open(path, "rb") as fh:
        payload = fh.read()
    data = _payload_to_array(payload, dims, _DTYPES[meta["dtype"]])
    return data, spacing


def _save_raw(data: np.ndarray, spacing, path: str) -> None:
    key = _dtype_key(data.dtype)
    out = np.ascontiguousarray(data.astype(_DTYPES[key]), dtype=_DTYPES[key])
    with open(path, "wb") as fh:
        fh.write(out.ravel(order="F").tobytes())
    with open(path + ".meta", "w", encoding="utf-8") as fh:
        fh.write("dims=%d,%d,%d\n" % data.shape)
        fh.write("spacing=%.17g,%.17g,%.17g\n" % tuple(spacing))
        fh.write("dtype=%s\n" % key)


# -- NIfTI-1 ----------------------------------------------------------------

def _load_nifti(path: str) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HDR_SIZE:
        raise LoadError("truncated header: %d bytes, need %d" % (len(raw), _HDR_SIZE))
    for endian in ("<", ">"):
        sizeof_hdr = struct.unpack_from(endian + "i", raw, 0)[0]
        if sizeof_hdr == _HDR_SIZE:
            break
    else:
        raise LoadError("malformed header: sizeof_hdr != 348")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    if not 1 <= dim[0] <= 7:
        raise LoadError("malformed header: dim[0]=%d" % dim[0])
    if any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise LoadError("only 3D volumes are supported, got dim=%r" % (dim[: dim[0] + 1],))
    dims = _check_dims(dim[1:4])
    datatype, _bitpix = struct.unpack_from(endian + "2h", raw, 70)
    if datatype not in _NIFTI_CODES:
        raise LoadError("unknown dtype code %d (expected 2, 4 or 16)" % datatype)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    spacing = _check_spacing(pixdim[1:4])
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", raw, 108)
    offset = int(vox_offset) if vox_offset >= _HDR_SIZE else _HDR_SIZE
    dtype = _DTYPES[_NIFTI_CODES[datatype]].newbyteorder(endian)
    data = _payload_to_array(raw[offset:], dims, dtype)
    if data.dtype.byteorder == ">":
        data = data.astype(data.dtype.newbyteorder("<"))
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        data = data.astype(np.float32) * scl_slope + scl_inter
    return data, spacing


def _save_nifti(data: np.ndarray, spacing, path: str) -> None:
    key = _dtype_key(data.dtype)
    out = np.ascontiguousarray(data.astype(_DTYPES[key]), dtype=_DTYPES[key])
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _NIFTI_CODE_OF[key], _BITPIX[key])
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, _NII_OFFSET, 1.0, 0.0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * int(_NII_OFFSET - _HDR_SIZE))
        fh.write(out.ravel(order="F").tobytes())


# -- public API -------------------------------------------------------------

def _is_nifti(path: str) -> bool:
    return path.endswith(".nii")


def load_volume(path: str) -> Volume:
    """Load a volume; format chosen by extension (.nii, else raw+sidecar)."""
    try:
        data, spacing = _load_nifti(path) if _is_nifti(path) else _load_raw(path)
    except OSError as exc:
        raise LoadError("cannot read %s: %s" % (path, exc)) from exc
    return Volume(data, spacing)


def save_volume(v: Volume, path: str) -> None:
    if _is_nifti(path):
        _save_nifti(v.data, v.spacing, path)
    else:
        _save_raw(v.data, v.spacing, path)


def load_mask(path: str) -> Mask:
    """Load a mask saved by save_mask; any nonzero voxel counts as foreground."""
    try:
        data, spacing = _load_nifti(path) if _is_nifti(path) else _load_raw(path)
    except OSError as exc:
        raise LoadError("cannot read %s: %s" % (path, exc)) from exc
    return Mask(data != 0, spacing)


def save_mask(m: Mask, path: str) -> None:
    bits = m.data.astype(np.uint8)
    if _is_nifti(path):
        _save_nifti(bits, m.spacing, path)
    else:
        _save_raw(bits, m.spacing, path)
