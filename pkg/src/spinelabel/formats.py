"""Minimal NIfTI-1 and NRRD readers/writers for 3D scalar volumes.

Only the subset of either format that this package needs is supported:
single-file images, axis-aligned spacing and origin taken from the header,
raw or gzip payloads. Orientation matrices beyond spacing/origin are ignored.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .core import Volume
from .errors import FormatError

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path: str | Path) -> Volume:
    raw = _read_bytes(Path(path))
    if len(raw) < 352:
        raise FormatError(f"{path}: truncated NIfTI file")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise FormatError(f"{path}: not a NIfTI-1 file")
    magic = struct.unpack_from("4s", raw, 344)[0]
    if not magic.startswith(b"n+1"):
        raise FormatError(f"{path}: unsupported NIfTI magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if ndim == 4 and dim[4] == 1:
        ndim = 3
    if ndim != 3:
        raise FormatError(f"{path}: expected a 3D payload, header says {dim[0]}D")
    shape = tuple(int(d) for d in dim[1:4])
    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise FormatError(f"{path}: non-positive voxel spacing {spacing}")
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)
    (sform_code,) = struct.unpack_from(endian + "h", raw, 254)
    if sform_code > 0:
        srow = [struct.unpack_from(endian + "4f", raw, off) for off in (280, 296, 312)]
        origin = tuple(float(r[3]) for r in srow)
    else:
        origin = tuple(float(v) for v in struct.unpack_from(endian + "3f", raw, 268))
    count = int(np.prod(shape))
    start = int(vox_offset) if vox_offset else 352
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    if data.size != count:
        raise FormatError(f"{path}: payload shorter than header dimensions")
    data = data.reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data * scl_slope + scl_inter
    return Volume(np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("=")),
                  spacing=spacing, origin=origin)


def write_nifti(volume: Volume, path: str | Path) -> None:
    path = Path(path)
    data = np.asarray(volume.data)
    code = _NIFTI_CODES.get(data.dtype)
    if code is None:
        data = data.astype(np.float32)
        code = _NIFTI_CODES[data.dtype]
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, data. dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform aligned
    struct.pack_into("<3f", hdr, 268, *volume.origin)
    sx, sy, sz = volume.spacing
    ox, oy, oz = volume.origin
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    struct.pack_into("4s", hdr, 344, b"n+1\x00")
    payload = bytes(hdr) + data.tobytes(order="F")
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, compresslevel=4, mtime=0)
    path.write_bytes(payload)


_NRRD_TYPES = {
    "float": np.float32,
    "double": np.float64,
    "short": np.int16,
    "int16": np.int16,
    "ushort": np.uint16,
    "uint16": np.uint16,
    "int": np.int32,
    "int32": np.int32,
    "uchar": np.uint8,
    "uint8": np.uint8,
    "unsigned char": np.uint8,
}


def _parse_nrrd_vector(text: str) -> list[float]:
    return [float(t) for t in text.strip().lstrip("(").rstrip(")").split(",")]


def read_nrrd(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"NRRD"):
        raise FormatError(f"{path}: not an NRRD file")
    header_end = raw.find(b"\n\n")
    if header_end < 0:
        raise FormatError(f"{path}: missing NRRD header terminator")
    fields = {}
    for line in raw[:header_end].decode("ascii", "replace").splitlines()[1:]:
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise FormatError(f"{path}: malformed NRRD header line {line!r}")
        key, _, value = line.partition(":")
        fields[key.strip().lower()] = value.lstrip("=").strip()
    if int(fields.get("dimension", 0)) != 3:
        raise FormatError(f"{path}: expected a 3D payload")
    shape = tuple(int(t) for t in fields["sizes"].split())
    tname = fields.get("type", "")
    if tname not in _NRRD_TYPES:
        raise FormatError(f"{path}: unsupported NRRD type {tname!r}")
    dtype = np.dtype(_NRRD_TYPES[tname])
    if fields.get("endian", "little") == "big":
        dtype = dtype.newbyteorder(">")
    encoding = fields.get("encoding", "raw")
    payload = raw[header_end + 2:]
    if encoding in ("gzip", "gz"):
        payload = gzip.decompress(payload)
    elif encoding != "raw":
        raise FormatError(f"{path}: unsupported NRRD encoding {encoding!r}")
    if "space directions" in fields:
        rows = [r for r in fields["space directions"].split(") ")]
        vecs = [_parse_nrrd_vector(r) for r in rows]
        spacing = tuple(float(np.linalg.norm(v)) for v in vecs)
    elif "spacings" in fields:
        spacing = tuple(float(t) for t in fields["spacings"].split())
    else:
        spacing = (1.0, 1.0, 1.0)
    origin = tuple(_parse_nrrd_vector(fields["space origin"])) if "space origin" in fields else (0.0, 0.0, 0.0)
    count = int(np.prod(shape))
    data = np.frombuffer(payload, dtype=dtype, count=count)
    if data.size != count:
        raise FormatError(f"{path}: payload shorter than header sizes")
    data = data.reshape(shape, order="F")
    return Volume(np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("=")),
                  spacing=spacing, origin=origin)


def write_nrrd(volume: Volume, path: str | Path) -> None:
    data = np.asarray(volume.data)
    tname = {np.dtype(np.float32): "float", np.dtype(np.float64): "double",
             np.dtype(np.int16): "short", np.dtype(np.uint8): "uchar",
             np.dtype(np.int32): "int"}.get(data.dtype)
    if tname is None:
        data = data.astype(np.float32)
        tname = "float"
    sx, sy, sz = volume.spacing
    header = "\n".join([
        "NRRD0004",
        f"type: {tname}",
        "dimension: 3",
        "sizes: " + " ".join(str(s) for s in data.shape),
        "encoding: gzip",
        "endian: little",
        "space dimension: 3",
        f"space directions: ({sx},0,0) (0,{sy},0) (0,0,{sz})",
        "space origin: ({},{},{})".format(*volume.origin),
    ]) + "\n\n"
    Path(path).write_bytes(header.encode("ascii") + gzip.compress(data.tobytes(order="F"), compresslevel=4, mtime=0))
