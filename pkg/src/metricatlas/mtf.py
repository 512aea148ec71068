"""MTF: a minimal binary container for grid-aligned fields.

Layout: magic ``MTF1`` (4 bytes), header length (u32 little-endian), UTF-8
JSON header, then the payload as a little-endian array with x varying
fastest and the per-voxel components contiguous.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FileFormatError
from .fields import (
    COMPONENT_NAMES,
    MaskField,
    MetricField,
    ScalarField,
    VectorField,
    n_components,
)
from .grid import Grid

MAGIC = b"MTF1"

_VECTOR_NAMES = {2: ("vx", "vy"), 3: ("vx", "vy", "vz")}

KINDS = ("metric", "tensor", "scalar", "vector", "mask", "displacement")


def _component_names(kind: str, dim: int):
    if kind in ("metric", "tensor"):
        return list(COMPONENT_NAMES[dim])
    if kind in ("vector", "displacement"):
        return list(_VECTOR_NAMES[dim])
    if kind == "scalar":
        return ["value"]
    return ["mask"]


def _kind_of(field) -> str:
    kind = getattr(field, "mtf_kind", None)
    if kind is not None:
        return kind
    if isinstance(field, MetricField):
        return "metric"
    if isinstance(field, VectorField):
        return "vector"
    if isinstance(field, ScalarField):
        return "scalar"
    if isinstance(field, MaskField):
        return "mask"
    raise FileFormatError(f"cannot serialize object of type {type(field).__name__}")


def _payload_array(field, kind: str) -> np.ndarray:
    if kind == "mask":
        data = field.data.astype("<u1")[..., None]
    else:
        data = np.asarray(field.data, dtype="<f8")
        if data.ndim == field.grid.dim:
            data = data[..., None]
    ncomp = data.shape[-1]
    front = np.moveaxis(data, -1, 0)  # (ncomp, *shape)
    return front.reshape(ncomp, -1, order="F").T.copy()  # (nvox, ncomp), x fastest


def write_mtf(field, path, kind: str | None = None) -> None:
    """Serialize a field; writes are atomic (temp file + rename)."""
    kind = kind or _kind_of(field)
    if kind not in KINDS:
        raise FileFormatError(f"unknown kind {kind!r}")
    grid = field.grid
    payload = _payload_array(field, kind)
    header = {
        "kind": kind,
        "dim": grid.dim,
        "shape": list(grid.shape),
        "spacing": list(grid.spacing),
        "origin": list(grid.origin),
        "component_order": _component_names(kind, grid.dim),
        "dtype": "u8" if kind == "mask" else "f64",
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload.tobytes()
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".mtf-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_mtf(path):
    """Read an MTF file into its typed field container.

    The original kind is kept on the returned object (``mtf_kind``) so a
    rewrite is byte-identical.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise FileFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise FileFormatError(f"{path}: truncated header ({hlen} bytes declared)")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FileFormatError(f"{path}: invalid JSON header: {exc}") from exc

    for key in ("kind", "dim", "shape", "spacing", "origin", "dtype"):
        if key not in header:
            raise FileFormatError(f"{path}: header misses {key!r}")
    kind = header["kind"]
    if kind not in KINDS:
        raise FileFormatError(f"{path}: unknown kind {kind!r}")
    dim = int(header["dim"])
    shape = tuple(int(s) for s in header["shape"])
    if len(shape) != dim:
        raise FileFormatError(f"{path}: dim {dim} inconsistent with shape {shape}")
    grid = Grid(shape, tuple(header["spacing"]), tuple(header["origin"]))

    want_dtype = "u8" if kind == "mask" else "f64"
    if header["dtype"] != want_dtype:
        raise FileFormatError(
            f"{path}: kind {kind!r} requires dtype {want_dtype!r}, "
            f"got {header['dtype']!r}"
        )
    if kind in ("metric", "tensor"):
        ncomp = n_components(dim)
    elif kind in ("vector", "displacement"):
        ncomp = dim
    else:
        ncomp = 1
    itemsize = 1 if kind == "mask" else 8
    expected = int(np.prod(shape)) * ncomp * itemsize
    payload = blob[8 + hlen :]
    if len(payload) != expected:
        raise FileFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )
    dt = "<u1" if kind == "mask" else "<f8"
    flat = np.frombuffer(payload, dtype=dt).reshape(-1, ncomp)  # (nvox, ncomp)
    front = flat.T.reshape((ncomp,) + shape, order="F")
    data = np.moveaxis(front, 0, -1)

    if kind == "mask":
        out = MaskField(grid, data[..., 0].astype(bool))
    elif kind == "scalar":
        out = ScalarField(grid, data[..., 0])
    elif kind in ("vector", "displacement"):
        out = VectorField(grid, data)
    else:
        out = MetricField(grid, data, spd_flag=(kind == "metric"))
    out.mtf_kind = kind
    return out


def read_header(path) -> dict:
    """Header JSON of an MTF file without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head[:4] != MAGIC or len(head) < 8:
            raise FileFormatError(f"{path}: not an MTF file")
        (hlen,) = struct.unpack("<I", head[4:8])
        hbytes = fh.read(hlen)
    if len(hbytes) != hlen:
        raise FileFormatError(f"{path}: truncated header")
    return json.loads(hbytes.decode("utf-8"))
