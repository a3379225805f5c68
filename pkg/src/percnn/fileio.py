"""Binary file formats: fields (PCNF), trajectories (PCNT), checkpoints (PCNC).

All integers and floats are little-endian; payloads are raw float64 in
channel-major, row-major order, so round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CorruptFileError, UnrecognizedFormatError
from .fields import Field, GridSpec, Trajectory

MAGIC_FIELD = b"PCNF"
MAGIC_TRAJ = b"PCNT"
MAGIC_CKPT = b"PCNC"
VERSION = 1

# Guard against absurd headers before allocating: 2^33 float64 entries = 64 GiB.
_MAX_ENTRIES = 2**33


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CorruptFileError(f"corrupt header: truncated while reading {what}")
    return buf


def _read_struct(f, fmt, what):
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt), what))


def _check_magic(f, expected):
    magic = f.read(4)
    if len(magic) < 4 or magic != expected:
        raise UnrecognizedFormatError(
            f"unrecognized format: expected magic {expected!r}, got {magic!r}"
        )
    (version,) = _read_struct(f, "<I", "version")
    if version != VERSION:
        raise UnrecognizedFormatError(f"unsupported format version {version}")


def _write_grid_header(f, spec: GridSpec, channels: int):
    f.write(struct.pack("<BB", spec.ndim, channels))
    f.write(struct.pack(f"<{spec.ndim}I", *spec.extents))
    f.write(struct.pack("<d", spec.dx))


def _read_grid_header(f):
    ndim, channels = _read_struct(f, "<BB", "grid dimensions")
    if ndim not in (2, 3):
        raise CorruptFileError(f"corrupt header: ndim {ndim} not in (2, 3)")
    if channels < 1:
        raise CorruptFileError("corrupt header: zero channels")
    extents = _read_struct(f, f"<{ndim}I", "grid extents")
    (dx,) = _read_struct(f, "<d", "grid spacing")
    if any(n < 1 for n in extents) or not dx > 0:
        raise CorruptFileError(f"corrupt header: bad extents {extents} or dx {dx}")
    n_entries = channels * int(np.prod(extents))
    if n_entries > _MAX_ENTRIES:
        raise CorruptFileError(f"corrupt header: shape overflow ({n_entries} entries)")
    return GridSpec(extents, dx), channels


def _read_payload(f, shape):
    n = int(np.prod(shape))
    buf = f.read(n * 8)
    if len(buf) != n * 8:
        raise CorruptFileError("truncated payload")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)


def save_field(field: Field, path):
    with open(path, "wb") as f:
        f.write(MAGIC_FIELD)
        f.write(struct.pack("<I", VERSION))
        _write_grid_header(f, field.spec, field.channels)
        f.write(np.ascontiguousarray(field.data, dtype="<f8").tobytes())


def load_field(path) -> Field:
    with open(path, "rb") as f:
        _check_magic(f, MAGIC_FIELD)
        spec, channels = _read_grid_header(f)
        data = _read_payload(f, (channels, *spec.extents))
    return Field(spec, data)


def save_traj(traj: Trajectory, path):
    with open(path, "wb") as f:
        f.write(MAGIC_TRAJ)
        f.write(struct.pack("<I", VERSION))
        _write_grid_header(f, traj.spec, traj.channels)
        f.write(struct.pack("<Idd", traj.n_frames, traj.dt, traj.t0))
        for frame in traj.frames:
            f.write(np.ascontiguousarray(frame.data, dtype="<f8").tobytes())


def load_traj(path) -> Trajectory:
    with open(path, "rb") as f:
        _check_magic(f, MAGIC_TRAJ)
        spec, channels = _read_grid_header(f)
        n_frames, dt, t0 = _read_struct(f, "<Idd", "trajectory header")
        if n_frames < 1:
            raise CorruptFileError("corrupt header: zero frames")
        if n_frames * channels * spec.n_nodes > _MAX_ENTRIES:
            raise CorruptFileError("corrupt header: shape overflow")
        frames = tuple(
            Field(spec, _read_payload(f, (channels, *spec.extents)))
            for _ in range(n_frames)
        )
    return Trajectory(frames, dt, t0)


def save_checkpoint_blob(path, meta: dict, arrays: dict[str, np.ndarray]):
    """Write a PCNC blob: JSON metadata plus named float64 arrays."""
    names = list(arrays)
    header = {
        "meta": meta,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC_CKPT)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint_blob(path):
    with open(path, "rb") as f:
        _check_magic(f, MAGIC_CKPT)
        (hlen,) = _read_struct(f, "<Q", "checkpoint header length")
        if hlen > 2**30:
            raise CorruptFileError("corrupt header: oversized checkpoint header")
        try:
            header = json.loads(_read_exact(f, hlen, "checkpoint header"))
        except json.JSONDecodeError as e:
            raise CorruptFileError(f"corrupt checkpoint header: {e}") from e
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(int(s) for s in entry["shape"])
            if int(np.prod(shape)) > _MAX_ENTRIES:
                raise CorruptFileError("corrupt header: shape overflow")
            arrays[entry["name"]] = _read_payload(f, shape)
    return header["meta"], arrays
