"""Grid, field and trajectory data model plus the shared sampling operations.

Conventions: a grid with extent N and spacing dx covers the torus of length
N*dx, node i sitting at i*dx with no duplicated endpoint. Field data is a
float64 array laid out channel-major then row-major spatial.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import gridops
from .gridops import Dirichlet, Neumann, Periodic, PERIODIC

__all__ = [
    "GridSpec",
    "Field",
    "Trajectory",
    "Periodic",
    "Dirichlet",
    "Neumann",
    "PERIODIC",
    "pad",
    "crop",
    "downsample",
    "add_noise",
    "interpolate",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform Cartesian grid: node counts per axis and one spacing dx."""

    extents: tuple[int, ...]
    dx: float

    def __post_init__(self):
        ext = tuple(int(n) for n in self.extents)
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "dx", float(self.dx))
        if len(ext) not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got {len(ext)} axes")
        if any(n < 1 for n in ext):
            raise ValueError(f"grid extents must be positive, got {ext}")
        if not self.dx > 0:
            raise ValueError("grid spacing dx must be positive")

    @property
    def ndim(self) -> int:
        return len(self.extents)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.extents))

    @property
    def domain_lengths(self) -> tuple[float, ...]:
        """Periodic period per axis: extent * dx (no duplicated endpoint)."""
        return tuple(n * self.dx for n in self.extents)


@dataclass(frozen=True)
class Field:
    """One snapshot: (channels, *extents) float64 values on a grid."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != self.spec.ndim + 1 or data.shape[1:] != self.spec.extents:
            raise ValueError(
                f"data shape {data.shape} does not match (channels, {self.spec.extents})"
            )
        if data.shape[0] < 1:
            raise ValueError("field needs at least one channel")
        if not np.isfinite(data).all():
            raise ValueError("field contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, spec: GridSpec, channels: int) -> "Field":
        return cls(spec, np.zeros((channels, *spec.extents)))


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered sequence of shape-identical fields with uniform spacing."""

    frames: tuple[Field, ...]
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "t0", float(self.t0))
        if not self.frames:
            raise ValueError("trajectory needs at least one frame")
        if not self.dt > 0:
            raise ValueError("trajectory dt must be positive")
        first = self.frames[0]
        for f in self.frames[1:]:
            if f.spec != first.spec or f.channels != first.channels:
                raise ValueError("all trajectory frames must share grid and channels")

    @property
    def spec(self) -> GridSpec:
        return self.frames[0].spec

    @property
    def channels(self) -> int:
        return self.frames[0].channels

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_frames)

    def stacked(self) -> np.ndarray:
        """(n_frames, channels, *extents) copy of all frame data."""
        return np.stack([f.data for f in self.frames])


PaddingMode = Periodic | Dirichlet | Neumann


def pad(field: Field, width: int, mode: PaddingMode) -> Field:
    """Extend every axis by ``width`` ghost cells built from ``mode``.

    Periodic copies from the opposite edge; Dirichlet fills the prescribed
    per-channel value; Neumann builds ghost ring k as mirror + 2*k*dx*g.
    """
    data = gridops.pad_array(field.data, width, mode, field.spec.dx)
    spec = GridSpec(tuple(n + 2 * width for n in field.spec.extents), field.spec.dx)
    return Field(spec, data)


def crop(field: Field, width: int) -> Field:
    """Inverse of :func:`pad`: drop ``width`` ghost cells per edge."""
    w = int(width)
    if w < 1 or any(n <= 2 * w for n in field.spec.extents):
        raise ValueError(f"cannot crop {w} cells from extents {field.spec.extents}")
    data = gridops.crop_array(field.data, w)
    spec = GridSpec(tuple(n - 2 * w for n in field.spec.extents), field.spec.dx)
    return Field(spec, data)


def downsample(traj: Trajectory, space_stride: int, time_stride: int) -> Trajectory:
    """Keep every stride-th frame and every stride-th node per axis (node 0 kept)."""
    ss, ts = int(space_stride), int(time_stride)
    if ss < 1 or ts < 1:
        raise ValueError("strides must be >= 1")
    new_extents = tuple(len(range(0, n, ss)) for n in traj.spec.extents)
    if any(n < 5 for n in new_extents):
        raise ValueError(
            f"space stride {ss} leaves extents {new_extents}; need at least 5 nodes per axis"
        )
    spec = GridSpec(new_extents, traj.spec.dx * ss)
    strides = (ss,) * traj.spec.ndim
    frames = tuple(
        Field(spec, gridops.gather_strided(f.data, strides))
        for f in traj.frames[::ts]
    )
    return Trajectory(frames, traj.dt * ts, traj.t0)


def add_noise(traj: Trajectory, level: float, seed: int) -> Trajectory:
    """Add i.i.d. Gaussian noise, std = level * per-channel std over the trajectory."""
    if level < 0:
        raise ValueError("noise level must be >= 0")
    if level == 0:
        return traj
    s = traj.channels
    n_per_frame = traj.spec.n_nodes
    total = traj.n_frames * n_per_frame
    acc = np.zeros(s)
    acc2 = np.zeros(s)
    for f in traj.frames:
        flat = f.data.reshape(s, n_per_frame)
        acc += flat.sum(axis=1)
        acc2 += (flat * flat).sum(axis=1)
    mean = acc / total
    var = np.maximum(acc2 / total - mean * mean, 0.0)
    sigma = level * np.sqrt(var)
    rng = np.random.default_rng(seed)
    shape = (s,) + (1,) * traj.spec.ndim
    sigma = sigma.reshape(shape)
    frames = tuple(
        Field(traj.spec, f.data + sigma * rng.standard_normal(f.data.shape))
        for f in traj.frames
    )
    return Trajectory(frames, traj.dt, traj.t0)


def _interp_ratio(src: GridSpec, dst: GridSpec) -> Fraction:
    ratio = Fraction(dst.dx) / Fraction(src.dx)
    if ratio > 1:
        raise ValueError(
            f"target spacing {dst.dx} coarser than source {src.dx}; interpolation only refines"
        )
    return ratio

def interpolate(field: Field, target: GridSpec) -> Field:
    """Bilinear (2D) / trilinear (3D) refinement with periodic wrap at the far edge.

    Destination node j maps to source coordinate j * dst.dx / src.dx; the
    mapping is evaluated in exact rational arithmetic so coincident nodes
    reproduce source values bitwise.
    """
    if target.ndim != field.spec.ndim:
        raise ValueError(
            f"target grid is {target.ndim}D but the field is {field.spec.ndim}D"
        )
    ratio = _interp_ratio(field.spec, target)
    plan = gridops.interp_plan(field.spec.extents, target.extents, ratio)
    return Field(target, gridops.interp_apply(field.data, plan))
