"""Ground-truth data generation: FD stencils, RK4 time stepping, seeded ICs.

The benchmark systems are the two-species Gray-Scott reaction-diffusion
equations (2D and 3D) and the 2D Burgers equations, all with two state
channels (u, v).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import gridops
from .errors import BlowUpError
from .fields import Field, GridSpec, Trajectory, PaddingMode, PERIODIC

GRAY_SCOTT_2D = "gs2d"
GRAY_SCOTT_3D = "gs3d"
BURGERS_2D = "burgers2d"

# Any state value beyond this (or non-finite) aborts the integration.
BLOWUP_LIMIT = 1e6


@dataclass(frozen=True)
class PdeSystem:
    """Descriptor of a governing system and its coefficients.

    Gray-Scott uses (mu_u, mu_v, kappa, f_feed); Burgers uses nu. All three
    systems evolve two channels.
    """

    kind: str
    mu_u: float = 0.0
    mu_v: float = 0.0
    kappa: float = 0.0
    f_feed: float = 0.0
    nu: float = 0.0
    bc: PaddingMode = dc_field(default_factory=lambda: PERIODIC)

    def __post_init__(self):
        if self.kind not in (GRAY_SCOTT_2D, GRAY_SCOTT_3D, BURGERS_2D):
            raise ValueError(f"unknown system kind {self.kind!r}")
        for name in ("mu_u", "mu_v", "nu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def ndim(self) -> int:
        return 3 if self.kind == GRAY_SCOTT_3D else 2

    @property
    def is_gray_scott(self) -> bool:
        return self.kind in (GRAY_SCOTT_2D, GRAY_SCOTT_3D)

    def diffusion(self) -> np.ndarray:
        """Per-channel diffusion coefficients."""
        if self.is_gray_scott:
            return np.array([self.mu_u, self.mu_v])
        return np.array([self.nu, self.nu])


def gray_scott_2d(mu_u=2e-5, mu_v=5e-6, kappa=0.06, f_feed=0.04, bc=PERIODIC):
    return PdeSystem(GRAY_SCOTT_2D, mu_u=mu_u, mu_v=mu_v, kappa=kappa, f_feed=f_feed, bc=bc)


def gray_scott_3d(mu_u=0.2, mu_v=0.1, kappa=0.055, f_feed=0.025, bc=PERIODIC):
    return PdeSystem(GRAY_SCOTT_3D, mu_u=mu_u, mu_v=mu_v, kappa=kappa, f_feed=f_feed, bc=bc)


def burgers_2d(nu=0.005, bc=PERIODIC):
    return PdeSystem(BURGERS_2D, nu=nu, bc=bc)


@dataclass(frozen=True)
class Stencil:
    """FD stencil as a dense kernel; pure derivatives annihilate constants."""

    taps: np.ndarray
    dx_power: int

    @classmethod
    def laplacian(cls, ndim, dx):
        return cls(gridops.laplacian_taps(ndim, dx), 2)

    @classmethod
    def first_derivative(cls, ndim, axis, dx):
        return cls(gridops.ddx_taps(ndim, axis, dx), 1)


def _apply_stencil(data, taps, mode, dx):
    filt = gridops.diag_filter(taps, data.shape[0])
    return gridops.conv_same(data, filt, None, mode, dx)


def laplacian(field: Field, mode: PaddingMode = PERIODIC) -> Field:
    """Fourth-order discrete Laplacian applied per channel."""
    taps = gridops.laplacian_taps(field.spec.ndim, field.spec.dx)
    return Field(field.spec, _apply_stencil(field.data, taps, mode, field.spec.dx))


def ddx(field: Field, axis: int, mode: PaddingMode = PERIODIC) -> Field:
    """Fourth-order central first derivative along a spatial axis."""
    taps = gridops.ddx_taps(field.spec.ndim, axis, field.spec.dx)
    return Field(field.spec, _apply_stencil(field.data, taps, mode, field.spec.dx))


def _rhs_array(system: PdeSystem, data, spec: GridSpec):
    if data.shape[0] != 2:
        raise ValueError(f"{system.kind} expects 2 channels, got {data.shape[0]}")
    dx = spec.dx
    lap = _apply_stencil(data, gridops.laplacian_taps(spec.ndim, dx), system.bc, dx)
    if system.is_gray_scott:
        u, v = data[0], data[1]
        uvv = u * v * v
        out = np.empty_like(data)
        out[0] = system.mu_u * lap[0] + (-uvv + system.f_feed * (1.0 - u))
        out[1] = system.mu_v * lap[1] + (uvv - (system.f_feed + system.kappa) * v)
        return out
    # Burgers: u_t = nu*lap(u) - (u d/dx + v d/dy) u, per channel.
    out = system.nu * lap
    for axis in range(spec.ndim):
        d_axis = _apply_stencil(
            data, gridops.ddx_taps(spec.ndim, axis, dx), system.bc, dx
        )
        out -= data[axis] * d_axis
    return out


def rhs(system: PdeSystem, u: Field) -> Field:
    """Right-hand side of the governing equations evaluated on a snapshot."""
    return Field(u.spec, _rhs_array(system, u.data, u.spec))


def _check_stage(arr, stage, step=None):
    if not np.isfinite(arr).all() or np.abs(arr).max() > BLOWUP_LIMIT:
        where = f" at step {step}" if step is not None else ""
        raise BlowUpError(
            f"blow-up in RK4 stage {stage}{where}: max |value| = {np.abs(arr).max():.3e}",
            step=step,
            stage=stage,
        )


def rk4_step(system, u: Field, dt: float, _step_index=None) -> Field:
    """One classical four-stage Runge-Kutta step.

    ``system`` is a PdeSystem or any callable Field -> Field giving du/dt.
    Boundary padding is applied inside each stage evaluation.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    spec = u.spec
    if callable(system):
        fn = lambda arr: system(Field(spec, arr)).data
    else:
        fn = lambda arr: _rhs_array(system, arr, spec)
    y = u.data
    k1 = fn(y)
    _check_stage(k1, "k1", _step_index)
    k2 = fn(y + (0.5 * dt) * k1)
    _check_stage(k2, "k2", _step_index)
    k3 = fn(y + (0.5 * dt) * k2)
    _check_stage(k3, "k3", _step_index)
    k4 = fn(y + dt * k3)
    _check_stage(k4, "k4", _step_index)
    out = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_stage(out, "update", _step_index)
    return Field(spec, out)


def generate(system, ic: Field, dt: float, n_steps: int, record_every: int = 1) -> Trajectory:
    """Integrate from ``ic`` for ``n_steps`` RK4 steps, recording every k-th frame."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not callable(system) and system.ndim != ic.spec.ndim:
        raise ValueError(f"{system.kind} is {system.ndim}D but the IC is {ic.spec.ndim}D")
    frames = [ic]
    state = ic
    for step in range(1, n_steps + 1):
        state = rk4_step(system, state, dt, _step_index=step)
        if step % record_every == 0:
            frames.append(state)
    return Trajectory(tuple(frames), dt * record_every)


def default_ic(system: PdeSystem, spec: GridSpec, seed: int) -> Field:
    """Reproducible initial conditions.

    Gray-Scott: (u, v) = (1, 0) background with seeded square blobs at
    (u, v) = (0.5, 0.25). Burgers: band-limited random periodic field from
    Fourier modes |k| <= 4 per axis, zero mean, scaled to [-0.7, 0.7].
    """
    rng = np.random.default_rng(seed)
    if system.is_gray_scott:
        u = np.ones(spec.extents)
        v = np.zeros(spec.extents)
        n_blobs = 2
        side = max(3, min(spec.extents) // 8)
        for _ in range(n_blobs):
            corner = [int(rng.integers(0, n - side + 1)) for n in spec.extents]
            box = tuple(slice(c, c + side) for c in corner)
            u[box] = 0.5
            v[box] = 0.25
        return Field(spec, np.stack([u, v]))
    # Burgers: random spectrum, zero DC mode, per channel.
    channels = []
    for _ in range(2):
        shape = spec.extents
        half = shape[-1] // 2 + 1
        coeffs = np.zeros(shape[:-1] + (half,), dtype=np.complex128)
        kmax = 4
        for idx in np.ndindex(*(2 * kmax + 1,) * spec.ndim):
            k = [i - kmax for i in idx]
            if all(c == 0 for c in k):
                continue
            if k[-1] < 0:
                continue  # rfft stores non-negative frequencies on the last axis
            pos = tuple(ki % n for ki, n in zip(k[:-1], shape[:-1])) + (k[-1],)
            coeffs[pos] = rng.standard_normal() + 1j * rng.standard_normal()
        f = np.fft.irfftn(coeffs, s=shape, axes=tuple(range(spec.ndim)))
        f -= f.mean()
        peak = np.abs(f).max()
        if peak > 0:
            f *= 0.7 / peak
        channels.append(f)
    return Field(spec, np.stack(channels))
