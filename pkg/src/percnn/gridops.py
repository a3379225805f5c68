"""Array-level grid kernels shared by the solver, the autodiff ops and inference.

All functions here operate on plain numpy arrays laid out channel-major,
``(channels, *spatial)``, in float64. Keeping one implementation of each
kernel is what lets the learned convolutions reproduce the finite-difference
operators bit for bit: both sides call the same code with the same summation
order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


# ---------------------------------------------------------------------------
# Boundary padding
# ---------------------------------------------------------------------------

class Periodic:
    """Torus topology: ghost cells copy values from the opposite edge."""

    def __repr__(self):
        return "Periodic()"

    def __eq__(self, other):
        return isinstance(other, Periodic)

    def __hash__(self):
        return hash("Periodic")


@dataclass(frozen=True)
class Dirichlet:
    """Fixed boundary value, one scalar per channel."""

    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


@dataclass(frozen=True)
class Neumann:
    """Fixed outward-normal gradient, one scalar per channel.

    Ghost ring k is built as mirror + 2*k*dx*g (second-order one-sided
    ghost construction).
    """

    gradients: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "gradients", tuple(float(g) for g in self.gradients))


PERIODIC = Periodic()


def _check_mode_channels(mode, channels):
    if isinstance(mode, Dirichlet) and len(mode.values) != channels:
        raise ValueError(
            f"Dirichlet padding carries {len(mode.values)} values for {channels} channels"
        )
    if isinstance(mode, Neumann) and len(mode.gradients) != channels:
        raise ValueError(
            f"Neumann padding carries {len(mode.gradients)} gradients for {channels} channels"
        )


def pad_array(x, width, mode, dx=None):
    """Pad every spatial axis of ``x`` (channels, *spatial) by ``width`` ghost cells."""
    w = int(width)
    if w < 1:
        raise ValueError("pad width must be >= 1")
    spatial = x.shape[1:]
    # Length-1 axes are degenerate and pad by replication; every real axis
    # must be wider than the ghost ring.
    limit = min((n for n in spatial if n > 1), default=1)
    if w >= max(limit, 2):
        raise ValueError(f"pad width {w} too large for grid extents {spatial}")
    if isinstance(mode, Neumann) and w >= min(spatial):
        raise ValueError(f"Neumann pad width {w} needs mirror nodes; extents {spatial}")
    _check_mode_channels(mode, x.shape[0])
    pad_spec = [(0, 0)] + [(w, w)] * len(spatial)
    if isinstance(mode, Periodic):
        return np.pad(x, pad_spec, mode="wrap")
    if isinstance(mode, Dirichlet):
        out = np.stack(
            [
                np.pad(x[c], [(w, w)] * len(spatial), mode="constant", constant_values=v)
                for c, v in enumerate(mode.values)
            ]
        )
        return out
    if isinstance(mode, Neumann):
        if dx is None:
            raise ValueError("Neumann padding needs the grid spacing dx")
        out = x
        for axis in range(1, x.ndim):
            n = out.shape[axis]
            shape = list(out.shape)
            shape[axis] = n + 2 * w
            nxt = np.empty(shape, dtype=out.dtype)
            core = [slice(None)] * out.ndim
            core[axis] = slice(w, w + n)
            nxt[tuple(core)] = out
            grads = np.asarray(mode.gradients, dtype=np.float64)
            gshape = [1] * (out.ndim - 1)
            gshape[0] = x.shape[0]
            grads = grads.reshape(gshape)
            for k in range(1, w + 1):
                lo = [slice(None)] * out.ndim
                hi = [slice(None)] * out.ndim
                lo[axis] = w - k
                hi[axis] = w + n - 1 + k
                mlo = [slice(None)] * out.ndim
                mhi = [slice(None)] * out.ndim
                mlo[axis] = k
                mhi[axis] = n - 1 - k
                shift = 2.0 * k * dx * grads
                nxt[tuple(lo)] = out[tuple(mlo)] + shift
                nxt[tuple(hi)] = out[tuple(mhi)] + shift
            out = nxt
        return out
    raise TypeError(f"unknown padding mode {mode!r}")


def pad_adjoint(gpad, width, mode):
    """Exact adjoint of :func:`pad_array` with respect to its array argument."""
    w = int(width)
    g = gpad
    ndim = g.ndim
    if isinstance(mode, Periodic):
        for axis in range(1, ndim):
            n = g.shape[axis] - 2 * w
            core = [slice(None)] * ndim
            core[axis] = slice(w, w + n)
            folded = np.ascontiguousarray(g[tuple(core)])
            head = [slice(None)] * ndim
            head[axis] = slice(0, w)
            tail = [slice(None)] * ndim
            tail[axis] = slice(n + w, n + 2 * w)
            dst_hi = [slice(None)] * ndim
            dst_hi[axis] = slice(n - w, n)
            dst_lo = [slice(None)] * ndim
            dst_lo[axis] = slice(0, w)
            folded[tuple(dst_hi)] += g[tuple(head)]
            folded[tuple(dst_lo)] += g[tuple(tail)]
            g = folded
        return g
    if isinstance(mode, Dirichlet):
        core = [slice(None)] + [slice(w, s - w) for s in g.shape[1:]]
        return np.ascontiguousarray(g[tuple(core)])
    if isinstance(mode, Neumann):
        # Reverse the axis-sequential construction: ghost gradients flow to
        # their mirror cells, the constant shift drops.
        for axis in reversed(range(1, ndim)):
            n = g.shape[axis] - 2 * w
            core = [slice(None)] * ndim
            core[axis] = slice(w, w + n)
            folded = np.ascontiguousarray(g[tuple(core)])
            for k in range(1, w + 1):
                lo = [slice(None)] * ndim
                hi = [slice(None)] * ndim
                lo[axis] = w - k
                hi[axis] = w + n - 1 + k
                mlo = [slice(None)] * ndim
                mhi = [slice(None)] * ndim
                mlo[axis] = k
                mhi[axis] = n - 1 - k
                folded[tuple(mlo)] += g[tuple(lo)]
                folded[tuple(mhi)] += g[tuple(hi)]
            g = folded
        return g
    raise TypeError(f"unknown padding mode {mode!r}")


def crop_array(x, width):
    """Drop ``width`` ghost cells from every spatial axis."""
    w = int(width)
    sl = [slice(None)] + [slice(w, s - w) for s in x.shape[1:]]
    return np.ascontiguousarray(x[tuple(sl)])


# ---------------------------------------------------------------------------
# Same-size convolution (cross-correlation) on a padded grid
# ---------------------------------------------------------------------------

def check_conv_shapes(x, weights):
    kshape = weights.shape[2:]
    k = kshape[0]
    if any(ks != k for ks in kshape):
        raise ValueError("kernel must be square/cubic")
    if k % 2 == 0 or k > min(x.shape[1:]):
        raise ValueError(f"kernel size {k} invalid for grid extents {x.shape[1:]}")
    if weights.shape[1] != x.shape[0]:
        raise ValueError(
            f"filter expects {weights.shape[1]} input channels, got {x.shape[0]}"
        )
    return k


def conv_accumulate(xp, weights, bias, spatial):
    """Valid-mode accumulation over a pre-padded input, fixed summation order.

    The order is input channel major, then kernel taps row-major. Zero taps
    are skipped; skipping cannot change the result bit pattern because adding
    an exact zero term is the identity on the accumulator.
    """
    kshape = weights.shape[2:]
    c_out = weights.shape[0]
    out = np.empty((c_out, *spatial), dtype=np.float64)
    for o in range(c_out):
        acc = np.zeros(spatial, dtype=np.float64)
        for ci in range(xp.shape[0]):
            xi = xp[ci]
            for tap in np.ndindex(*kshape):
                wv = weights[(o, ci, *tap)]
                if wv == 0.0:
                    continue
                window = tuple(slice(t, t + n) for t, n in zip(tap, spatial))
                acc += wv * xi[window]
        if bias is not None:
            acc = acc + bias[o]
        out[o] = acc
    return out


def conv_same(x, weights, bias=None, mode=PERIODIC, dx=None):
    """Same-size cross-correlation of ``x`` (c_in, *spatial) with ``weights``.

    ``weights`` has shape (c_out, c_in, *kernel); output spatial extents
    equal the input extents, with ghost cells supplied by ``mode``.
    """
    k = check_conv_shapes(x, weights)
    r = k // 2
    xp = pad_array(x, r, mode, dx) if r else x
    return conv_accumulate(xp, weights, bias, x.shape[1:])


def conv_backward_input(g, weights, spatial, mode):
    """Gradient of conv_same w.r.t. its input. ``g`` is (c_out, *spatial)."""
    kshape = weights.shape[2:]
    r = kshape[0] // 2
    c_in = weights.shape[1]
    if r == 0:
        gx = np.zeros((c_in, *spatial), dtype=np.float64)
        for o in range(weights.shape[0]):
            go = g[o]
            for ci in range(c_in):
                wv = weights[(o, ci) + (0,) * len(kshape)]
                if wv != 0.0:
                    gx[ci] += wv * go
        return gx
    padded_shape = (c_in,) + tuple(n + 2 * r for n in spatial)
    gxp = np.zeros(padded_shape, dtype=np.float64)
    for o in range(weights.shape[0]):
        go = g[o]
        for ci in range(c_in):
            gi = gxp[ci]
            for tap in np.ndindex(*kshape):
                wv = weights[(o, ci, *tap)]
                if wv == 0.0:
                    continue
                window = tuple(slice(t, t + n) for t, n in zip(tap, spatial))
                gi[window] += wv * go
    return pad_adjoint(gxp, r, mode)


_EINSUM_SUBS = {2: "ijab,ab->ij", 3: "ijkabc,abc->ijk"}


def conv_backward_filters(g, xp, kshape):
    """Gradient of conv_same w.r.t. the filter weights.

    ``xp`` is the padded input saved from the forward pass and ``g`` the
    output gradient (c_out, *spatial).
    """
    spatial = g.shape[1:]
    c_out = g.shape[0]
    c_in = xp.shape[0]
    gw = np.empty((c_out, c_in, *kshape), dtype=np.float64)
    subs = _EINSUM_SUBS[len(spatial)]
    for ci in range(c_in):
        sw = np.lib.stride_tricks.sliding_window_view(xp[ci], spatial)
        for o in range(c_out):
            gw[o, ci] = np.einsum(subs, sw, g[o])
    return gw


# ---------------------------------------------------------------------------
# Finite-difference stencils as convolution filters
# ---------------------------------------------------------------------------

# Fourth-order central first derivative and 1D second derivative taps.
_DDX_TAPS = np.array([1.0, -8.0, 0.0, 8.0, -1.0])
_D2_TAPS = np.array([-1.0, 16.0, -30.0, 16.0, -1.0])


def ddx_taps(ndim, axis, dx):
    """5-point fourth-order first-derivative stencil embedded in a k=5 kernel."""
    if not 0 <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}D grid")
    kern = np.zeros((5,) * ndim, dtype=np.float64)
    idx = [2] * ndim
    for i in range(5):
        idx[axis] = i
        kern[tuple(idx)] = _DDX_TAPS[i]
    return kern / (12.0 * dx)


def laplacian_taps(ndim, dx):
    """Fourth-order discrete Laplacian: per-axis [-1,16,-30,16,-1]/(12 dx^2) summed.

    In 2D this is the 9-point cross stencil with center -60/(12 dx^2).
    """
    kern = np.zeros((5,) * ndim, dtype=np.float64)
    for axis in range(ndim):
        idx = [2] * ndim
        for i in range(5):
            idx[axis] = i
            kern[tuple(idx)] += _D2_TAPS[i]
    return kern / (12.0 * dx * dx)


def diag_filter(taps, channels):
    """Lift single-channel taps to a (c, c, *k) filter acting per channel."""
    k = taps.shape
    out = np.zeros((channels, channels, *k), dtype=np.float64)
    for c in range(channels):
        out[c, c] = taps
    return out


# ---------------------------------------------------------------------------
# Separable linear interpolation with periodic wrap
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AxisInterp:
    """Per-axis gather indices and blend weights for linear interpolation."""

    i0: np.ndarray
    i1: np.ndarray
    w: np.ndarray
    n_src: int


def axis_interp(n_src, n_dst, ratio: Fraction):
    """Build 1D interpolation indices for destination node j at source coord j*ratio.

    The weights are computed with exact rational arithmetic so that nodes
    that coincide with source nodes get weight exactly 0 or 1 and reproduce
    source values bitwise. The far edge wraps around the torus.
    """
    p, q = ratio.numerator, ratio.denominator
    if p <= 0 or q <= 0:
        raise ValueError("interpolation ratio must be positive")
    if (n_dst - 1) * p > n_src * q:
        raise ValueError(
            f"target grid spans more than one period of the source ({n_dst} nodes at ratio {ratio})"
        )
    i0 = np.empty(n_dst, dtype=np.intp)
    i1 = np.empty(n_dst, dtype=np.intp)
    w = np.empty(n_dst, dtype=np.float64)
    for j in range(n_dst):
        num = j * p
        base = num // q
        rem = num - base * q
        i0[j] = base % n_src
        i1[j] = (base + 1) % n_src
        w[j] = rem / q
    return AxisInterp(i0=i0, i1=i1, w=w, n_src=n_src)


def interp_plan(src_extents, dst_extents, ratio: Fraction):
    """Interpolation plans for every spatial axis (uniform dx ratio)."""
    return tuple(
        axis_interp(ns, nd, ratio) for ns, nd in zip(src_extents, dst_extents)
    )


def interp_apply(x, plan):
    """Apply separable linear interpolation to ``x`` (channels, *spatial)."""
    out = x
    for axis, ax in enumerate(plan, start=1):
        lo = np.take(out, ax.i0, axis=axis)
        hi = np.take(out, ax.i1, axis=axis)
        wshape = [1] * out.ndim
        wshape[axis] = len(ax.w)
        w = ax.w.reshape(wshape)
        out = lo * (1.0 - w) + hi * w
    return out


def interp_adjoint(g, plan, src_extents):
    """Exact adjoint of :func:`interp_apply`."""
    out = g
    for axis in range(len(plan), 0, -1):
        ax = plan[axis - 1]
        shape = list(out.shape)
        shape[axis] = ax.n_src
        acc = np.zeros(shape, dtype=np.float64)
        wshape = [1] * out.ndim
        wshape[axis] = len(ax.w)
        w = ax.w.reshape(wshape)
        idx_lo = [slice(None)] * out.ndim
        idx_lo[axis] = ax.i0
        idx_hi = [slice(None)] * out.ndim
        idx_hi[axis] = ax.i1
        np.add.at(acc, tuple(idx_lo), out * (1.0 - w))
        np.add.at(acc, tuple(idx_hi), out * w)
        out = acc
    return out


# ---------------------------------------------------------------------------
# Strided node selection (measurement locations) and its adjoint
# ---------------------------------------------------------------------------

def gather_strided(x, strides):
    """Select every stride-th node per axis, keeping node 0."""
    sl = [slice(None)] + [slice(0, None, s) for s in strides]
    return np.ascontiguousarray(x[tuple(sl)])


def scatter_strided(g, strides, spatial):
    """Adjoint of :func:`gather_strided`: place values back on the fine grid."""
    out = np.zeros((g.shape[0], *spatial), dtype=np.float64)
    sl = [slice(None)] + [slice(0, None, s) for s in strides]
    out[tuple(sl)] = g
    return out


def subset_strides(fine_extents, coarse_extents, fine_dx, coarse_dx):
    """Strides mapping a coarse grid onto a strided subset of a fine grid.

    Raises ValueError when the coarse grid is not such a subset.
    """
    s = int(round(coarse_dx / fine_dx))
    if s < 1 or abs(coarse_dx - s * fine_dx) > 1e-9 * abs(coarse_dx):
        raise ValueError("coarse grid spacing is not an integer multiple of the fine spacing")
    for nf, nc in zip(fine_extents, coarse_extents):
        if len(range(0, nf, s)) != nc:
            raise ValueError(
                f"coarse extent {nc} is not a stride-{s} subset of fine extent {nf}"
            )
    return (s,) * len(fine_extents)
