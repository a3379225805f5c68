"""Minimal reverse-mode automatic differentiation over dense grid tensors.

Define-by-run: every operation appends a node to a Tape and closes over the
values its exact adjoint needs. The op set is deliberately small; it is
exactly what the recurrent model and its loss require. No broadcasting
beyond what the listed ops define, no higher-order derivatives.
"""

from __future__ import annotations

import numpy as np

from . import gridops
from .gridops import PERIODIC


class TapeTensor:
    """A value tracked on a tape. ``grad`` is populated on leaves by backward."""

    __slots__ = ("tape", "value", "requires_grad", "grad", "is_leaf", "_idx", "_parents", "_vjp")

    def __init__(self, tape, value, requires_grad, is_leaf, idx, parents=(), vjp=None):
        self.tape = tape
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None
        self.is_leaf = is_leaf
        self._idx = idx
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "leaf" if self.is_leaf else "node"
        return f"TapeTensor({kind}, shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Append-only record of operations; backward walks it once in reverse."""

    def __init__(self):
        self._nodes: list[TapeTensor] = []
        self._ran_backward = False

    def leaf(self, value, requires_grad=False) -> TapeTensor:
        value = np.asarray(value, dtype=np.float64)
        t = TapeTensor(self, value, requires_grad, True, len(self._nodes))
        self._nodes.append(t)
        return t

    def constant(self, value) -> TapeTensor:
        return self.leaf(value, requires_grad=False)

    def record(self, value, parents, vjp) -> TapeTensor:
        requires = any(p.requires_grad for p in parents)
        if not requires:
            # Dead subgraph for gradients: keep the value, drop the closure.
            t = TapeTensor(self, value, False, False, len(self._nodes))
        else:
            t = TapeTensor(self, value, True, False, len(self._nodes), tuple(parents), vjp)
        self._nodes.append(t)
        return t

    def backward(self, loss: TapeTensor):
        if loss.value.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        self.backward_seeded([(loss, np.asarray(1.0))])

    def backward_seeded(self, seeds):
        """General vector-Jacobian product: seed adjoints at arbitrary tensors."""
        if self._ran_backward:
            raise RuntimeError("backward already ran on this tape; call zero_grad() first")
        grads: dict[int, np.ndarray] = {}
        for t, g in seeds:
            if t.tape is not self:
                raise ValueError("seed tensor belongs to a different tape")
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.value.shape:
                raise ValueError(f"seed shape {g.shape} != tensor shape {t.value.shape}")
            _acc(grads, t._idx, g)
        for node in reversed(self._nodes):
            g = grads.pop(node._idx, None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, contrib in zip(node._parents, node._vjp(g)):
                if contrib is not None and parent.requires_grad:
                    _acc(grads, parent._idx, contrib)
        for node in self._nodes:
            if node.is_leaf and node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.value)
        self._ran_backward = True

    def zero_grad(self):
        for node in self._nodes:
            node.grad = None
        self._ran_backward = False


def _acc(grads, idx, contrib):
    cur = grads.get(idx)
    grads[idx] = contrib if cur is None else cur + contrib


def backward(loss: TapeTensor):
    """Reverse-mode gradients of a scalar loss for all requires_grad leaves."""
    loss.tape.backward(loss)


def _same_tape(*tensors) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t is not None and t.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def _same_shape(a, b, what):
    if a.value.shape != b.value.shape:
        raise ValueError(f"{what}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# Elementwise and linear ops
# ---------------------------------------------------------------------------

def add(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    tape = _same_tape(a, b)
    _same_shape(a, b, "add")
    return tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def subtract(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    tape = _same_tape(a, b)
    _same_shape(a, b, "subtract")
    return tape.record(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a: TapeTensor, c: float) -> TapeTensor:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def hadamard(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    """Elementwise product; the only nonlinearity inside the recurrent block."""
    tape = _same_tape(a, b)
    _same_shape(a, b, "hadamard")
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def channel_scale(x: TapeTensor, s: TapeTensor) -> TapeTensor:
    """Multiply each channel of x (c, *spatial) by a scalar from s (c,)."""
    tape = _same_tape(x, s)
    if s.value.shape != (x.value.shape[0],):
        raise ValueError(
            f"channel_scale needs one scalar per channel, got {s.value.shape} for {x.value.shape}"
        )
    xv = x.value
    sv = s.value.reshape((-1,) + (1,) * (xv.ndim - 1))

    def vjp(g):
        gx = g * sv if x.requires_grad else None
        gs = (g * xv).reshape(xv.shape[0], -1).sum(axis=1) if s.requires_grad else None
        return gx, gs

    return tape.record(xv * sv, (x, s), vjp)


def tanh(a: TapeTensor) -> TapeTensor:
    y = np.tanh(a.value)
    return a.tape.record(y, (a,), lambda g: (g * (1.0 - y * y),))


_SIG_FLOOR = 1e-12


def bounded_param(theta: TapeTensor, lo, hi) -> TapeTensor:
    """Smooth reparameterization lo + (hi-lo)*sigmoid(theta), elementwise.

    Keeps the value strictly inside (lo, hi) for any finite theta; the
    sigmoid is floored away from {0, 1} so even float-rounding saturation
    cannot touch the bounds.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if not np.all(lo < hi):
        raise ValueError("bounded_param needs lo < hi")
    with np.errstate(over="ignore"):  # exp overflow saturates and is clipped
        sig = np.clip(1.0 / (1.0 + np.exp(-theta.value)), _SIG_FLOOR, 1.0 - _SIG_FLOOR)
    val = lo + (hi - lo) * sig
    return theta.tape.record(
        np.asarray(val), (theta,), lambda g: (g * (hi - lo) * sig * (1.0 - sig),)
    )


def sum_all(a: TapeTensor) -> TapeTensor:
    shape = a.value.shape
    return a.tape.record(
        np.asarray(np.sum(a.value)), (a,), lambda g: (np.full(shape, float(g)),)
    )


def mse(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    """Mean of squared differences over all entries; adjoint 2(a-b)/n."""
    tape = _same_tape(a, b)
    _same_shape(a, b, "mse")
    d = a.value - b.value
    n = d.size
    val = np.asarray(np.mean(d * d))

    def vjp(g):
        ga = g * (2.0 / n) * d
        return ga, -ga

    return tape.record(val, (a, b), vjp)


# ---------------------------------------------------------------------------
# Convolution, resampling, node selection
# ---------------------------------------------------------------------------

def conv(x: TapeTensor, filters: TapeTensor, bias: TapeTensor | None = None,
         mode=PERIODIC, dx: float | None = None) -> TapeTensor:
    """Same-size cross-correlation with ghost cells from the padding mode.

    ``filters`` is (c_out, c_in, *k) with odd k in {1, 3, 5}; output spatial
    extents equal the input extents. Frozen filters simply carry
    requires_grad=False and receive no gradient.
    """
    parents = (x, filters) if bias is None else (x, filters, bias)
    tape = _same_tape(*parents)
    k = gridops.check_conv_shapes(x.value, filters.value)
    if k not in (1, 3, 5):
        raise ValueError(f"filter size {k} not supported; use 1, 3 or 5")
    if bias is not None and bias.value.shape != (filters.value.shape[0],):
        raise ValueError("bias needs one entry per output channel")
    r = k // 2
    xv = x.value
    spatial = xv.shape[1:]
    xp = gridops.pad_array(xv, r, mode, dx) if r else xv
    bv = bias.value if bias is not None else None
    val = gridops.conv_accumulate(xp, filters.value, bv, spatial)
    wv = filters.value
    xp_saved = xp if filters.requires_grad else None
    kshape = wv.shape[2:]

    def vjp(g):
        gx = gridops.conv_backward_input(g, wv, spatial, mode) if x.requires_grad else None
        gw = (
            gridops.conv_backward_filters(g, xp_saved, kshape)
            if filters.requires_grad
            else None
        )
        if bias is None:
            return gx, gw
        gb = g.reshape(g.shape[0], -1).sum(axis=1) if bias.requires_grad else None
        return gx, gw, gb

    return tape.record(val, parents, vjp)


def interp_resize(x: TapeTensor, plan) -> TapeTensor:
    """Differentiable separable linear resampling; adjoint is the exact transpose."""
    src_extents = x.value.shape[1:]
    val = gridops.interp_apply(x.value, plan)
    return x.tape.record(
        val, (x,), lambda g: (gridops.interp_adjoint(g, plan, src_extents),)
    )


def upsample_interp(x: TapeTensor, factor: int) -> TapeTensor:
    """Fixed-weight linear upsampling by an integer factor >= 2 (torus wrap)."""
    from fractions import Fraction

    factor = int(factor)
    if factor < 2:
        raise ValueError("upsample factor must be >= 2")
    src = x.value.shape[1:]
    dst = tuple(n * factor for n in src)
    plan = gridops.interp_plan(src, dst, Fraction(1, factor))
    return interp_resize(x, plan)


def gather_nodes(x: TapeTensor, strides) -> TapeTensor:
    """Select every stride-th node per axis (measurement locations)."""
    strides = tuple(int(s) for s in strides)
    if len(strides) != x.value.ndim - 1 or any(s < 1 for s in strides):
        raise ValueError(f"bad strides {strides} for shape {x.value.shape}")
    spatial = x.value.shape[1:]
    val = gridops.gather_strided(x.value, strides)
    return x.tape.record(
        val, (x,), lambda g: (gridops.scatter_strided(g, strides, spatial),)
    )
