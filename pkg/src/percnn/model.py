"""The recurrent network: initial state generator, product block, physics highway.

Architecture: a coarse noisy snapshot is decoded to a fine-resolution initial
state (ISG), then rolled forward with u_{k+1} = u_k + F(u_k)*dt where F is a
sum of channelwise products of parallel convolutions (the product block) plus
a frozen-stencil diffusion highway whose per-channel coefficient is trainable
inside hard bounds. All padding is periodic; the model state keeps the same
fine grid at every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from . import gridops
from .autodiff import Tape, TapeTensor
from .errors import BlowUpError
from .fields import Field, GridSpec, Trajectory
from .gridops import PERIODIC

AXIS_NAMES = ("x", "y", "z")


@dataclass(frozen=True)
class PiBlockConfig:
    """Parallel conv layers fused by elementwise product, then a 1x1 mix."""

    n_layers: int
    n_channels: int
    filter_sizes: tuple[int, ...]
    biases: tuple[bool, ...]
    mix_bias: bool = True
    # When set, layer 1 is frozen to first-derivative stencils; entry c is
    # (state_channel, axis) for feature channel c.
    frozen_first: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "filter_sizes", tuple(int(k) for k in self.filter_sizes))
        object.__setattr__(self, "biases", tuple(bool(b) for b in self.biases))
        if self.frozen_first is not None:
            object.__setattr__(
                self, "frozen_first", tuple((int(c), int(a)) for c, a in self.frozen_first)
            )
        if self.n_layers < 1 or self.n_channels < 1:
            raise ValueError("product block needs n_layers >= 1 and n_channels >= 1")
        if len(self.filter_sizes) != self.n_layers or len(self.biases) != self.n_layers:
            raise ValueError("filter_sizes and biases need one entry per layer")
        if any(k not in (1, 3, 5) for k in self.filter_sizes):
            raise ValueError("filter sizes must be odd in {1, 3, 5}")
        if self.frozen_first is not None:
            if len(self.frozen_first) != self.n_channels:
                raise ValueError("frozen first layer needs one derivative tag per channel")
            if self.filter_sizes[0] != 5:
                raise ValueError("frozen derivative filters use the 5-point stencil")
            if self.biases[0]:
                raise ValueError("frozen derivative layer carries no bias")


@dataclass(frozen=True)
class IsgConfig:
    """Initial state generator: fixed upsample plus a small conv decoder."""

    hidden_channels: int
    filter_size: int = 3

    def __post_init__(self):
        if self.hidden_channels < 1:
            raise ValueError("ISG needs at least one hidden channel")
        if self.filter_size not in (1, 3, 5):
            raise ValueError("ISG filter size must be odd in {1, 3, 5}")


@dataclass(frozen=True)
class HighwayConfig:
    """Frozen Laplacian branch with bounded per-channel coefficients."""

    enabled: bool = True
    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if self.enabled:
            if not self.lower or len(self.lower) != len(self.upper):
                raise ValueError("highway needs matching per-channel bounds")
            if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
                raise ValueError("highway bounds need lower < upper")


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    fine: GridSpec
    coarse: GridSpec
    dt: float
    pi: PiBlockConfig
    isg: IsgConfig
    highway: HighwayConfig

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("model needs at least one state channel")
        if self.fine.ndim != self.coarse.ndim:
            raise ValueError("fine and coarse grids must share dimensionality")
        if not self.dt > 0:
            raise ValueError("model dt must be positive")
        if self.highway.enabled and len(self.highway.lower) != self.channels:
            raise ValueError("highway bounds need one pair per state channel")
        if self.pi.frozen_first is not None:
            for c, axis in self.pi.frozen_first:
                if not (0 <= c < self.channels and 0 <= axis < self.fine.ndim):
                    raise ValueError(f"bad derivative tag ({c}, {axis})")


def _uniform(rng, shape, half_width):
    return rng.uniform(-half_width, half_width, size=shape)


class PercnnModel:
    """Trainable parameters plus the frozen physics pieces.

    ``params`` maps names to float64 arrays in a fixed insertion order; the
    frozen stencils live outside the dict so no optimizer can touch them.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        ndim = cfg.fine.ndim
        self.lap_filter = gridops.diag_filter(
            gridops.laplacian_taps(ndim, cfg.fine.dx), cfg.channels
        )
        self.frozen_first_filter = None
        if cfg.pi.frozen_first is not None:
            filt = np.zeros((cfg.pi.n_channels, cfg.channels) + (5,) * ndim)
            for c, (state_ch, axis) in enumerate(cfg.pi.frozen_first):
                filt[c, state_ch] = gridops.ddx_taps(ndim, axis, cfg.fine.dx)
            self.frozen_first_filter = filt
        self._isg_plan = gridops.interp_plan(
            cfg.coarse.extents,
            cfg.fine.extents,
            Fraction(cfg.fine.dx) / Fraction(cfg.coarse.dx),
        )

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "PercnnModel":
        """Initialize parameters: filters ~ U(+-1/sqrt(fan_in)), small mix/head
        weights so early rollouts stay near the identity map, diffusion
        coefficients starting at the middle of their bounds."""
        rng = np.random.default_rng(seed)
        s = cfg.channels
        ndim = cfg.fine.ndim
        h = cfg.isg.hidden_channels
        ki = cfg.isg.filter_size
        p: dict[str, np.ndarray] = {}

        def kshape(c_out, c_in, k):
            return (c_out, c_in) + (k,) * ndim

        p["isg.conv1.w"] = _uniform(rng, kshape(h, s, ki), 1.0 / np.sqrt(s * ki**ndim))
        p["isg.conv1.b"] = np.zeros(h)
        p["isg.conv2.w"] = _uniform(rng, kshape(h, h, ki), 1.0 / np.sqrt(h * ki**ndim))
        p["isg.conv2.b"] = np.zeros(h)
        skip = np.zeros(kshape(s, s, 1))
        for c in range(s):
            skip[(c, c) + (0,) * ndim] = 1.0
        p["isg.skip.w"] = skip
        p["isg.skip.b"] = np.zeros(s)
        p["isg.head.w"] = _uniform(rng, kshape(s, h, 1), 0.02)
        p["isg.head.b"] = np.zeros(s)

        for l in range(cfg.pi.n_layers):
            if l == 0 and cfg.pi.frozen_first is not None:
                continue
            k = cfg.pi.filter_sizes[l]
            p[f"pi.layer{l + 1}.w"] = _uniform(
                rng, kshape(cfg.pi.n_channels, s, k), 1.0 / np.sqrt(s * k**ndim)
            )
            if cfg.pi.biases[l]:
                p[f"pi.layer{l + 1}.b"] = np.zeros(cfg.pi.n_channels)
        p["pi.mix.w"] = _uniform(rng, kshape(s, cfg.pi.n_channels, 1), 0.02)
        if cfg.pi.mix_bias:
            p["pi.mix.b"] = np.zeros(s)
        if cfg.highway.enabled:
            p["highway.theta"] = np.zeros(s)
        return cls(cfg, p)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params: dict[str, np.ndarray]):
        for k in self.params:
            self.params[k] = np.asarray(params[k], dtype=np.float64).copy()

    def highway_coefficients(self) -> np.ndarray:
        """Current bounded diffusion coefficients (same arithmetic as the op)."""
        cfg = self.cfg.highway
        theta = self.params["highway.theta"]
        with np.errstate(over="ignore"):
            sig = np.clip(1.0 / (1.0 + np.exp(-theta)), ad._SIG_FLOOR, 1.0 - ad._SIG_FLOOR)
        lo = np.asarray(cfg.lower)
        hi = np.asarray(cfg.upper)
        return lo + (hi - lo) * sig

    def bind(self, tape: Tape) -> "BoundModel":
        return BoundModel(self, tape)


class BoundModel:
    """Model parameters wrapped as leaves of one tape, plus the forward pieces."""

    def __init__(self, model: PercnnModel, tape: Tape):
        self.model = model
        self.cfg = model.cfg
        self.tape = tape
        self.p = {k: tape.leaf(v, requires_grad=True) for k, v in model.params.items()}
        self.lap_filter = tape.constant(model.lap_filter)
        self.frozen_first = (
            tape.constant(model.frozen_first_filter)
            if model.frozen_first_filter is not None
            else None
        )

    def isg_forward(self, coarse: Field) -> TapeTensor:
        """Fine-resolution initial state from the coarse measurement.

        Fixed linear upsample, a two-conv hidden path with one tanh in
        between, and a 1x1 skip initialized to the identity; the output is
        skip(up) + head(hidden). Zeroing the hidden head therefore leaves
        exactly the linear interpolation of the input.
        """
        if coarse.spec.extents != self.cfg.coarse.extents:
            raise ValueError(
                f"IC grid {coarse.spec.extents} does not match coarse grid {self.cfg.coarse.extents}"
            )
        if coarse.channels != self.cfg.channels:
            raise ValueError("IC channel count does not match the model")
        up = ad.interp_resize(self.tape.constant(coarse.data), self.model._isg_plan)
        h = ad.tanh(ad.conv(up, self.p["isg.conv1.w"], self.p["isg.conv1.b"]))
        h = ad.conv(h, self.p["isg.conv2.w"], self.p["isg.conv2.b"])
        skip = ad.conv(up, self.p["isg.skip.w"], self.p["isg.skip.b"])
        head = ad.conv(h, self.p["isg.head.w"], self.p["isg.head.b"])
        return ad.add(skip, head)

    def pi_block(self, state: TapeTensor) -> TapeTensor:
        """Sum over channels of products of parallel conv outputs (1x1 mix)."""
        cfg = self.cfg.pi
        prod = None
        for l in range(cfg.n_layers):
            if l == 0 and self.frozen_first is not None:
                z = ad.conv(state, self.frozen_first)
            else:
                bias = self.p.get(f"pi.layer{l + 1}.b")
                z = ad.conv(state, self.p[f"pi.layer{l + 1}.w"], bias)
            prod = z if prod is None else ad.hadamard(prod, z)
        return ad.conv(prod, self.p["pi.mix.w"], self.p.get("pi.mix.b"))

    def highway(self, state: TapeTensor) -> TapeTensor:
        coeffs = ad.bounded_param(
            self.p["highway.theta"],
            np.asarray(self.cfg.highway.lower),
            np.asarray(self.cfg.highway.upper),
        )
        return ad.channel_scale(ad.conv(state, self.lap_filter), coeffs)

    def rhs_hat(self, state: TapeTensor) -> TapeTensor:
        """Learned time derivative: product block plus the physics highway."""
        out = self.pi_block(state)
        if self.cfg.highway.enabled:
            out = ad.add(out, self.highway(state))
        return out

    def euler_step(self, state: TapeTensor) -> TapeTensor:
        return ad.add(state, ad.scale(self.rhs_hat(state), self.cfg.dt))


def isg_forward(model: PercnnModel, tape: Tape, coarse: Field) -> TapeTensor:
    return model.bind(tape).isg_forward(coarse)


def rollout(model: PercnnModel, tape: Tape, coarse_ic: Field, n_steps: int) -> list[TapeTensor]:
    """Forward-Euler recurrence on one tape; returns all frames including u_0."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    bound = model.bind(tape)
    state = bound.isg_forward(coarse_ic)
    frames = [state]
    for k in range(1, n_steps + 1):
        state = bound.euler_step(state)
        if not np.isfinite(state.value).all():
            raise BlowUpError(f"rollout blow-up at step {k}", step=k)
        frames.append(state)
    return frames


def predict(model: PercnnModel, coarse_ic: Field, n_steps: int) -> Trajectory:
    """Inference rollout without gradient history.

    Runs the same kernels as :func:`rollout` through per-step throwaway
    tapes, so the values agree with a taped rollout to the last bit while
    memory stays constant in the horizon.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    tape = Tape()
    value = model.bind(tape).isg_forward(coarse_ic).value
    fine = model.cfg.fine
    frames = [Field(fine, value)]
    for k in range(1, n_steps + 1):
        tape = Tape()
        bound = model.bind(tape)
        value = bound.euler_step(tape.constant(value)).value
        if not np.isfinite(value).all():
            raise BlowUpError(f"rollout blow-up at step {k}", step=k)
        frames.append(Field(fine, value))
    return Trajectory(tuple(frames), model.cfg.dt)


def frozen_derivative_tags(channels: int, ndim: int) -> tuple[tuple[int, int], ...]:
    """One first-derivative feature per (state channel, axis) pair."""
    return tuple((c, a) for c in range(channels) for a in range(ndim))


# -- config (de)serialization for checkpoints and resolved configs ----------

def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "channels": cfg.channels,
        "fine": {"extents": list(cfg.fine.extents), "dx": cfg.fine.dx},
        "coarse": {"extents": list(cfg.coarse.extents), "dx": cfg.coarse.dx},
        "dt": cfg.dt,
        "pi": {
            "n_layers": cfg.pi.n_layers,
            "n_channels": cfg.pi.n_channels,
            "filter_sizes": list(cfg.pi.filter_sizes),
            "biases": list(cfg.pi.biases),
            "mix_bias": cfg.pi.mix_bias,
            "frozen_first": [list(t) for t in cfg.pi.frozen_first]
            if cfg.pi.frozen_first is not None
            else None,
        },
        "isg": {"hidden_channels": cfg.isg.hidden_channels, "filter_size": cfg.isg.filter_size},
        "highway": {
            "enabled": cfg.highway.enabled,
            "lower": list(cfg.highway.lower),
            "upper": list(cfg.highway.upper),
        },
    }


def config_from_dict(d: dict) -> ModelConfig:
    pi = d["pi"]
    return ModelConfig(
        channels=int(d["channels"]),
        fine=GridSpec(tuple(d["fine"]["extents"]), d["fine"]["dx"]),
        coarse=GridSpec(tuple(d["coarse"]["extents"]), d["coarse"]["dx"]),
        dt=float(d["dt"]),
        pi=PiBlockConfig(
            n_layers=int(pi["n_layers"]),
            n_channels=int(pi["n_channels"]),
            filter_sizes=tuple(pi["filter_sizes"]),
            biases=tuple(pi["biases"]),
            mix_bias=bool(pi["mix_bias"]),
            frozen_first=tuple(tuple(t) for t in pi["frozen_first"])
            if pi["frozen_first"] is not None
            else None,
        ),
        isg=IsgConfig(int(d["isg"]["hidden_channels"]), int(d["isg"]["filter_size"])),
        highway=HighwayConfig(
            enabled=bool(d["highway"]["enabled"]),
            lower=tuple(d["highway"]["lower"]),
            upper=tuple(d["highway"]["upper"]),
        ),
    )
