"""Shared test utilities: gradient checking and hand-built reference models."""

import math

import numpy as np

from percnn.autodiff import Tape
from percnn.fields import Field, GridSpec, Trajectory
from percnn.model import (
    HighwayConfig,
    IsgConfig,
    ModelConfig,
    PercnnModel,
    PiBlockConfig,
)


def fd_check(build_loss, params, eps=1e-5, rtol=1e-6, atol=1e-8, probes=None, rng=None):
    """Compare reverse-mode gradients against central finite differences.

    ``build_loss(params) -> (loss_value, grads_dict)`` must rebuild the
    computation from the plain parameter arrays every call. Entries whose FD
    gradient is below ``atol`` are compared absolutely. Returns the worst
    relative error seen.
    """
    _, grads = build_loss(params)
    worst = 0.0
    for name, arr in params.items():
        entries = list(np.ndindex(*arr.shape)) if arr.shape else [()]
        if probes is not None and len(entries) > probes:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(len(entries), size=probes, replace=False)
            entries = [entries[int(i)] for i in picks]
        for idx in entries:
            orig = arr[idx]
            arr[idx] = orig + eps
            up, _ = build_loss(params)
            arr[idx] = orig - eps
            dn, _ = build_loss(params)
            arr[idx] = orig
            fd = (up - dn) / (2 * eps)
            got = grads[name][idx] if grads[name].shape else float(grads[name])
            diff = abs(got - fd)
            rel = diff / max(abs(fd), abs(got), 1e-300)
            if diff >= atol:
                worst = max(worst, rel)
                assert rel < rtol, f"{name}{idx}: ad={got} fd={fd} rel={rel}"
    return worst


def same_history(a, b):
    """Row-for-row history equality treating NaN (unset physics column) as equal."""
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        if len(ra) != len(rb):
            return False
        for x, y in zip(ra, rb):
            both_nan = (
                isinstance(x, float) and isinstance(y, float)
                and math.isnan(x) and math.isnan(y)
            )
            if not both_nan and x != y:
                return False
    return True


def tape_grads(build):
    """Run ``build(tape) -> (loss_tensor, leaf_dict)`` and return value + grads."""
    tape = Tape()
    loss, leaves = build(tape)
    tape.backward(loss)
    return float(loss.value), {k: t.grad for k, t in leaves.items()}


def passthrough_isg_params(model):
    """Zero the ISG hidden head so the initial state is exactly the upsample."""
    model.params["isg.head.w"][:] = 0.0
    model.params["isg.head.b"][:] = 0.0
    return model


def hand_set_gs_model(system, spec, dt):
    """Model whose weights encode the Gray-Scott dynamics exactly.

    Product block (3 layers of 1x1 filters, biases on) realizes the reaction
    polynomial; the highway carries the true diffusion coefficients at the
    center of symmetric bounds. Coarse grid equals the fine grid and the ISG
    passes the IC through unchanged.
    """
    f, kappa = system.f_feed, system.kappa
    mu = system.diffusion()
    cfg = ModelConfig(
        channels=2,
        fine=spec,
        coarse=spec,
        dt=dt,
        pi=PiBlockConfig(
            n_layers=3,
            n_channels=3,
            filter_sizes=(1, 1, 1),
            biases=(True, True, True),
            mix_bias=True,
        ),
        isg=IsgConfig(hidden_channels=2),
        highway=HighwayConfig(
            enabled=True,
            lower=(0.0, 0.0),
            upper=(2.0 * mu[0], 2.0 * mu[1]),
        ),
    )
    m = PercnnModel.build(cfg, seed=0)
    for name in ("pi.layer1", "pi.layer2", "pi.layer3"):
        m.params[f"{name}.w"][:] = 0.0
        m.params[f"{name}.b"][:] = 0.0
    # Features: c0 = u*v*v, c1 = u, c2 = v.
    m.params["pi.layer1.w"][0, 0] = 1.0  # u
    m.params["pi.layer2.w"][0, 1] = 1.0  # v
    m.params["pi.layer3.w"][0, 1] = 1.0  # v
    m.params["pi.layer1.w"][1, 0] = 1.0  # u
    m.params["pi.layer2.b"][1] = 1.0
    m.params["pi.layer3.b"][1] = 1.0
    m.params["pi.layer1.w"][2, 1] = 1.0  # v
    m.params["pi.layer2.b"][2] = 1.0
    m.params["pi.layer3.b"][2] = 1.0
    mix = m.params["pi.mix.w"]
    mix[:] = 0.0
    mix[0, 0] = -1.0
    mix[0, 1] = -f
    mix[1, 0] = 1.0
    mix[1, 2] = -(f + kappa)
    m.params["pi.mix.b"][:] = (f, 0.0)
    m.params["highway.theta"][:] = 0.0  # sigmoid midpoint = true mu
    passthrough_isg_params(m)
    return m


def random_k1_model(rng, spec, n_layers, n_channels, highway=True, mix_scale=0.5):
    """Random interpretable model: all product-block filters 1x1."""
    lo = (0.0, 0.0)
    hi = (2.0 * rng.uniform(0.01, 0.2), 2.0 * rng.uniform(0.01, 0.2))
    cfg = ModelConfig(
        channels=2,
        fine=spec,
        coarse=spec,
        dt=0.01,
        pi=PiBlockConfig(
            n_layers=n_layers,
            n_channels=n_channels,
            filter_sizes=(1,) * n_layers,
            biases=tuple(bool(rng.integers(0, 2)) for _ in range(n_layers)),
            mix_bias=bool(rng.integers(0, 2)),
        ),
        isg=IsgConfig(hidden_channels=2),
        highway=HighwayConfig(enabled=highway, lower=lo if highway else (),
                              upper=hi if highway else ()),
    )
    m = PercnnModel.build(cfg, seed=int(rng.integers(0, 2**31)))
    for l in range(n_layers):
        m.params[f"pi.layer{l + 1}.w"][:] = rng.standard_normal(
            m.params[f"pi.layer{l + 1}.w"].shape
        )
        bias = m.params.get(f"pi.layer{l + 1}.b")
        if bias is not None:
            bias[:] = rng.standard_normal(bias.shape)
    m.params["pi.mix.w"][:] = mix_scale * rng.standard_normal(m.params["pi.mix.w"].shape)
    if "pi.mix.b" in m.params:
        m.params["pi.mix.b"][:] = rng.standard_normal(2)
    if highway:
        m.params["highway.theta"][:] = rng.uniform(-2, 2, size=2)
    return m


def random_field(rng, spec, channels=2, scale=1.0):
    return Field(spec, scale * rng.standard_normal((channels, *spec.extents)))


def shared_frame_trajectory(data, spec, n_frames, dt=1.0):
    """Many frames sharing one array; cheap way to build long trajectories."""
    f = Field(spec, data)
    return Trajectory((f,) * n_frames, dt)
