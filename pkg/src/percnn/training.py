"""Training loop: Adam on the measurement-fit loss with an IC regularizer.

The loss is MSE of the rollout at the measured space-time nodes plus
lambda * MSE between the generated initial state and the interpolated first
measurement. One epoch is one full rollout and one optimizer step. Long
rollouts can be backpropagated in segments (stored boundary states, forward
recomputation) to bound memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import fields, fileio, gridops, metrics
from .autodiff import Tape
from .errors import TrainingDivergedError
from .fields import Field, Trajectory
from .model import ModelConfig, PercnnModel, config_from_dict, config_to_dict

# Rollout states beyond this magnitude end the epoch's rollout early and
# charge a fixed penalty per missing measured frame, keeping Adam's moments
# finite even when a parameter excursion destabilizes the recurrence.
ROLLOUT_GUARD = 1e3
BLOWUP_PENALTY = 1e6

# Raw reparameterized diffusion parameters stay in this range; the sigmoid
# then keeps the bounded coefficient strictly inside its interval even at
# float-rounding saturation.
THETA_CLAMP = 30.0


@dataclass
class TrainConfig:
    lr: float = 0.002
    lam: float = 0.1
    max_epochs: int = 5000
    patience: int = 200
    val_fraction: float = 0.1
    seed: int = 0
    noise_level: float | None = None  # provenance of the measurement, not used
    checkpoint_path: str | None = None
    physics_every: int = 0
    max_live_steps: int | None = 200

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in [0, 0.5)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


class Adam:
    """Plain Adam (beta1=0.9, beta2=0.999, eps=1e-8) over named arrays."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def measurement_time_stride(meas_dt: float, model_dt: float) -> int:
    """Measured frames must land on whole model steps."""
    ratio = meas_dt / model_dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * max(1.0, abs(stride)):
        raise ValueError(
            f"time misalignment: measurement dt {meas_dt} is not an integer multiple of model dt {model_dt}"
        )
    return stride


def measurement_space_strides(model: PercnnModel, measurement: Trajectory):
    return gridops.subset_strides(
        model.cfg.fine.extents,
        measurement.spec.extents,
        model.cfg.fine.dx,
        measurement.spec.dx,
    )


def loss(model: PercnnModel, measurement: Trajectory, rollout_frames, lam: float):
    """Total training loss as a taped scalar over precomputed rollout frames."""
    stride = measurement_time_stride(measurement.dt, model.cfg.dt)
    strides = measurement_space_strides(model, measurement)
    n_meas = measurement.n_frames
    if len(rollout_frames) < (n_meas - 1) * stride + 1:
        raise ValueError(
            f"rollout has {len(rollout_frames)} frames; {(n_meas - 1) * stride + 1} needed "
            f"to cover {n_meas} measurements"
        )
    tape = rollout_frames[0].tape
    acc = None
    for k in range(n_meas):
        pred = ad.gather_nodes(rollout_frames[k * stride], strides)
        term = ad.mse(pred, tape.constant(measurement.frames[k].data))
        acc = term if acc is None else ad.add(acc, term)
    total = ad.scale(acc, 1.0 / n_meas)
    if lam != 0.0:
        ic_target = fields.interpolate(measurement.frames[0], model.cfg.fine)
        ic_term = ad.mse(rollout_frames[0], tape.constant(ic_target.data))
        total = ad.add(total, ad.scale(ic_term, lam))
    return total


def _state_ok(value):
    return np.isfinite(value).all() and np.abs(value).max() <= ROLLOUT_GUARD


def _step_value(model, value):
    """One Euler step on plain values via a throwaway tape."""
    tape = Tape()
    bound = model.bind(tape)
    return bound.euler_step(tape.constant(value)).value


def _data_term(tape, frames_by_step, meas, ks, stride, strides, n_meas):
    acc = None
    for k in ks:
        pred = ad.gather_nodes(frames_by_step[k * stride], strides)
        term = ad.mse(pred, tape.constant(meas.frames[k].data))
        acc = term if acc is None else ad.add(acc, term)
    if acc is None:
        return None
    return ad.scale(acc, 1.0 / n_meas)


def _epoch_full(model, meas, lam, stride, strides, n_train, ic_interp):
    """Single-tape rollout, loss and gradients. Returns (loss, grads, last_value, truncated)."""
    tape = Tape()
    bound = model.bind(tape)
    state = bound.isg_forward(meas.frames[0])
    total_steps = (n_train - 1) * stride
    frames = [state]
    truncated = False
    for _ in range(total_steps):
        state = bound.euler_step(state)
        if not _state_ok(state.value):
            truncated = True
            break
        frames.append(state)
    usable = [k for k in range(n_train) if k * stride < len(frames)]
    total = _data_term(tape, frames, meas, usable, stride, strides, n_train)
    if lam != 0.0:
        ic_term = ad.mse(frames[0], tape.constant(ic_interp))
        reg = ad.scale(ic_term, lam)
        total = reg if total is None else ad.add(total, reg)
    tape.backward(total)
    grads = {k: bound.p[k].grad for k in model.params}
    loss_val = float(total.value) + BLOWUP_PENALTY * (n_train - len(usable)) / n_train
    return loss_val, grads, frames[-1].value, truncated


def _epoch_segmented(model, meas, lam, stride, strides, n_train, ic_interp, seg_len):
    """Memory-bounded epoch: forward once storing segment boundaries, then
    backpropagate segment by segment in reverse, chaining state adjoints."""
    total_steps = (n_train - 1) * stride
    tape0 = Tape()
    u0 = model.bind(tape0).isg_forward(meas.frames[0]).value
    boundaries = {0: u0}
    value = u0
    usable_steps = 0
    truncated = False
    for step in range(1, total_steps + 1):
        value = _step_value(model, value)
        if not _state_ok(value):
            truncated = True
            break
        usable_steps = step
        if step % seg_len == 0:
            boundaries[step] = value
    usable = [k for k in range(n_train) if k * stride <= usable_steps]
    starts = sorted(b for b in boundaries if b < usable_steps or b == 0)
    segments = [
        (a, min(a + seg_len, usable_steps)) for a in starts if a == 0 or a < usable_steps
    ]

    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    loss_val = 0.0
    adj = None
    last_value = boundaries[max(b for b in boundaries if b <= usable_steps)]
    for a, b in reversed(segments):
        tape = Tape()
        bound = model.bind(tape)
        if a == 0:
            s_a = bound.isg_forward(meas.frames[0])
        else:
            s_a = tape.leaf(boundaries[a], requires_grad=True)
        frames_by_step = {a: s_a}
        cur = s_a
        for step in range(a + 1, b + 1):
            cur = bound.euler_step(cur)
            frames_by_step[step] = cur
        ks = [k for k in usable if (a < k * stride <= b) or (a == 0 and k == 0)]
        local = _data_term(tape, frames_by_step, meas, ks, stride, strides, n_train)
        if a == 0 and lam != 0.0:
            reg = ad.scale(ad.mse(frames_by_step[0], tape.constant(ic_interp)), lam)
            local = reg if local is None else ad.add(local, reg)
        seeds = []
        if local is not None:
            seeds.append((local, np.asarray(1.0)))
        if adj is not None and b > a:
            seeds.append((cur, adj))
        elif adj is not None:
            # Degenerate single-node segment: pass the adjoint straight through.
            seeds.append((s_a, adj))
        tape.backward_seeded(seeds)
        for k in model.params:
            g = bound.p[k].grad
            if g is not None:
                grads[k] += g
        adj = s_a.grad if a > 0 else None
        if local is not None:
            loss_val += float(local.value)
    if usable_steps == total_steps and total_steps > 0:
        last_value = value if not truncated else last_value
    loss_val += BLOWUP_PENALTY * (n_train - len(usable)) / n_train
    return loss_val, grads, last_value, truncated


def _val_loss(model, meas, last_train_value, stride, strides, n_train, truncated):
    n_meas = meas.n_frames
    if n_train >= n_meas:
        return None
    if truncated:
        return BLOWUP_PENALTY
    value = last_train_value
    step = (n_train - 1) * stride
    acc = 0.0
    count = 0
    for k in range(n_train, n_meas):
        target_step = k * stride
        while step < target_step:
            value = _step_value(model, value)
            step += 1
            if not _state_ok(value):
                return BLOWUP_PENALTY
        sampled = gridops.gather_strided(value, strides)
        d = sampled - meas.frames[k].data
        acc += float(np.mean(d * d))
        count += 1
    return acc / count


@dataclass
class TrainResult:
    """Outcome of a run plus the optimizer tail state needed to persist it.

    ``model`` holds the best-validation parameters; ``final_params`` is the
    raw end-of-run state a resumed run must continue from.
    """

    model: PercnnModel
    history: list
    best_epoch: int
    best_val_loss: float
    stopped: str
    final_params: dict = dc_field(default_factory=dict)
    best_params: dict = dc_field(default_factory=dict)
    adam: "Adam" = None
    since_best: int = 0
    nonfinite_streak: int = 0


def _physics_metric(model, meas, n_steps, system):
    if n_steps < 2:
        return float("nan")
    try:
        pred = _predict_quiet(model, meas.frames[0], n_steps)
    except Exception:
        return float("nan")
    curve = metrics.physics_error(pred, system)
    return float(np.mean(curve.values))


def _predict_quiet(model, ic, n_steps):
    from .model import predict

    return predict(model, ic, n_steps)


def train(model: PercnnModel, measurement: Trajectory, config: TrainConfig,
          system=None, resume=None) -> TrainResult:
    """Optimize all trainable parameters against a coarse noisy measurement.

    The validation split is the temporal tail of the measured frames (the
    task is extrapolation, so a random split would leak). Early stopping
    tracks the best validation loss with the configured patience;
    ``patience`` consecutive non-finite training losses abort.
    """
    n_meas = measurement.n_frames
    if n_meas < 2:
        raise ValueError("training needs at least 2 measured frames")
    stride = measurement_time_stride(measurement.dt, model.cfg.dt)
    strides = measurement_space_strides(model, measurement)
    n_val = math.ceil(config.val_fraction * n_meas)
    n_train = n_meas - n_val
    if n_train < 1:
        raise ValueError("validation split leaves no training frames")
    total_steps = (n_train - 1) * stride
    ic_interp = fields.interpolate(measurement.frames[0], model.cfg.fine).data
    seg_len = config.max_live_steps

    if resume is not None:
        adam = resume["adam"]
        start_epoch = resume["epoch"] + 1
        best_val = resume["best_val_loss"]
        best_epoch = resume["best_epoch"]
        best_params = resume["best_params"]
        since_best = resume["since_best"]
        nonfinite_streak = resume["nonfinite_streak"]
        history = list(resume["history"])
    else:
        adam = Adam(model.params, config.lr)
        start_epoch = 1
        best_val = float("inf")
        best_epoch = 0
        best_params = model.copy_params()
        since_best = 0
        nonfinite_streak = 0
        history = []

    stopped = "max_epochs"
    for epoch in range(start_epoch, config.max_epochs + 1):
        if seg_len is not None and total_steps > seg_len:
            loss_val, grads, last_value, truncated = _epoch_segmented(
                model, measurement, config.lam, stride, strides, n_train, ic_interp, seg_len
            )
        else:
            loss_val, grads, last_value, truncated = _epoch_full(
                model, measurement, config.lam, stride, strides, n_train, ic_interp
            )
        val = _val_loss(model, measurement, last_value, stride, strides, n_train, truncated)
        if val is None:
            val = loss_val
        phys = float("nan")
        if system is not None and config.physics_every > 0 and epoch % config.physics_every == 0:
            phys = _physics_metric(model, measurement, total_steps, system)
        history.append([epoch, loss_val, val, phys])

        if not math.isfinite(loss_val):
            nonfinite_streak += 1
            if nonfinite_streak >= config.patience:
                raise TrainingDivergedError(
                    f"training loss non-finite for {nonfinite_streak} consecutive epochs",
                    history,
                )
        else:
            nonfinite_streak = 0
            adam.step(model.params, grads)
            if "highway.theta" in model.params:
                np.clip(
                    model.params["highway.theta"],
                    -THETA_CLAMP,
                    THETA_CLAMP,
                    out=model.params["highway.theta"],
                )
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = model.copy_params()
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.patience:
            stopped = "early"
            break

    final_params = model.copy_params()
    if config.checkpoint_path is not None:
        save_checkpoint(
            config.checkpoint_path,
            model.cfg,
            final_params,
            best_params,
            adam,
            epoch=history[-1][0] if history else 0,
            best_epoch=best_epoch,
            best_val_loss=best_val,
            since_best=since_best,
            nonfinite_streak=nonfinite_streak,
            history=history,
            train_config=config,
        )
    model.set_params(best_params)
    return TrainResult(
        model, history, best_epoch, best_val, stopped,
        final_params=final_params, best_params=best_params, adam=adam,
        since_best=since_best, nonfinite_streak=nonfinite_streak,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model_cfg: ModelConfig, params, best_params, adam, *,
                    epoch, best_epoch, best_val_loss, since_best,
                    nonfinite_streak, history, train_config=None,
                    extras_meta=None, extras_arrays=None):
    """Persist the full optimizer state: ``params`` is the raw end-of-run
    state a resume continues from, ``best_params`` the deployable weights."""
    meta = {
        "model_config": config_to_dict(model_cfg),
        "epoch": epoch,
        "adam": {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
                 "beta2": adam.beta2, "eps": adam.eps},
        "best_epoch": best_epoch,
        "best_val_loss": best_val_loss,
        "since_best": since_best,
        "nonfinite_streak": nonfinite_streak,
        "history": history,
        "param_names": list(params),
        "rng_state": _rng_state_json(train_config.seed if train_config else 0),
        "train_config": _train_config_dict(train_config) if train_config else None,
        "extras": extras_meta or {},
    }
    arrays = {}
    for k, v in params.items():
        arrays[f"params/{k}"] = v
        arrays[f"best/{k}"] = best_params[k]
        arrays[f"adam.m/{k}"] = adam.m[k]
        arrays[f"adam.v/{k}"] = adam.v[k]
    for k, v in (extras_arrays or {}).items():
        arrays[f"extra/{k}"] = v
    fileio.save_checkpoint_blob(path, meta, arrays)


def _rng_state_json(seed):
    state = np.random.default_rng(seed).bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": {k: int(v) if isinstance(v, (int, np.integer)) else v
                      for k, v in state["state"].items()},
            "has_uint32": int(state.get("has_uint32", 0)),
            "uinteger": int(state.get("uinteger", 0))}


def _train_config_dict(cfg: TrainConfig) -> dict:
    return {
        "lr": cfg.lr, "lambda": cfg.lam, "max_epochs": cfg.max_epochs,
        "patience": cfg.patience, "val_fraction": cfg.val_fraction,
        "seed": cfg.seed, "noise_level": cfg.noise_level,
        "checkpoint_path": cfg.checkpoint_path,
        "physics_every": cfg.physics_every, "max_live_steps": cfg.max_live_steps,
    }


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(
        lr=d["lr"], lam=d["lambda"], max_epochs=d["max_epochs"],
        patience=d["patience"], val_fraction=d["val_fraction"], seed=d["seed"],
        noise_level=d.get("noise_level"), checkpoint_path=d.get("checkpoint_path"),
        physics_every=d.get("physics_every", 0),
        max_live_steps=d.get("max_live_steps", 200),
    )


@dataclass
class Checkpoint:
    model: PercnnModel
    adam: Adam
    meta: dict
    best_params: dict
    extras_arrays: dict

    def resume_state(self) -> dict:
        return {
            "adam": self.adam,
            "epoch": self.meta["epoch"],
            "best_val_loss": self.meta["best_val_loss"],
            "best_epoch": self.meta["best_epoch"],
            "best_params": self.best_params,
            "since_best": self.meta["since_best"],
            "nonfinite_streak": self.meta["nonfinite_streak"],
            "history": self.meta["history"],
        }


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = fileio.load_checkpoint_blob(path)
    cfg = config_from_dict(meta["model_config"])
    params = {k: arrays[f"params/{k}"] for k in meta["param_names"]}
    model = PercnnModel(cfg, params)
    adam_meta = meta["adam"]
    adam = Adam(params, adam_meta["lr"], adam_meta["beta1"], adam_meta["beta2"], adam_meta["eps"])
    adam.t = adam_meta["t"]
    adam.m = {k: arrays[f"adam.m/{k}"] for k in meta["param_names"]}
    adam.v = {k: arrays[f"adam.v/{k}"] for k in meta["param_names"]}
    best = {k: arrays[f"best/{k}"] for k in meta["param_names"]}
    extras = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return Checkpoint(model, adam, meta, best, extras)


def write_history_csv(path, history):
    with open(path, "w") as f:
        f.write("epoch,train_loss,val_loss,physics_error\n")
        for epoch, tr, va, ph in history:
            ph_s = "" if (isinstance(ph, float) and math.isnan(ph)) else repr(ph)
            f.write(f"{epoch},{tr!r},{va!r},{ph_s}\n")


# ---------------------------------------------------------------------------
# Diffusion coefficient regression (highway bound estimation)
# ---------------------------------------------------------------------------

def estimate_diffusion(measurement: Trajectory) -> np.ndarray:
    """Least-squares fit of u_t = mu * lap(u) per channel over all samples.

    Time differences are central where possible (forward for 2 frames); the
    Laplacian uses the coarse-grid FD stencil. On data with reaction or
    advection the estimate is biased, which is exactly why it is only used
    to bound the trainable coefficient, not to fix it.
    """
    from . import solver

    K = measurement.n_frames
    if K < 2:
        raise ValueError("diffusion regression needs at least 2 frames")
    s = measurement.channels
    num = np.zeros(s)
    den = np.zeros(s)
    scale_sq = 0.0
    n_samples = 0
    if K == 2:
        samples = [
            (
                (measurement.frames[1].data - measurement.frames[0].data) / measurement.dt,
                solver.laplacian(measurement.frames[0]).data,
            )
        ]
    else:
        samples = (
            (
                (measurement.frames[k + 1].data - measurement.frames[k - 1].data)
                / (2.0 * measurement.dt),
                solver.laplacian(measurement.frames[k]).data,
            )
            for k in range(1, K - 1)
        )
    for ut, lap in samples:
        num += np.sum(ut * lap, axis=tuple(range(1, ut.ndim)))
        den += np.sum(lap * lap, axis=tuple(range(1, ut.ndim)))
        scale_sq = max(scale_sq, float(np.abs(lap).max()) ** 2)
        n_samples += 1
    peak = max(float(np.abs(f.data).max()) for f in measurement.frames)
    floor = n_samples * measurement.spec.n_nodes * (1e-10 * max(peak, 1.0) / measurement.spec.dx**2) ** 2
    if np.any(den <= floor):
        raise ValueError("diffusion regression is degenerate: data has no spatial structure")
    mu = num / den
    if np.any(mu <= 0):
        raise ValueError(f"diffusion regression gave non-positive coefficients {mu}")
    return mu


def diffusion_bounds(mu_tilde: np.ndarray):
    """Highway coefficient bounds [0, 2*mu_tilde] per channel."""
    mu = np.asarray(mu_tilde, dtype=np.float64)
    if np.any(mu <= 0):
        raise ValueError("diffusion bounds need positive estimates")
    return tuple(0.0 for _ in mu), tuple(2.0 * m for m in mu)
