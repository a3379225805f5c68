"""Command-line pipeline: generate, sample, train, eval, interpret, infer.

Every command takes a JSON config (or a named preset), writes its outputs
plus the fully resolved config into --out, and is deterministic given the
seeds in that config. Exit codes: 0 success, 1 runtime or numerical
failure, 2 config or IO error, 3 contract violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap():
    cap = os.environ.get("PERCNN_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _load_resolved(args):
    from .config import get_preset, load_config, resolve_config
    from .errors import ConfigError

    if args.preset and args.config:
        raise ConfigError("give either --config or --preset, not both")
    if args.preset:
        return resolve_config(get_preset(args.preset))
    if args.config:
        return resolve_config(load_config(args.config))
    raise ConfigError("a --config file or --preset name is required")


def _write_resolved(resolved, out_dir: Path):
    from .config import config_json

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(config_json(resolved))


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_generate(args) -> int:
    from . import fileio, solver
    from .config import build_grid, build_system
    from .errors import ConfigError

    resolved = _load_resolved(args)
    out = Path(args.out)
    system = build_system(resolved)
    grid = build_grid(resolved)
    gen = resolved["generate"]
    if gen["ic"]["kind"] == "file":
        ic = fileio.load_field(gen["ic"]["path"])
        if ic.spec != grid:
            raise ConfigError("ic file grid does not match the configured grid")
    else:
        ic = solver.default_ic(system, grid, gen["seed"])
    traj = solver.generate(system, ic, gen["dt"], gen["n_steps"], gen["record_every"])
    _write_resolved(resolved, out)
    fileio.save_traj(traj, out / "trajectory.pcnt")
    _write_json(
        out / "meta.json",
        {
            "n_frames": traj.n_frames,
            "channels": traj.channels,
            "extents": list(traj.spec.extents),
            "dx": traj.spec.dx,
            "dt": traj.dt,
        },
    )
    print(f"wrote {traj.n_frames} frames on {traj.spec.extents} to {out / 'trajectory.pcnt'}")
    return 0


def cmd_sample(args) -> int:
    from . import fileio
    from .fields import Trajectory, add_noise, downsample

    resolved = _load_resolved(args)
    out = Path(args.out)
    traj = fileio.load_traj(args.input)
    sample = resolved["sample"]
    if sample["frame_window"] is not None:
        traj = Trajectory(traj.frames[: sample["frame_window"]], traj.dt, traj.t0)
    clean = downsample(traj, sample["space_stride"], sample["time_stride"])
    noisy = add_noise(clean, sample["noise"], sample["seed"])
    _write_resolved(resolved, out)
    fileio.save_traj(clean, out / "reference.pcnt")
    fileio.save_traj(noisy, out / "measurement.pcnt")
    print(
        f"wrote {noisy.n_frames} measurement frames on {noisy.spec.extents} "
        f"(noise level {sample['noise']})"
    )
    return 0


def _model_config_from(resolved, measurement):
    from .config import build_grid
    from .errors import ConfigError
    from .model import (
        HighwayConfig,
        IsgConfig,
        ModelConfig,
        PiBlockConfig,
        frozen_derivative_tags,
    )
    from .training import diffusion_bounds, estimate_diffusion

    fine = build_grid(resolved)
    mc = resolved["model"]
    dt = resolved["generate"]["dt"] * mc["time_stride"]
    pi = mc["pi"]
    frozen = (
        frozen_derivative_tags(measurement.channels, fine.ndim)
        if pi["frozen_first_derivatives"]
        else None
    )
    if frozen is not None and pi["n_channels"] != len(frozen):
        raise ConfigError(
            f"frozen first layer needs n_channels = channels*ndim = {len(frozen)}"
        )
    highway = mc["highway"]
    if highway["enabled"]:
        if highway["bounds"] == "auto":
            lo, hi = diffusion_bounds(estimate_diffusion(measurement))
        else:
            lo = tuple(b[0] for b in highway["bounds"])
            hi = tuple(b[1] for b in highway["bounds"])
        hw = HighwayConfig(True, lo, hi)
    else:
        hw = HighwayConfig(False)
    return ModelConfig(
        channels=measurement.channels,
        fine=fine,
        coarse=measurement.spec,
        dt=dt,
        pi=PiBlockConfig(
            n_layers=pi["n_layers"],
            n_channels=pi["n_channels"],
            filter_sizes=tuple(pi["filter_size"]),
            biases=tuple(pi["bias"]),
            mix_bias=pi["mix_bias"],
            frozen_first=frozen,
        ),
        isg=IsgConfig(mc["isg"]["hidden_channels"], mc["isg"]["filter_size"]),
        highway=hw,
    )


def cmd_train(args) -> int:
    from . import fileio
    from .config import build_system
    from .errors import TrainingDivergedError
    from .model import PercnnModel
    from .training import (
        TrainConfig,
        load_checkpoint,
        measurement_time_stride,
        train,
        write_history_csv,
    )

    resolved = _load_resolved(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    measurement = fileio.load_traj(args.data)
    ckpt_path = out / "checkpoint.pcnc"

    tr = resolved["train"]
    tc = TrainConfig(
        lr=tr["lr"],
        lam=tr["lambda"],
        max_epochs=tr["max_epochs"],
        patience=tr["patience"],
        val_fraction=tr["val_fraction"],
        seed=tr["seed"],
        noise_level=resolved["sample"]["noise"],
        checkpoint_path=None,  # written below with pipeline extras
        physics_every=tr["physics_every"],
        max_live_steps=tr["max_live_steps"],
    )

    resume_state = None
    if args.resume:
        ckpt = load_checkpoint(ckpt_path)
        model = ckpt.model
        resume_state = ckpt.resume_state()
    else:
        model = PercnnModel.build(_model_config_from(resolved, measurement), resolved["model"]["seed"])

    system = build_system(resolved)
    _write_resolved(resolved, out)
    try:
        result = train(model, measurement, tc, system=system, resume=resume_state)
    except TrainingDivergedError as e:
        write_history_csv(out / "history.csv", e.history)
        raise
    write_history_csv(out / "history.csv", result.history)

    stride = measurement_time_stride(measurement.dt, model.cfg.dt)
    horizon = (measurement.n_frames - 1) * stride
    _save_pipeline_checkpoint(ckpt_path, model, result, resolved, measurement, horizon, tc)
    print(f"trained {len(result.history)} epochs ({result.stopped}); "
          f"best val loss {result.best_val_loss:.6e} at epoch {result.best_epoch}")
    if model.cfg.highway.enabled:
        coeffs = ", ".join(f"{c:.6g}" for c in model.highway_coefficients())
        print(f"highway diffusion coefficients: [{coeffs}]")
    return 0


def _save_pipeline_checkpoint(path, model, result, resolved, measurement, horizon, tc):
    """Checkpoint plus what eval/infer need to stand alone: the coarse IC,
    the system descriptor and the training horizon."""
    from .training import save_checkpoint

    save_checkpoint(
        path,
        model.cfg,
        result.final_params,
        result.best_params,
        result.adam,
        epoch=result.history[-1][0] if result.history else 0,
        best_epoch=result.best_epoch,
        best_val_loss=result.best_val_loss,
        since_best=result.since_best,
        nonfinite_streak=result.nonfinite_streak,
        history=result.history,
        train_config=tc,
        extras_meta={
            "resolved_config": resolved,
            "horizon_steps": horizon,
            "measurement_dt": measurement.dt,
        },
        extras_arrays={"train_ic": measurement.frames[0].data},
    )


def _model_from_checkpoint(path, use_best=True):
    from .training import load_checkpoint

    ckpt = load_checkpoint(path)
    if use_best:
        ckpt.model.set_params(ckpt.best_params)
    return ckpt


def cmd_eval(args) -> int:
    from . import fileio, metrics
    from .config import build_system
    from .errors import ConfigError
    from .fields import Field, Trajectory
    from .model import predict
    import numpy as np

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = _model_from_checkpoint(args.model)
    model = ckpt.model
    extras = ckpt.meta["extras"]
    horizon = int(extras["horizon_steps"])
    ic = Field(model.cfg.coarse, ckpt.extras_arrays["train_ic"])
    n_steps = horizon + args.extra
    pred = predict(model, ic, n_steps)
    fileio.save_traj(pred, out / "prediction.pcnt")

    ref_full = fileio.load_traj(args.ref)
    stride = model.cfg.dt / ref_full.dt
    if abs(stride - round(stride)) > 1e-9:
        raise ConfigError(
            f"reference dt {ref_full.dt} does not divide the model dt {model.cfg.dt}"
        )
    stride = int(round(stride))
    ref_frames = ref_full.frames[:: stride][: pred.n_frames]
    n_overlap = len(ref_frames)
    ref = Trajectory(ref_frames, ref_full.dt * stride, ref_full.t0)
    pred_overlap = Trajectory(pred.frames[:n_overlap], pred.dt, pred.t0)

    rmse = metrics.accumulative_rmse(pred_overlap, ref)
    rmse.write_csv(out / "rmse.csv", "rmse")
    system = build_system(ckpt.meta["extras"]["resolved_config"])
    phys = metrics.physics_error(pred, system)
    phys.write_csv(out / "physics_error.csv", "physics_error")

    n = pred.channels * pred.spec.n_nodes
    sse = np.array([np.sum((p.data - r.data) ** 2) for p, r in zip(pred_overlap.frames, ref.frames)])
    split = min(horizon + 1, n_overlap)
    train_rmse = float(np.sqrt(sse[:split].sum() / (n * split)))
    extrap_rmse = (
        float(np.sqrt(sse[split:].sum() / (n * (n_overlap - split))))
        if n_overlap > split
        else None
    )
    _write_json(
        out / "metrics.json",
        {
            "training_rmse": train_rmse,
            "extrapolation_rmse": extrap_rmse,
            "horizon_steps": horizon,
            "extra_steps": args.extra,
            "frames_compared": n_overlap,
            "n_parameters": model.num_parameters(),
        },
    )
    print(f"training-window RMSE {train_rmse:.6e}; "
          f"extrapolation RMSE {extrap_rmse if extrap_rmse is None else f'{extrap_rmse:.6e}'}")
    return 0


def cmd_interpret(args) -> int:
    from .interpret import (
        evaluate,
        extract,
        prune,
        relative_prune_threshold,
        render_text,
        to_json_dict,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = _model_from_checkpoint(args.model)
    sym = extract(ckpt.model)
    threshold = args.prune_threshold
    if threshold is None:
        threshold = relative_prune_threshold(sym)
    pruned, dropped = prune(sym, threshold)
    (out / "expression.txt").write_text(render_text(pruned) + "\n")
    _write_json(
        out / "expression.json",
        {
            "raw": to_json_dict(sym),
            "pruned": to_json_dict(pruned),
            "prune_threshold": threshold,
            "dropped_mass": dropped,
        },
    )
    print(render_text(pruned))
    return 0


def cmd_infer(args) -> int:
    from . import fileio, gridops, metrics, solver
    from .config import build_system
    from .errors import ConfigError
    from .fields import Field, Trajectory, downsample
    from .model import predict
    import numpy as np

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = _model_from_checkpoint(args.model)
    model = ckpt.model
    ic = fileio.load_field(args.ic)
    fine_ic = None
    if ic.spec == model.cfg.coarse:
        coarse_ic = ic
    elif ic.spec == model.cfg.fine:
        fine_ic = ic
        strides = gridops.subset_strides(
            model.cfg.fine.extents, model.cfg.coarse.extents,
            model.cfg.fine.dx, model.cfg.coarse.dx,
        )
        coarse_ic = downsample(Trajectory((ic,), 1.0), strides[0], 1).frames[0]
    else:
        raise ConfigError(
            f"IC grid {ic.spec.extents} matches neither the coarse "
            f"{model.cfg.coarse.extents} nor the fine {model.cfg.fine.extents} grid"
        )

    pred = predict(model, coarse_ic, args.steps)
    fileio.save_traj(pred, out / "prediction.pcnt")
    payload = {"steps": args.steps, "n_frames": pred.n_frames}

    if args.reference:
        if fine_ic is None:
            raise ConfigError("--reference needs a fine-grid IC to seed the solver")
        resolved = ckpt.meta["extras"]["resolved_config"]
        system = build_system(resolved)
        fine_dt = resolved["generate"]["dt"]
        per_step = model.cfg.dt / fine_dt
        if abs(per_step - round(per_step)) > 1e-9:
            raise ConfigError("model dt is not a multiple of the solver dt")
        per_step = int(round(per_step))
        ref = solver.generate(system, fine_ic, fine_dt, args.steps * per_step, per_step)
        fileio.save_traj(ref, out / "reference.pcnt")
        if pred.n_frames >= 1:
            curve = metrics.accumulative_rmse(pred, ref)
            curve.write_csv(out / "rmse.csv", "rmse")
            payload["rmse_final"] = float(curve.values[-1])
            print(f"accumulative RMSE vs fresh solver reference: {curve.values[-1]:.6e}")
    _write_json(out / "metrics.json", payload)
    return 0


def _build_parser():
    p = argparse.ArgumentParser(
        prog="percnn",
        description="Physics-embedded recurrent-convolutional PDE learning pipeline",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_config_opts(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--preset", help="named built-in config")

    g = sub.add_parser("generate", help="integrate a benchmark system into a trajectory file")
    add_config_opts(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sample", help="downsample and corrupt a trajectory into measurements")
    add_config_opts(s)
    s.add_argument("--in", dest="input", required=True, help="fine trajectory (.pcnt)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    t = sub.add_parser("train", help="fit the recurrent model to a measurement file")
    add_config_opts(t)
    t.add_argument("--data", required=True, help="measurement trajectory (.pcnt)")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from --out/checkpoint.pcnc")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="rollout, accumulative RMSE and physics error vs a reference")
    e.add_argument("--model", required=True, help="checkpoint (.pcnc)")
    e.add_argument("--ref", required=True, help="fine reference trajectory (.pcnt)")
    e.add_argument("--extra", type=int, default=0, help="extrapolation steps past the horizon")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("interpret", help="extract the learned dynamics as a polynomial")
    i.add_argument("--model", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--prune-threshold", type=float, default=None)
    i.set_defaults(func=cmd_interpret)

    n = sub.add_parser("infer", help="predict from a new initial condition")
    n.add_argument("--model", required=True)
    n.add_argument("--ic", required=True, help="initial condition field (.pcnf)")
    n.add_argument("--steps", type=int, required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--reference", action="store_true",
                   help="also generate a solver reference from a fine-grid IC")
    n.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    from .errors import (
        BlowUpError,
        ConfigError,
        FileFormatError,
        TrainingDivergedError,
        UninterpretableModelError,
    )

    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileFormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2
    except UninterpretableModelError as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 3
    except (BlowUpError, TrainingDivergedError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
