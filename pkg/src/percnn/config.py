"""Experiment configuration: JSON schema, validation, presets, seed streams.

Configs are strict: unknown keys are rejected with the offending name so a
typo cannot silently change an experiment. ``resolve_config`` fills every
default and derives per-stage seeds, producing the fully explicit document
that commands echo next to their outputs; feeding that document back
reproduces the run.
"""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import ConfigError
from .fields import GridSpec
from .solver import BURGERS_2D, GRAY_SCOTT_2D, GRAY_SCOTT_3D, PdeSystem


def derive_seed(root_seed: int, stream: str) -> int:
    """Stable named sub-stream seed (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(f"{root_seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def _check_keys(section: str, d: dict, allowed):
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")


def _require(section: str, d: dict, key: str):
    if key not in d:
        raise ConfigError(f"missing key {key!r} in section {section!r}")
    return d[key]


_SYSTEM_KEYS = {
    GRAY_SCOTT_2D: {"kind", "mu_u", "mu_v", "kappa", "f_feed", "bc"},
    GRAY_SCOTT_3D: {"kind", "mu_u", "mu_v", "kappa", "f_feed", "bc"},
    BURGERS_2D: {"kind", "nu", "bc"},
}

_SYSTEM_DEFAULTS = {
    GRAY_SCOTT_2D: {"mu_u": 2e-5, "mu_v": 5e-6, "kappa": 0.06, "f_feed": 0.04},
    GRAY_SCOTT_3D: {"mu_u": 0.2, "mu_v": 0.1, "kappa": 0.055, "f_feed": 0.025},
    BURGERS_2D: {"nu": 0.005},
}


def _resolve_system(raw: dict) -> dict:
    kind = _require("system", raw, "kind")
    if kind not in _SYSTEM_KEYS:
        raise ConfigError(f"unknown system kind {kind!r}")
    _check_keys("system", raw, _SYSTEM_KEYS[kind])
    out = {"kind": kind, "bc": raw.get("bc", "periodic")}
    if out["bc"] != "periodic":
        raise ConfigError("only periodic boundary conditions are configurable")
    for key, default in _SYSTEM_DEFAULTS[kind].items():
        out[key] = float(raw.get(key, default))
    return out


def _resolve_grid(raw: dict, ndim: int) -> dict:
    _check_keys("grid", raw, {"extents", "dx", "domain_length"})
    extents = [int(n) for n in _require("grid", raw, "extents")]
    if len(extents) != ndim:
        raise ConfigError(f"grid has {len(extents)} axes but the system is {ndim}D")
    if "dx" in raw and "domain_length" in raw:
        raise ConfigError("give either grid.dx or grid.domain_length, not both")
    if "dx" in raw:
        dx = float(raw["dx"])
    elif "domain_length" in raw:
        lengths = raw["domain_length"]
        if not isinstance(lengths, (int, float)):
            raise ConfigError("grid.domain_length must be a single number (uniform dx)")
        dx = float(lengths) / extents[0]
    else:
        raise ConfigError("grid needs dx or domain_length")
    return {"extents": extents, "dx": dx}


def _resolve_generate(raw: dict, seed: int) -> dict:
    _check_keys("generate", raw, {"dt", "n_steps", "record_every", "seed", "ic"})
    ic = raw.get("ic", {"kind": "default"})
    _check_keys("generate.ic", ic, {"kind", "path"})
    if ic.get("kind", "default") not in ("default", "file"):
        raise ConfigError(f"unknown ic kind {ic.get('kind')!r}")
    if ic.get("kind") == "file" and "path" not in ic:
        raise ConfigError("generate.ic with kind 'file' needs a path")
    return {
        "dt": float(_require("generate", raw, "dt")),
        "n_steps": int(_require("generate", raw, "n_steps")),
        "record_every": int(raw.get("record_every", 1)),
        "seed": int(raw["seed"]) if raw.get("seed") is not None else derive_seed(seed, "ic"),
        "ic": {"kind": ic.get("kind", "default"), **({"path": ic["path"]} if "path" in ic else {})},
    }


def _resolve_sample(raw: dict, seed: int) -> dict:
    _check_keys(
        "sample", raw, {"space_stride", "time_stride", "frame_window", "noise", "seed"}
    )
    return {
        "space_stride": int(raw.get("space_stride", 1)),
        "time_stride": int(raw.get("time_stride", 1)),
        "frame_window": int(raw["frame_window"]) if raw.get("frame_window") is not None else None,
        "noise": float(raw.get("noise", 0.0)),
        "seed": int(raw["seed"]) if raw.get("seed") is not None else derive_seed(seed, "noise"),
    }


def _resolve_model(raw: dict, seed: int, ndim: int) -> dict:
    _check_keys("model", raw, {"time_stride", "pi", "isg", "highway", "seed"})
    pi = raw.get("pi", {})
    _check_keys(
        "model.pi",
        pi,
        {"n_layers", "n_channels", "filter_size", "bias", "mix_bias", "frozen_first_derivatives"},
    )
    n_layers = int(pi.get("n_layers", 3))
    filter_size = pi.get("filter_size", 1)
    sizes = (
        [int(k) for k in filter_size]
        if isinstance(filter_size, list)
        else [int(filter_size)] * n_layers
    )
    bias = pi.get("bias", True)
    biases = [bool(b) for b in bias] if isinstance(bias, list) else [bool(bias)] * n_layers
    frozen = bool(pi.get("frozen_first_derivatives", False))
    if frozen:
        sizes[0] = 5
        biases[0] = False
    if len(sizes) != n_layers or len(biases) != n_layers:
        raise ConfigError("model.pi filter_size/bias lists must have one entry per layer")
    isg = raw.get("isg", {})
    _check_keys("model.isg", isg, {"hidden_channels", "filter_size"})
    highway = raw.get("highway", {})
    _check_keys("model.highway", highway, {"enabled", "bounds"})
    bounds = highway.get("bounds", "auto")
    if bounds != "auto":
        bounds = [[float(lo), float(hi)] for lo, hi in bounds]
    return {
        "time_stride": int(raw.get("time_stride", 1)),
        "pi": {
            "n_layers": n_layers,
            "n_channels": int(pi.get("n_channels", 8)),
            "filter_size": sizes,
            "bias": biases,
            "mix_bias": bool(pi.get("mix_bias", True)),
            "frozen_first_derivatives": frozen,
        },
        "isg": {
            "hidden_channels": int(isg.get("hidden_channels", 8)),
            "filter_size": int(isg.get("filter_size", 3)),
        },
        "highway": {"enabled": bool(highway.get("enabled", True)), "bounds": bounds},
        "seed": int(raw["seed"]) if raw.get("seed") is not None else derive_seed(seed, "init"),
    }


def _resolve_train(raw: dict, seed: int) -> dict:
    _check_keys(
        "train",
        raw,
        {"lr", "lambda", "max_epochs", "patience", "val_fraction", "seed",
         "physics_every", "max_live_steps"},
    )
    return {
        "lr": float(raw.get("lr", 0.002)),
        "lambda": float(raw.get("lambda", 0.1)),
        "max_epochs": int(raw.get("max_epochs", 5000)),
        "patience": int(raw.get("patience", 200)),
        "val_fraction": float(raw.get("val_fraction", 0.1)),
        "seed": int(raw["seed"]) if raw.get("seed") is not None else derive_seed(seed, "train"),
        "physics_every": int(raw.get("physics_every", 0)),
        "max_live_steps": (
            int(raw["max_live_steps"]) if raw.get("max_live_steps") is not None else 200
        ),
    }


def _resolve_eval(raw: dict) -> dict:
    _check_keys("eval", raw, {"extra_steps"})
    return {"extra_steps": int(raw.get("extra_steps", 0))}


def resolve_config(raw: dict) -> dict:
    """Validate a raw config document and fill in every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(
        "<root>", raw, {"seed", "system", "grid", "generate", "sample", "model", "train", "eval"}
    )
    seed = int(raw.get("seed", 0))
    system = _resolve_system(_require("<root>", raw, "system"))
    ndim = 3 if system["kind"] == GRAY_SCOTT_3D else 2
    resolved = {
        "seed": seed,
        "system": system,
        "grid": _resolve_grid(_require("<root>", raw, "grid"), ndim),
        "generate": _resolve_generate(raw.get("generate", {"dt": 0.1, "n_steps": 0}), seed),
        "sample": _resolve_sample(raw.get("sample", {}), seed),
        "model": _resolve_model(raw.get("model", {}), seed, ndim),
        "train": _resolve_train(raw.get("train", {}), seed),
        "eval": _resolve_eval(raw.get("eval", {})),
    }
    return resolved


def load_config(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")


def build_system(resolved: dict) -> PdeSystem:
    s = resolved["system"]
    if s["kind"] == BURGERS_2D:
        return PdeSystem(BURGERS_2D, nu=s["nu"])
    return PdeSystem(
        s["kind"], mu_u=s["mu_u"], mu_v=s["mu_v"], kappa=s["kappa"], f_feed=s["f_feed"]
    )


def build_grid(resolved: dict) -> GridSpec:
    g = resolved["grid"]
    return GridSpec(tuple(g["extents"]), g["dx"])


def config_json(resolved: dict) -> str:
    return json.dumps(resolved, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Shipped presets (desk scale: minutes on a laptop CPU)
# ---------------------------------------------------------------------------

def _burgers_base(noise):
    return {
        "seed": 11,
        "system": {"kind": "burgers2d", "nu": 0.005},
        "grid": {"extents": [101, 101], "dx": 0.01},
        "generate": {"dt": 2.5e-4, "n_steps": 1200, "record_every": 1},
        "sample": {"space_stride": 2, "time_stride": 40, "frame_window": 401, "noise": noise},
        "model": {
            "time_stride": 4,
            "pi": {
                "n_layers": 2,
                "n_channels": 4,
                "filter_size": [5, 1],
                "bias": [False, True],
                "frozen_first_derivatives": True,
            },
            "isg": {"hidden_channels": 8},
            "highway": {"enabled": True, "bounds": "auto"},
        },
        "train": {"lr": 0.005, "lambda": 1.0, "max_epochs": 500, "patience": 200,
                  "val_fraction": 0.1},
        "eval": {"extra_steps": 200},
    }


PRESETS = {
    # Frozen-derivative coefficient recovery (noise-free).
    "burgers-desk-clean": _burgers_base(0.0),
    # Same model on 10%-noise data; used for the extrapolation study.
    "burgers-desk": _burgers_base(0.1),
    # Small Burgers pipeline for smoke tests and determinism checks.
    "burgers-mini": {
        "seed": 5,
        "system": {"kind": "burgers2d", "nu": 0.005},
        "grid": {"extents": [51, 51], "dx": 0.02},
        "generate": {"dt": 1e-3, "n_steps": 300},
        "sample": {"space_stride": 2, "time_stride": 20, "frame_window": 201, "noise": 0.1},
        "model": {
            "time_stride": 2,
            "pi": {
                "n_layers": 2,
                "n_channels": 4,
                "filter_size": [5, 1],
                "bias": [False, True],
                "frozen_first_derivatives": True,
            },
            "isg": {"hidden_channels": 4},
            "highway": {"enabled": True, "bounds": "auto"},
        },
        "train": {"lr": 0.005, "lambda": 0.5, "max_epochs": 50, "patience": 50,
                  "val_fraction": 0.1},
        "eval": {"extra_steps": 100},
    },
    # 2D Gray-Scott: 41 noisy snapshots on 26x26 over the first 801 frames.
    "gs2d-desk": {
        "seed": 42,
        "system": {"kind": "gs2d"},
        "grid": {"extents": [101, 101], "dx": 0.01},
        "generate": {"dt": 0.5, "n_steps": 800},
        "sample": {"space_stride": 4, "time_stride": 20, "noise": 0.1},
        "model": {
            "time_stride": 1,
            "pi": {"n_layers": 3, "n_channels": 8, "filter_size": 1, "bias": True},
            "isg": {"hidden_channels": 16},
            "highway": {"enabled": True, "bounds": "auto"},
        },
        "train": {"lr": 0.002, "lambda": 0.005, "max_epochs": 1000, "patience": 200,
                  "val_fraction": 0.1},
        "eval": {"extra_steps": 1700},
    },
    # 3D Gray-Scott: 21 noisy snapshots on 25^3; the heaviest preset.
    "gs3d-mini": {
        "seed": 9,
        "system": {"kind": "gs3d"},
        "grid": {"extents": [49, 49, 49], "dx": 25 / 12},
        "generate": {"dt": 0.5, "n_steps": 300},
        "sample": {"space_stride": 2, "time_stride": 15, "noise": 0.1},
        "model": {
            "time_stride": 1,
            "pi": {"n_layers": 3, "n_channels": 4, "filter_size": 1, "bias": True},
            "isg": {"hidden_channels": 4},
            "highway": {"enabled": True, "bounds": "auto"},
        },
        "train": {"lr": 0.005, "lambda": 0.5, "max_epochs": 200, "patience": 50,
                  "val_fraction": 0.1},
        "eval": {"extra_steps": 700},
    },
}


def get_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        )
    return copy.deepcopy(PRESETS[name])
