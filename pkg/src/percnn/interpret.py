"""Symbolic extraction of the learned dynamics as a multivariate polynomial.

A model whose product-block layers are either 1x1 trainable convolutions or
frozen derivative stencils computes, at every node, a polynomial in the
state channels and the tagged derivative symbols. Expanding the products of
linear forms recovers that polynomial exactly; evaluating it back on a grid
must reproduce the network output, which is the round-trip test that keeps
this module honest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import solver
from .errors import UninterpretableModelError
from .fields import Field
from .model import AXIS_NAMES, PercnnModel


def channel_names(channels: int) -> tuple[str, ...]:
    if channels == 2:
        return ("u", "v")
    return tuple(f"u{i}" for i in range(channels))


def symbol_order(channels: int, ndim: int) -> dict[str, int]:
    """Canonical symbol ordering: states, then derivatives, then Laplacians."""
    names = channel_names(channels)
    order = list(names)
    for nm in names:
        for ax in range(ndim):
            order.append(f"{nm}_{AXIS_NAMES[ax]}")
    for nm in names:
        order.append(f"lap_{nm}")
    return {s: i for i, s in enumerate(order)}


@dataclass(frozen=True)
class SymbolicTerm:
    """coefficient * product of symbols; the empty monomial is a constant."""

    coeff: float
    monomial: tuple[str, ...]

    @property
    def degree(self) -> int:
        return len(self.monomial)


@dataclass(frozen=True)
class SymbolicRhs:
    """Per output channel, a canonically ordered list of merged terms."""

    channels: tuple[str, ...]
    terms: tuple[tuple[SymbolicTerm, ...], ...]
    ndim: int = 2

    def channel_terms(self, name: str) -> tuple[SymbolicTerm, ...]:
        return self.terms[self.channels.index(name)]

    def coefficient(self, channel: str, monomial) -> float:
        """Coefficient of a monomial (0.0 when absent); order-insensitive."""
        idx = self.channels.index(channel)
        key = tuple(sorted(monomial))
        for t in self.terms[idx]:
            if tuple(sorted(t.monomial)) == key:
                return t.coeff
        return 0.0


def _merge(raw: dict[tuple[str, ...], float], order: dict[str, int]):
    terms = []
    for mono, coeff in raw.items():
        if coeff == 0.0:
            continue
        terms.append(SymbolicTerm(float(coeff), mono))
    terms.sort(key=lambda t: (-t.degree, tuple(order[s] for s in t.monomial)))
    return tuple(terms)


def _expand(poly: dict, form: dict, order: dict[str, int]) -> dict:
    """Multiply a polynomial by a linear form, both as monomial->coeff dicts."""
    out: dict[tuple[str, ...], float] = {}
    for mono_p, cp in poly.items():
        for mono_f, cf in form.items():
            mono = tuple(sorted(mono_p + mono_f, key=lambda s: order[s]))
            out[mono] = out.get(mono, 0.0) + cp * cf
    return out


def _layer_forms(model: PercnnModel):
    """Linear form per feature channel for every product-block layer."""
    cfg = model.cfg
    names = channel_names(cfg.channels)
    offenders = [
        f"pi.layer{l + 1}"
        for l in range(cfg.pi.n_layers)
        if cfg.pi.filter_sizes[l] != 1 and not (l == 0 and cfg.pi.frozen_first is not None)
    ]
    if offenders:
        raise UninterpretableModelError(
            "model has trainable filters wider than 1x1; cannot expand symbolically: "
            + ", ".join(offenders),
            layers=offenders,
        )
    layers = []
    for l in range(cfg.pi.n_layers):
        if l == 0 and cfg.pi.frozen_first is not None:
            forms = [
                {(f"{names[c]}_{AXIS_NAMES[axis]}",): 1.0}
                for c, axis in cfg.pi.frozen_first
            ]
        else:
            w = model.params[f"pi.layer{l + 1}.w"]
            b = model.params.get(f"pi.layer{l + 1}.b")
            forms = []
            for c in range(cfg.pi.n_channels):
                form = {}
                for ch in range(cfg.channels):
                    coeff = float(w[(c, ch) + (0,) * cfg.fine.ndim])
                    if coeff != 0.0:
                        form[(names[ch],)] = coeff
                if b is not None and b[c] != 0.0:
                    form[()] = float(b[c])
                forms.append(form)
        layers.append(forms)
    return layers


def extract(model: PercnnModel) -> SymbolicRhs:
    """Expand the learned update function into merged polynomial terms."""
    cfg = model.cfg
    names = channel_names(cfg.channels)
    order = symbol_order(cfg.channels, cfg.fine.ndim)
    layers = _layer_forms(model)
    channel_polys = []
    for c in range(cfg.pi.n_channels):
        poly = {(): 1.0}
        for forms in layers:
            poly = _expand(poly, forms[c], order)
        channel_polys.append(poly)

    mix_w = model.params["pi.mix.w"]
    mix_b = model.params.get("pi.mix.b")
    out_terms = []
    for i in range(cfg.channels):
        raw: dict[tuple[str, ...], float] = {}
        for c in range(cfg.pi.n_channels):
            f_c = float(mix_w[(i, c) + (0,) * cfg.fine.ndim])
            if f_c == 0.0:
                continue
            for mono, coeff in channel_polys[c].items():
                raw[mono] = raw.get(mono, 0.0) + f_c * coeff
        if mix_b is not None:
            raw[()] = raw.get((), 0.0) + float(mix_b[i])
        if cfg.highway.enabled:
            coeff = float(model.highway_coefficients()[i])
            key = (f"lap_{names[i]}",)
            raw[key] = raw.get(key, 0.0) + coeff
        out_terms.append(_merge(raw, order))
    return SymbolicRhs(names, tuple(out_terms), ndim=cfg.fine.ndim)


def _symbol_array(name: str, state: Field, cache: dict):
    if name in cache:
        return cache[name]
    names = channel_names(state.channels)
    if name in names:
        arr = state.data[names.index(name)]
    elif name.startswith("lap_"):
        base = name[4:]
        lap = cache.get("_lap")
        if lap is None:
            lap = solver.laplacian(state).data
            cache["_lap"] = lap
        arr = lap[names.index(base)]
    elif "_" in name:
        base, ax = name.rsplit("_", 1)
        if base not in names or ax not in AXIS_NAMES[: state.spec.ndim]:
            raise ValueError(f"unknown symbol {name!r}")
        axis = AXIS_NAMES.index(ax)
        key = f"_ddx{axis}"
        d = cache.get(key)
        if d is None:
            d = solver.ddx(state, axis).data
            cache[key] = d
        arr = d[names.index(base)]
    else:
        raise ValueError(f"unknown symbol {name!r}")
    cache[name] = arr
    return arr


def evaluate(sym: SymbolicRhs, state: Field) -> Field:
    """Pointwise evaluation of the polynomial using the FD stencils."""
    if len(sym.channels) != state.channels:
        raise ValueError(
            f"expression has {len(sym.channels)} channels, state has {state.channels}"
        )
    cache: dict = {}
    out = np.zeros_like(state.data)
    for i, terms in enumerate(sym.terms):
        acc = out[i]
        for t in terms:
            prod = np.full(state.spec.extents, t.coeff)
            for s in t.monomial:
                prod = prod * _symbol_array(s, state, cache)
            acc += prod
    return Field(state.spec, out)


def prune(sym: SymbolicRhs, threshold: float):
    """Drop terms with |coeff| < threshold; returns (pruned, dropped mass per channel)."""
    if threshold < 0:
        raise ValueError("prune threshold must be >= 0")
    kept = []
    dropped: dict[str, float] = {}
    for name, terms in zip(sym.channels, sym.terms):
        keep = tuple(t for t in terms if abs(t.coeff) >= threshold)
        dropped[name] = float(sum(abs(t.coeff) for t in terms if abs(t.coeff) < threshold))
        kept.append(keep)
    return SymbolicRhs(sym.channels, tuple(kept), ndim=sym.ndim), dropped


def relative_prune_threshold(sym: SymbolicRhs, rel: float = 1e-3) -> float:
    """Default pruning cut: a fraction of the largest coefficient magnitude."""
    peak = max(
        (abs(t.coeff) for terms in sym.terms for t in terms),
        default=0.0,
    )
    return rel * peak


def _display_symbol(s: str) -> str:
    if s.startswith("lap_"):
        return "Δ" + s[4:]  # lap_u renders as Δu
    return s


def _display_monomial(mono: tuple[str, ...]) -> str:
    parts = []
    seen: list[tuple[str, int]] = []
    for s in mono:
        if seen and seen[-1][0] == s:
            seen[-1] = (s, seen[-1][1] + 1)
        else:
            seen.append((s, 1))
    for s, p in seen:
        disp = _display_symbol(s)
        parts.append(disp if p == 1 else f"{disp}^{p}")
    return " ".join(parts)


def render_text(sym: SymbolicRhs, digits: int = 4) -> str:
    """Human-readable equations, one line per channel, 4 significant digits."""
    lines = []
    for name, terms in zip(sym.channels, sym.terms):
        if not terms:
            lines.append(f"{name}_t = 0")
            continue
        parts = []
        for j, t in enumerate(terms):
            mag = f"{abs(t.coeff):.{digits}g}"
            mono = _display_monomial(t.monomial)
            body = f"{mag} {mono}".strip()
            if j == 0:
                parts.append(body if t.coeff >= 0 else f"-{body}")
            else:
                parts.append(("+ " if t.coeff >= 0 else "- ") + body)
        lines.append(f"{name}_t = " + " ".join(parts))
    return "\n".join(lines)


def to_json_dict(sym: SymbolicRhs) -> dict:
    return {
        name: [{"coeff": t.coeff, "monomial": list(t.monomial)} for t in terms]
        for name, terms in zip(sym.channels, sym.terms)
    }
