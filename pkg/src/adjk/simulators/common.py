"""Shared plumbing for the simulators: configs, DSL templates, optimization loops."""

from __future__ import annotations

import json
import math
import string
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from typing import Callable, Optional

import numpy as np

from ..runtime import ExecMode, FieldStore, Runtime
from .. import compile_source

_PKG = __package__


class DivergenceError(RuntimeError):
    """Raised when an optimization loop produces a non-finite loss."""

    def __init__(self, name: str, iteration: int, loss: float):
        super().__init__(f"{name}: non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class SimResult:
    losses: list
    params: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)
    frames: list = field(default_factory=list)  # (index, 2-D array) pairs for PGM output


def read_resource(*parts) -> str:
    res = resources.files(_PKG)
    for part in parts:
        res = res.joinpath(part)
    return res.read_text(encoding="utf-8")


def load_json(*parts) -> dict:
    return json.loads(read_resource(*parts))


def config_from_json(cls, name: str, overrides: Optional[dict] = None):
    """Build dataclass ``cls`` from ``configs/<name>.json`` plus overrides.

    Keys starting with ``_`` in the JSON file are comments.
    """
    raw = {k: v for k, v in load_json("configs", name + ".json").items() if not k.startswith("_")}
    known = {f.name for f in fields(cls)}
    for key, value in (overrides or {}).items():
        if key not in known:
            raise KeyError(f"{cls.__name__} has no field {key!r}")
        raw[key] = value
    missing = known - set(raw)
    unknown = set(raw) - known
    if missing or unknown:
        raise KeyError(f"config {name}: missing {sorted(missing)}, unknown {sorted(unknown)}")
    cfg = cls(**raw)
    validate = getattr(cfg, "validate", None)
    if validate is not None:
        validate()
    return cfg


def literal(value) -> str:
    """DSL literal for a Python number (floats keep full precision)."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if not math.isfinite(v):
        raise ValueError(f"cannot embed non-finite constant {v}")
    text = repr(v)
    if "e" not in text and "." not in text:
        text += ".0"
    return f"({text})" if v < 0 else text


def render(template: str, **values) -> str:
    """Substitute ``$name`` placeholders of a DSL template."""
    return string.Template(read_resource("dk", template + ".dk")).substitute(
        {k: v if isinstance(v, str) else literal(v) for k, v in values.items()})


def build(template: str, **values):
    return compile_source(render(template, **values), f"<{template}.dk>")


def make_runtime(program, precision="f32", mode=ExecMode.PARALLEL) -> Runtime:
    return Runtime(program, FieldStore(program, precision), ExecMode(mode))


def check_finite(name: str, iteration: int, loss: float) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(name, iteration, loss)


def optimize(name: str, rt: Runtime, forward: Callable, loss_field: str, params: dict,
             n_iterations: int, reset: Optional[Callable] = None,
             callback: Optional[Callable] = None) -> SimResult:
    """Plain gradient descent on ``params`` (field name -> learning rate).

    Each iteration resets the state (``reset(rt)``), runs ``forward(rt)``
    under a tape, backpropagates and updates.  The reported loss trace has
    ``n_iterations`` entries; with zero iterations the initial loss is
    still evaluated once.
    """
    store = rt.store
    losses = []
    t0 = time.perf_counter()
    for it in range(max(n_iterations, 1)):
        if reset is not None:
            reset(rt)
        with rt.tape(loss=loss_field):
            forward(rt)
        loss = float(store[loss_field])
        check_finite(name, it, loss)
        losses.append(loss)
        if callback is not None:
            callback(it, rt)
        if it >= n_iterations:
            break
        for pname, lr in params.items():
            store[pname] -= lr * store.grad(pname)
    return SimResult(losses, params={p: store[p].copy() for p in params},
                     grads={p: store.grad(p).copy() for p in params},
                     wall_clock=time.perf_counter() - t0)
