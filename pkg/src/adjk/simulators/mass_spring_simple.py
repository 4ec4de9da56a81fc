"""Rest-length optimization of a three-spring triangle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..runtime import ExecMode
from .common import SimResult, build, config_from_json, make_runtime, optimize

NAME = "mass_spring_simple"


@dataclass
class MassSpringConfig:
    n_steps: int  # stored time steps, x[0] is the initial state
    dt: float
    damping: float
    stiffness: float
    mass: float
    learning_rate: float
    n_iterations: int
    target_area: float
    points: list
    springs: list
    rest_lengths: list

    def validate(self):
        if self.dt <= 0 or self.n_steps < 2:
            raise ValueError("need dt > 0 and at least two steps")
        if len(self.springs) != len(self.rest_lengths):
            raise ValueError("one rest length per spring")


def load_config(**overrides) -> MassSpringConfig:
    return config_from_json(MassSpringConfig, NAME, overrides)


def build_program(cfg: MassSpringConfig):
    return build(NAME, steps=cfg.n_steps, n_objects=len(cfg.points), n_springs=len(cfg.springs),
                 stiffness=cfg.stiffness, decay=math.exp(-cfg.dt * cfg.damping), dt=cfg.dt,
                 mass=cfg.mass, target_area=cfg.target_area)


def setup(cfg: MassSpringConfig, precision="f32", mode=ExecMode.PARALLEL):
    program = build_program(cfg)
    rt = make_runtime(program, precision, mode)
    s = rt.store
    s["spring_anchor_a"] = [a for a, _ in cfg.springs]
    s["spring_anchor_b"] = [b for _, b in cfg.springs]
    s["spring_length"] = cfg.rest_lengths
    reset(rt, cfg)
    return rt


def reset(rt, cfg: MassSpringConfig):
    s = rt.store
    for f in ("x", "v", "force", "loss"):
        s[f] = 0
    s["x"][0] = cfg.points


def forward(rt, cfg: MassSpringConfig):
    for t in range(1, cfg.n_steps):
        rt.launch("apply_spring_force", t)
        rt.launch("time_integrate", t)
    rt.launch("compute_loss", cfg.n_steps - 1)


def triangle_area(points) -> float:
    p = np.asarray(points, dtype=np.float64)
    a, b = p[0] - p[1], p[0] - p[2]
    return abs(0.5 * (a[0] * b[1] - a[1] * b[0]))


def run(cfg: Optional[MassSpringConfig] = None, precision="f32", mode=ExecMode.PARALLEL,
        frame_every: int = 0) -> SimResult:
    cfg = cfg or load_config()
    rt = setup(cfg, precision, mode)
    frames = []

    def callback(it, rt):
        if frame_every and it % frame_every == 0:
            frames.append((it, rt.store["x"][cfg.n_steps - 1].copy()))

    res = optimize(NAME, rt, lambda r: forward(r, cfg), "loss",
                   {"spring_length": cfg.learning_rate}, cfg.n_iterations,
                   reset=lambda r: reset(r, cfg), callback=callback)
    # state of the final parameters
    reset(rt, cfg)
    forward(rt, cfg)
    final = rt.store["x"][cfg.n_steps - 1].astype(np.float64)
    res.extra.update(final_area=triangle_area(final), final_loss=float(rt.store["loss"]),
                     final_points=final)
    res.frames = frames
    return res
