"""Steering a charged ball along a waypoint path with controlled electrodes."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..runtime import ExecMode
from .common import SimResult, build, check_finite, config_from_json, make_runtime

NAME = "electric"
WEIGHTS = ("weights1", "bias1", "weights2", "bias2")
N_INPUTS = 6


@dataclass
class ElectricConfig:
    n_steps: int
    dt: float
    damping: float
    mass: float
    coulomb: float
    ball_charge: float
    electrode_charge: float
    r_min: float
    n_electrodes: int
    electrode_radius: float
    center: list
    path_radius: float
    path_periods: float
    n_hidden: int
    velocity_scale: float
    init_scale: float
    learning_rate: float
    n_iterations: int
    seed: int

    def validate(self):
        if self.dt <= 0 or self.n_steps < 1 or self.r_min <= 0 or self.n_electrodes < 1:
            raise ValueError("need dt > 0, n_steps >= 1, r_min > 0, n_electrodes >= 1")


def load_config(**overrides) -> ElectricConfig:
    return config_from_json(ElectricConfig, NAME, overrides)


def electrode_positions(cfg: ElectricConfig) -> np.ndarray:
    a = 2 * math.pi * np.arange(cfg.n_electrodes) / cfg.n_electrodes
    return np.array(cfg.center) + cfg.electrode_radius * np.stack([np.cos(a), np.sin(a)], 1)


def waypoints(cfg: ElectricConfig) -> np.ndarray:
    """Target position for steps 0..n_steps: a circle starting at its right end."""
    a = 2 * math.pi * cfg.path_periods * np.arange(cfg.n_steps + 1) / cfg.n_steps
    return np.array(cfg.center) + cfg.path_radius * np.stack([np.cos(a), np.sin(a)], 1)


class Electric:
    def __init__(self, cfg: ElectricConfig, precision="f32", mode=ExecMode.PARALLEL):
        self.cfg = cfg
        h, e = cfg.n_hidden, cfg.n_electrodes
        self.program = build(
            NAME, slots=cfg.n_steps + 1, n_inputs=N_INPUTS, n_hidden=h, n_electrodes=e,
            n_w1=h * N_INPUTS, n_w2=e * h, velocity_scale=cfg.velocity_scale, r_min=cfg.r_min,
            coulomb=cfg.coulomb, ball_charge=cfg.ball_charge, electrode_charge=cfg.electrode_charge,
            decay=math.exp(-cfg.dt * cfg.damping), dt=cfg.dt, mass=cfg.mass)
        self.rt = make_runtime(self.program, precision, mode)
        s = self.rt.store
        s["electrodes"] = electrode_positions(cfg)
        s["target"] = waypoints(cfg)
        self.init_weights(cfg.seed)
        self.reset()

    @property
    def store(self):
        return self.rt.store

    def init_weights(self, seed: int, scale: Optional[float] = None):
        rng = np.random.default_rng(seed)
        scale = self.cfg.init_scale if scale is None else scale
        for name in WEIGHTS:
            shape = self.program.fields[name].shape
            self.store[name] = rng.standard_normal(shape) * scale if name.startswith("w") else 0

    def reset(self, start=None, velocity=(0.0, 0.0)):
        s = self.store
        for f in ("x", "v", "force", "inputs", "hidden_pre", "hidden", "charge_pre", "charge", "loss"):
            s[f] = 0
        s["x"][0] = s["target"][0] if start is None else start
        s["v"][0] = velocity

    def forward(self, rt=None, n_steps: Optional[int] = None):
        rt = rt or self.rt
        for t in range(1, (self.cfg.n_steps if n_steps is None else n_steps) + 1):
            for k in ("compute_inputs", "nn1", "nn1_act", "nn2", "nn2_act", "compute_force",
                      "advance", "compute_loss"):
                rt.launch(k, t)


def run(cfg: Optional[ElectricConfig] = None, precision="f32", mode=ExecMode.PARALLEL,
        frame_every: int = 0) -> SimResult:
    """Gradient descent on the controller weights."""
    cfg = cfg or load_config()
    sim = Electric(cfg, precision, mode)
    s = sim.store
    losses, frames = [], []
    t0 = time.perf_counter()
    for it in range(max(cfg.n_iterations, 1)):
        sim.reset()
        with sim.rt.tape(loss="loss"):
            sim.forward()
        loss = float(s["loss"])
        check_finite(NAME, it, loss)
        losses.append(loss)
        if frame_every and it % frame_every == 0:
            frames.append((it, s["x"].astype(np.float64).copy()))
        if it >= cfg.n_iterations:
            break
        for w in WEIGHTS:
            s[w] -= cfg.learning_rate * s.grad(w)
    return SimResult(losses, params={w: s[w].copy() for w in WEIGHTS},
                     grads={w: s.grad(w).copy() for w in WEIGHTS},
                     wall_clock=time.perf_counter() - t0, frames=frames,
                     extra={"trajectory": s["x"].astype(np.float64).copy()})
