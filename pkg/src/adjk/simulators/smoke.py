"""Optimizing the initial velocity of smoke so its density matches a target.

One simulation step is a host routine with a custom gradient: the pressure
buffers are shared by all steps, so the backward routine recomputes them
before running the adjoint kernels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..autodiff import register_custom_gradient
from ..runtime import ExecMode, FieldStore, Runtime
from .common import SimResult, build, check_finite, config_from_json

NAME = "smoke"


@dataclass
class SmokeConfig:
    n: int
    n_steps: int
    dt: float
    jacobi_iterations: int
    learning_rate: float
    n_iterations: int
    blob_radius: float
    target_shift: list
    target_image: Optional[str]
    init_velocity_scale: float
    seed: int

    def validate(self):
        if self.n < 3 or self.n_steps < 1 or self.dt <= 0 or self.jacobi_iterations < 0:
            raise ValueError("need n >= 3, n_steps >= 1, dt > 0, jacobi_iterations >= 0")


def load_config(**overrides) -> SmokeConfig:
    return config_from_json(SmokeConfig, NAME, overrides)


def _project(rt, t, jacobi):
    rt.launch("divergence", t)
    rt.launch("clear_pressure")
    for level in range(jacobi):
        rt.launch("jacobi", level)


def build_program(cfg: SmokeConfig):
    program = build(NAME, slots=cfg.n_steps + 1, n=cfg.n, cells=cfg.n * cfg.n, dt=cfg.dt,
                    levels=cfg.jacobi_iterations + 1, jacobi=cfg.jacobi_iterations)
    J = cfg.jacobi_iterations

    def step_forward(rt, t):
        rt.launch("advect", t)
        _project(rt, t, J)
        rt.launch("subtract_gradient", t)

    def step_backward(rt, t):
        # recompute this step's pressure solve into the shared buffers
        _project(rt, t, J)
        for f in ("div", "pressure"):
            rt.store.grad(f)[...] = 0
        rt.launch_grad("subtract_gradient", t)
        for level in reversed(range(J)):
            rt.launch_grad("jacobi", level)
        rt.launch_grad("clear_pressure")
        rt.launch_grad("divergence", t)
        rt.launch_grad("advect", t)

    program.define_routine("smoke_step.forward", step_forward)
    program.define_routine("smoke_step.backward", step_backward)
    return register_custom_gradient(program, "smoke_step", "smoke_step.forward", "smoke_step.backward")


def blob(cfg: SmokeConfig, shift=(0.0, 0.0)) -> np.ndarray:
    c = (np.arange(cfg.n) + 0.5) / cfg.n
    dx = np.abs(c[:, None] - 0.5 - shift[0])
    dy = np.abs(c[None, :] - 0.5 - shift[1])
    dx, dy = np.minimum(dx, 1 - dx), np.minimum(dy, 1 - dy)
    return np.exp(-(dx ** 2 + dy ** 2) / cfg.blob_radius ** 2)


def make_target(cfg: SmokeConfig) -> np.ndarray:
    if cfg.target_image:
        from ..io import read_pgm
        img = read_pgm(cfg.target_image)
        if img.shape != (cfg.n, cfg.n):
            raise ValueError(f"target image is {img.shape}, grid is {(cfg.n, cfg.n)}")
        return img
    return blob(cfg, cfg.target_shift)


class Smoke:
    def __init__(self, cfg: SmokeConfig, precision="f32", mode=ExecMode.PARALLEL):
        self.cfg = cfg
        self.program = build_program(cfg)
        self.rt = Runtime(self.program, FieldStore(self.program, precision), mode)
        s = self.rt.store
        s["density"][0] = blob(cfg)
        s["target"] = make_target(cfg)
        rng = np.random.default_rng(cfg.seed)
        s["vx"][0] = rng.standard_normal((cfg.n, cfg.n)) * cfg.init_velocity_scale
        s["vy"][0] = rng.standard_normal((cfg.n, cfg.n)) * cfg.init_velocity_scale

    @property
    def store(self):
        return self.rt.store

    def reset(self, rt=None):
        s = self.store
        for f in ("density", "vx", "vy", "vx_adv", "vy_adv"):
            s[f][1:] = 0
        s["loss"] = 0

    def forward(self, rt=None):
        rt = rt or self.rt
        for t in range(1, self.cfg.n_steps + 1):
            rt.call("smoke_step", t)
        rt.launch("compute_loss", self.cfg.n_steps)

    def max_divergence(self, t: int, advected: bool) -> float:
        """max |div v| of step t's velocity before (advected) or after projection."""
        s = self.store
        ux = s["vx_adv" if advected else "vx"][t].astype(np.float64)
        uy = s["vy_adv" if advected else "vy"][t].astype(np.float64)
        d = 0.5 * (np.roll(ux, -1, 0) - np.roll(ux, 1, 0) + np.roll(uy, -1, 1) - np.roll(uy, 1, 1))
        return float(np.abs(d).max())


def run(cfg: Optional[SmokeConfig] = None, precision="f32", mode=ExecMode.PARALLEL,
        frame_every: int = 0) -> SimResult:
    """Gradient descent on the initial velocity field."""
    cfg = cfg or load_config()
    sim = Smoke(cfg, precision, mode)
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
            frames.append((it, s["density"][cfg.n_steps].astype(np.float64).copy()))
        if it >= cfg.n_iterations:
            break
        for f in ("vx", "vy"):
            s[f][0] -= cfg.learning_rate * s.grad(f)[0]
    return SimResult(losses, params={"vx0": s["vx"][0].copy(), "vy0": s["vy"][0].copy()},
                     grads={"vx0": s.grad("vx")[0].copy(), "vy0": s.grad("vy")[0].copy()},
                     wall_clock=time.perf_counter() - t0, frames=frames)
