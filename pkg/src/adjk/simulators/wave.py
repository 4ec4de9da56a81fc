"""Recovering an initial height field from the wave state it evolves into."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..runtime import ExecMode
from .common import SimResult, build, check_finite, config_from_json, make_runtime

NAME = "wave"


class CFLWarning(UserWarning):
    pass


@dataclass
class WaveConfig:
    n: int
    n_steps: int  # the loss reads u[n_steps]
    dx: float
    dt: float
    c: float
    alpha: float
    learning_rate: float
    n_iterations: int
    n_bumps: int
    bump_radius: float
    target_image: Optional[str]  # PGM file; None evolves a seeded field instead
    seed: int

    def validate(self):
        if self.dt <= 0 or self.dx <= 0 or self.n < 1 or self.n_steps < 1:
            raise ValueError("need dt, dx > 0 and n, n_steps >= 1")

    @property
    def courant(self) -> float:
        return self.c * self.dt / self.dx


def load_config(**overrides) -> WaveConfig:
    return config_from_json(WaveConfig, NAME, overrides)


def setup(cfg: WaveConfig, precision="f32", mode=ExecMode.PARALLEL):
    if cfg.courant > 1:
        warnings.warn(f"CFL condition violated: c*dt/dx = {cfg.courant:.3g} > 1", CFLWarning,
                      stacklevel=2)
    program = build(NAME, slots=max(cfg.n_steps, 1) + 1, n=cfg.n, cells=cfg.n * cfg.n,
                    inv_dx2=1.0 / cfg.dx ** 2, dx2=cfg.dx ** 2,
                    a1=cfg.c ** 2 * cfg.dt ** 2 + cfg.c * cfg.alpha * cfg.dt,
                    a2=cfg.c * cfg.alpha * cfg.dt)
    return make_runtime(program, precision, mode)


def bumps(cfg: WaveConfig, seed: Optional[int] = None) -> np.ndarray:
    """A sum of Gaussian bumps at seeded positions (periodic distance)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    coords = (np.arange(cfg.n) + 0.5) / cfg.n
    field = np.zeros((cfg.n, cfg.n))
    for cx, cy in rng.random((cfg.n_bumps, 2)):
        dx = np.abs(coords[:, None] - cx)
        dy = np.abs(coords[None, :] - cy)
        dx, dy = np.minimum(dx, 1 - dx), np.minimum(dy, 1 - dy)
        field += np.exp(-(dx ** 2 + dy ** 2) / cfg.bump_radius ** 2)
    return field


def forward(rt, cfg: WaveConfig):
    rt.launch("initialize")
    for t in range(2, cfg.n_steps + 1):
        rt.launch("step", t)
    rt.launch("compute_loss", cfg.n_steps)


def reset(rt, initial=None):
    s = rt.store
    s["loss"] = 0
    s["u"][1:] = 0
    if initial is not None:
        s["u"][0] = initial


def evolve(cfg: WaveConfig, initial, precision="f64", mode=ExecMode.DETERMINISTIC) -> np.ndarray:
    """Height field u[n_steps] reached from ``initial`` at rest."""
    rt = setup(cfg, precision, mode)
    reset(rt, initial)
    forward(rt, cfg)
    return rt.store["u"][cfg.n_steps].astype(np.float64)


def make_target(cfg: WaveConfig) -> np.ndarray:
    if cfg.target_image:
        from ..io import read_pgm
        img = read_pgm(cfg.target_image)
        if img.shape != (cfg.n, cfg.n):
            raise ValueError(f"target image is {img.shape}, grid is {(cfg.n, cfg.n)}")
        return img
    return evolve(cfg, bumps(cfg))


def run(cfg: Optional[WaveConfig] = None, precision="f32", mode=ExecMode.PARALLEL,
        frame_every: int = 0) -> SimResult:
    """Gradient descent on u[0], starting from a flat field."""
    cfg = cfg or load_config()
    target = make_target(cfg)
    rt = setup(cfg, precision, mode)
    rt.store["target"] = target
    reset(rt, 0.0)
    losses, frames = [], []
    t0 = time.perf_counter()
    for it in range(max(cfg.n_iterations, 1)):
        reset(rt)
        with rt.tape(loss="loss"):
            forward(rt, cfg)
        loss = float(rt.store["loss"])
        check_finite(NAME, it, loss)
        losses.append(loss)
        if frame_every and it % frame_every == 0:
            frames.append((it, rt.store["u"][cfg.n_steps].astype(np.float64).copy()))
        if it >= cfg.n_iterations:
            break
        # only u[0] is a free parameter; later slots are recomputed each pass
        rt.store["u"][0] -= cfg.learning_rate * rt.store.grad("u")[0]
    return SimResult(losses, params={"u0": rt.store["u"][0].copy()},
                     grads={"u0": rt.store.grad("u")[0].copy()},
                     wall_clock=time.perf_counter() - t0, frames=frames,
                     extra={"target": target})
