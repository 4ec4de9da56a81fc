"""Billiards: aim the cue ball so that a chosen ball reaches a goal."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..runtime import ExecMode
from .common import SimResult, build, check_finite, config_from_json, make_runtime

NAME = "billiards"


class PlacementError(ValueError):
    pass


@dataclass
class BilliardsConfig:
    n_steps: int
    dt: float
    radius: float
    elasticity: float
    speed: float
    cue_position: list
    aim_angle: float
    rack_origin: list
    rack_rows: int
    target_ball: int
    goal: list
    learning_rate: float
    n_iterations: int
    scan_from: float
    scan_to: float
    scan_samples: int
    flat_from: float  # an aim window in which the cue ball touches nothing
    flat_to: float

    def validate(self):
        if self.dt <= 0 or self.n_steps < 1 or self.radius <= 0:
            raise ValueError("need dt > 0, n_steps >= 1, radius > 0")

    @property
    def n_balls(self) -> int:
        return 1 + self.rack_rows * (self.rack_rows + 1) // 2


def load_config(**overrides) -> BilliardsConfig:
    return config_from_json(BilliardsConfig, NAME, overrides)


def rack(cfg: BilliardsConfig) -> np.ndarray:
    """Cue position followed by a triangle of balls pointing at the cue."""
    pts = [list(cfg.cue_position)]
    ox, oy = cfg.rack_origin
    step = 2 * cfg.radius * 1.05
    for row in range(cfg.rack_rows):
        for k in range(row + 1):
            pts.append([ox + row * step * math.sqrt(3) / 2, oy + (k - row / 2) * step])
    return np.array(pts)


def check_placement(points, radius):
    p = np.asarray(points, dtype=np.float64)
    d = np.linalg.norm(p[:, None] - p[None], axis=-1) + np.eye(len(p)) * 1e9
    if d.min() < 2 * radius:
        i, j = np.unravel_index(np.argmin(d), d.shape)
        raise PlacementError(f"balls {i} and {j} overlap initially (distance {d[i, j]:.4g})")


class Billiards:
    def __init__(self, cfg: BilliardsConfig, precision="f64", mode=ExecMode.DETERMINISTIC,
                 points=None):
        if not 0 <= cfg.target_ball < cfg.n_balls:
            raise ValueError(f"target ball {cfg.target_ball} out of range")
        self.cfg = cfg
        self.points = rack(cfg) if points is None else np.asarray(points, dtype=np.float64)
        check_placement(self.points, cfg.radius)
        n = len(self.points)
        self.program = build(NAME, slots=cfg.n_steps + 1, n_balls=n, n_others=n - 1, dt=cfg.dt,
                             radius=cfg.radius, elasticity=cfg.elasticity, speed=cfg.speed,
                             target_ball=cfg.target_ball)
        self.rt = make_runtime(self.program, precision, mode)
        s = self.rt.store
        s["init_x"] = self.points[0]
        s["aim_angle"] = cfg.aim_angle
        s["goal"] = cfg.goal

    @property
    def store(self):
        return self.rt.store

    def reset(self):
        s = self.store
        for f in ("x", "v", "impulse", "x_inc", "loss"):
            s[f] = 0
        s["x"][0] = self.points

    def forward(self, rt=None, aim: bool = True, n_steps: Optional[int] = None):
        """``aim`` derives the cue velocity from ``aim_angle``; otherwise
        ``init_v`` is used as set."""
        rt = rt or self.rt
        n = self.cfg.n_steps if n_steps is None else n_steps
        if aim:
            rt.launch("aim")
        rt.launch("place_cue")
        for t in range(1, n + 1):
            rt.launch("collide", t - 1)
            rt.launch("advance", t)
        rt.launch("compute_loss", n)

    def evaluate(self, angle: float) -> tuple:
        """(loss, d loss / d angle) for one aim angle."""
        self.reset()
        self.store["aim_angle"] = angle
        with self.rt.tape(loss="loss"):
            self.forward()
        return float(self.store["loss"]), float(self.store.grad("aim_angle"))

    def contact_steps(self) -> np.ndarray:
        """Steps whose impulse is non-zero for any ball (after a forward run)."""
        imp = np.abs(self.store["impulse"]).reshape(self.cfg.n_steps + 1, -1).max(axis=1)
        return np.nonzero(imp > 0)[0]


def scan(cfg: Optional[BilliardsConfig] = None, lo=None, hi=None, samples=None,
         precision="f64", mode=ExecMode.DETERMINISTIC):
    """Loss and gradient over a sweep of aim angles."""
    cfg = cfg or load_config()
    sim = Billiards(cfg, precision, mode)
    angles = np.linspace(cfg.scan_from if lo is None else lo, cfg.scan_to if hi is None else hi,
                         cfg.scan_samples if samples is None else samples)
    out = np.array([sim.evaluate(a) for a in angles])
    return angles, out[:, 0], out[:, 1]


def jumps(values, factor: float = 10.0) -> np.ndarray:
    """Indices i where |v[i+1] - v[i]| exceeds ``factor`` times the median step."""
    d = np.abs(np.diff(np.asarray(values, dtype=np.float64)))
    med = np.median(d[d > 0]) if np.any(d > 0) else 0.0
    return np.nonzero(d > factor * med)[0] if med > 0 else np.array([], dtype=int)


def run(cfg: Optional[BilliardsConfig] = None, precision="f64", mode=ExecMode.DETERMINISTIC,
        frame_every: int = 0) -> SimResult:
    """Gradient descent on the cue ball's initial position and velocity."""
    cfg = cfg or load_config()
    sim = Billiards(cfg, precision, mode)
    s = sim.store
    sim.rt.launch("aim")
    losses, frames = [], []
    t0 = time.perf_counter()
    for it in range(max(cfg.n_iterations, 1)):
        sim.reset()
        with sim.rt.tape(loss="loss"):
            sim.forward(aim=False)
        loss = float(s["loss"])
        check_finite(NAME, it, loss)
        losses.append(loss)
        if frame_every and it % frame_every == 0:
            frames.append((it, s["x"][cfg.n_steps].copy()))
        if it >= cfg.n_iterations:
            break
        for f in ("init_x", "init_v"):
            s[f] -= cfg.learning_rate * s.grad(f)
    return SimResult(losses, params={"init_x": s["init_x"].copy(), "init_v": s["init_v"].copy()},
                     grads={"init_x": s.grad("init_x").copy(), "init_v": s.grad("init_v").copy()},
                     wall_clock=time.perf_counter() - t0, frames=frames)
