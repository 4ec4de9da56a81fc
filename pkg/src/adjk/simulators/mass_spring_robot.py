"""Mass-spring robots with a neural-network controller."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..runtime import ExecMode, FieldStore, Runtime, run_segmented
from .common import (SimResult, build, check_finite, config_from_json, load_json,
                     optimize)

NAME = "mass_spring_robot"
ROBOTS = ("robot1", "robot2", "robot3")
WEIGHTS = ("weights1", "bias1", "weights2", "bias2")
# tensors carried between steps and the per-step scratch tensors
STATE = ("x", "v")
SCRATCH = ("force", "center", "inputs", "hidden_pre", "hidden", "act_pre", "act")
STEP_KERNELS = ("compute_center", "compute_inputs", "nn1", "nn1_act", "nn2", "nn2_act",
                "apply_spring_force")


@dataclass
class RobotConfig:
    robot: str
    n_steps: int
    dt: float
    damping: float
    stiffness: float
    mass: float
    gravity: float
    ground_height: float
    act_strength: float
    n_sin_waves: int
    omega: float
    n_hidden: int
    input_scale: float
    init_scale: float
    learning_rate: float
    n_iterations: int
    toi: bool
    seed: int

    def validate(self):
        if self.dt <= 0 or self.n_steps < 1 or self.n_hidden < 1:
            raise ValueError("need dt > 0, n_steps >= 1 and n_hidden >= 1")


def load_config(**overrides) -> RobotConfig:
    return config_from_json(RobotConfig, NAME, overrides)


def load_robot(name: str) -> dict:
    """Points, springs (a, b, actuated) and the derived rest lengths."""
    if name not in ROBOTS:
        raise KeyError(f"unknown robot {name!r}; choose from {', '.join(ROBOTS)}")
    data = load_json("robots", name + ".json")
    pts = np.array(data["points"], dtype=np.float64)
    springs = np.array(data["springs"], dtype=np.int64)
    rest = np.linalg.norm(pts[springs[:, 0]] - pts[springs[:, 1]], axis=1)
    return {"points": pts, "a": springs[:, 0], "b": springs[:, 1],
            "actuation": springs[:, 2].astype(np.float64), "rest": rest}


class Robot:
    """A compiled robot program plus its runtime.

    ``window`` is the number of stored step slots (``n_steps + 1`` for full
    storage, ``S + 1`` for segment-wise checkpointing).
    """

    def __init__(self, cfg: RobotConfig, precision="f32", mode=ExecMode.PARALLEL,
                 window: Optional[int] = None):
        self.cfg = cfg
        self.geo = load_robot(cfg.robot)
        n = len(self.geo["points"])
        ns = len(self.geo["rest"])
        n_inputs = cfg.n_sin_waves + 2 * n
        self.window = window or cfg.n_steps + 1
        self.program = build(
            NAME, window=self.window, n_objects=n, n_springs=ns, n_inputs=n_inputs,
            n_hidden=cfg.n_hidden, n_w1=cfg.n_hidden * n_inputs, n_w2=ns * cfg.n_hidden,
            n_sin_waves=cfg.n_sin_waves, inv_n=1.0 / n, omega=cfg.omega, dt=cfg.dt,
            phase_step=2 * math.pi / cfg.n_sin_waves, input_scale=cfg.input_scale,
            act_strength=cfg.act_strength, stiffness=cfg.stiffness,
            decay=math.exp(-cfg.dt * cfg.damping), mass=cfg.mass, gravity=cfg.gravity,
            ground_height=cfg.ground_height, com0=float(self.geo["points"][:, 0].mean()))
        self.rt = Runtime(self.program, FieldStore(self.program, precision), mode)
        s = self.rt.store
        s["spring_anchor_a"] = self.geo["a"]
        s["spring_anchor_b"] = self.geo["b"]
        s["spring_length"] = self.geo["rest"]
        s["spring_actuation"] = self.geo["actuation"]
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

    def reset(self):
        s = self.store
        for f in STATE + SCRATCH + ("loss",):
            s[f] = 0
        s["x"][0] = self.geo["points"]

    def step(self, rt, slot: int, t: int):
        """Advance slot-1 to slot; ``t`` is the global step index."""
        rt.launch("compute_center", slot)
        rt.launch("compute_inputs", slot, t)
        for k in STEP_KERNELS[2:]:
            rt.launch(k, slot)
        rt.launch("advance_toi" if self.cfg.toi else "advance", slot)

    def forward(self, rt=None, n_steps: Optional[int] = None):
        rt = rt or self.rt
        n = self.cfg.n_steps if n_steps is None else n_steps
        for t in range(1, n + 1):
            self.step(rt, t, t)
        rt.launch("compute_loss", n)

    def tape_gradients(self) -> float:
        """Full-storage forward + backward; returns the loss."""
        self.reset()
        with self.rt.tape(loss="loss"):
            self.forward()
        return float(self.store["loss"])

    def segmented_gradients(self, segment_size: int):
        """Forward + backward with one snapshot per segment (window = S + 1)."""
        if self.window != segment_size + 1:
            raise ValueError(f"robot was built with window {self.window}, need {segment_size + 1}")
        self.reset()
        return run_segmented(
            self.program, self.store, self.step, self.cfg.n_steps, segment_size,
            checkpoint_fields=STATE, window_fields=SCRATCH,
            loss_routine=lambda rt, slot: rt.launch("compute_loss", slot), loss_field="loss",
            mode=self.rt.mode)

    def grads(self) -> dict:
        return {w: self.store.grad(w).copy() for w in WEIGHTS}

    def trajectory(self) -> np.ndarray:
        return self.store["x"].astype(np.float64).copy()


def run(cfg: Optional[RobotConfig] = None, precision="f32", mode=ExecMode.PARALLEL,
        segment_size: int = 0, frame_every: int = 0) -> SimResult:
    """Gradient descent on the controller weights."""
    cfg = cfg or load_config()
    window = segment_size + 1 if segment_size else None
    robot = Robot(cfg, precision, mode, window)
    t0 = time.perf_counter()
    if not segment_size:
        res = optimize(NAME, robot.rt, lambda rt: robot.forward(rt), "loss",
                       dict.fromkeys(WEIGHTS, cfg.learning_rate), cfg.n_iterations,
                       reset=lambda rt: robot.reset())
    else:
        losses = []
        for it in range(max(cfg.n_iterations, 1)):
            stats = robot.segmented_gradients(segment_size)
            check_finite(NAME, it, stats.loss)
            losses.append(stats.loss)
            if it >= cfg.n_iterations:
                break
            for w in WEIGHTS:
                robot.store[w] -= cfg.learning_rate * robot.store.grad(w)
        res = SimResult(losses, params={w: robot.store[w].copy() for w in WEIGHTS},
                        grads=robot.grads(), extra={"segments": stats.n_segments,
                                                    "peak_steps": stats.peak_steps})
    res.wall_clock = time.perf_counter() - t0
    if frame_every and not segment_size:
        robot.reset()
        robot.forward()
        res.frames = [(t, robot.store["x"][t].astype(np.float64).copy())
                      for t in range(0, cfg.n_steps + 1, frame_every)]
    return res
