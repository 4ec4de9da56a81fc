"""Final height of a bouncing ball and its gradient w.r.t. the initial height."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..runtime import ExecMode
from .common import SimResult, build, config_from_json, make_runtime

NAME = "bouncing_ball"


@dataclass
class BallConfig:
    n_steps: int  # integration steps; x has n_steps + 1 entries
    dt: float
    speed: float
    ground_height: float
    initial_height: float
    scan_from: float
    scan_to: float
    scan_samples: int

    def validate(self):
        if self.dt <= 0 or self.n_steps < 1:
            raise ValueError("need dt > 0 and n_steps >= 1")


def load_config(**overrides) -> BallConfig:
    return config_from_json(BallConfig, NAME, overrides)


def setup(cfg: BallConfig, precision="f64", mode=ExecMode.DETERMINISTIC):
    program = build(NAME, steps=cfg.n_steps + 1, dt=cfg.dt, ground_height=cfg.ground_height)
    return make_runtime(program, precision, mode)


def simulate(rt, cfg: BallConfig, height: float, toi: bool) -> tuple:
    """Return (final height, d final height / d initial height)."""
    s = rt.store
    for f in ("x", "v", "loss"):
        s[f] = 0
    s["x"][0] = height
    s["v"][0] = -cfg.speed
    kernel = "advance_toi" if toi else "advance"
    with rt.tape(loss="loss"):
        for t in range(1, cfg.n_steps + 1):
            rt.launch(kernel, t)
        rt.launch("compute_loss", cfg.n_steps)
    return float(s["loss"]), float(s.grad("x")[0])


def bouncing_ball(cfg: Optional[BallConfig] = None, toi: bool = True, precision="f64",
                  mode=ExecMode.DETERMINISTIC) -> tuple:
    cfg = cfg or load_config()
    return simulate(setup(cfg, precision, mode), cfg, cfg.initial_height, toi)


def scan(cfg: Optional[BallConfig] = None, toi: bool = False, lo=None, hi=None, samples=None,
         precision="f64", mode=ExecMode.DETERMINISTIC):
    """Final height and gradient over a range of initial heights."""
    cfg = cfg or load_config()
    lo = cfg.scan_from if lo is None else lo
    hi = cfg.scan_to if hi is None else hi
    samples = cfg.scan_samples if samples is None else samples
    rt = setup(cfg, precision, mode)
    heights = np.linspace(lo, hi, samples)
    out = np.array([simulate(rt, cfg, h, toi) for h in heights])
    return heights, out[:, 0], out[:, 1]


def sign_changes(values) -> int:
    """Sign changes of the discrete derivative of a sampled curve."""
    d = np.sign(np.diff(np.asarray(values, dtype=np.float64)))
    d = d[d != 0]
    return int(np.count_nonzero(d[1:] != d[:-1]))


def run(cfg: Optional[BallConfig] = None, toi: bool = True, precision="f64",
        mode=ExecMode.DETERMINISTIC) -> SimResult:
    cfg = cfg or load_config()
    rt = setup(cfg, precision, mode)
    height, grad = simulate(rt, cfg, cfg.initial_height, toi)
    return SimResult([height], params={"initial_height": cfg.initial_height},
                     grads={"initial_height": grad},
                     extra={"final_height": height, "gradient": grad, "toi": toi,
                            "trajectory": rt.store["x"].copy()})
