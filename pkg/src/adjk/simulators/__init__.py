"""Differentiable simulators written in the kernel language.

Every module exposes ``load_config(**overrides)`` and
``run(cfg, precision, mode, frame_every) -> SimResult``.
"""

from importlib import import_module

from .common import DivergenceError, SimResult

NAMES = ("mass_spring_simple", "bouncing_ball", "mass_spring_robot", "wave", "smoke",
         "billiards", "electric")


def get(name: str):
    """Simulator module by name."""
    if name not in NAMES:
        raise KeyError(f"unknown simulator {name!r}; choose from {', '.join(NAMES)}")
    return import_module(f"{__name__}.{name}")


__all__ = ["NAMES", "DivergenceError", "SimResult", "get"]
