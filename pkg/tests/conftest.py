"""Shared fixtures and helpers."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

import adjk
from adjk import ExecMode, FieldStore, Runtime
from adjk.ir import I32

CORPUS = Path(__file__).parent / "corpus"
CORPUS_FILES = sorted(CORPUS.glob("*.dk"))
VIOLATION_FILES = ("rule1_violation.dk", "rule2_violation.dk")


def corpus(name: str) -> Path:
    return CORPUS / name


def compile_corpus(name: str, adjoints=True):
    return adjk.compile_file(corpus(name), adjoints=adjoints)


def small_simulator_programs() -> dict:
    """Simulator programs at the smallest sizes that still exercise every kernel."""
    from adjk.simulators import (billiards, bouncing_ball, electric, mass_spring_robot,
                                 mass_spring_simple, smoke, wave)
    progs = {
        "mass_spring_simple": mass_spring_simple.build_program(
            mass_spring_simple.load_config(n_steps=8)),
        "bouncing_ball": bouncing_ball.setup(bouncing_ball.load_config(n_steps=8)).program,
        "mass_spring_robot": mass_spring_robot.Robot(
            mass_spring_robot.load_config(n_steps=8), "f64", ExecMode.DETERMINISTIC).program,
        "wave": wave.setup(wave.load_config(n=8, n_steps=4, dx=1 / 8, dt=0.05)).program,
        "smoke": smoke.build_program(smoke.load_config(n=8, n_steps=2)),
        "billiards": billiards.Billiards(billiards.load_config(n_steps=8)).program,
        "electric": electric.Electric(electric.load_config(n_steps=8), "f64",
                                      ExecMode.DETERMINISTIC).program,
    }
    return progs


def default_args(kernel, rng=None):
    """Arguments for a launch: i32 params get 2, f32 params a value in [0.25, 0.75]."""
    out = []
    for _, ty in kernel.params:
        if ty is I32:
            out.append(2)
        else:
            out.append(0.5 if rng is None else float(rng.uniform(0.25, 0.75)))
    return tuple(out)


def random_store(program, rng, precision="f64", int_high=3) -> FieldStore:
    store = FieldStore(program, precision)
    for name, decl in program.fields.items():
        if decl.elem is I32:
            store[name] = rng.integers(0, int_high, decl.shape)
        else:
            store[name] = rng.uniform(-1.0, 1.0, decl.shape)
    return store


def run_kernel(program, kernel, store, args):
    """Run ``kernel`` (any stage) in deterministic mode; returns the exception if any."""
    rt = Runtime(program, store, ExecMode.DETERMINISTIC)
    try:
        rt._execute(kernel, args)
    except Exception as exc:  # noqa: BLE001 - compared across pass variants
        return type(exc)
    return None


def store_bytes(store) -> dict:
    return {k: store.buffer(k).tobytes() for k in store.names()}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance report: test_acceptance.py appends one line per criterion
ACCEPTANCE_LINES: list = []


def report(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
